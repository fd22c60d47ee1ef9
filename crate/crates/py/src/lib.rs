//! Python bindings for `cllrce-core`.
//!
//! Matrices cross the boundary as lists of rows; scores as flat lists.

use std::path::PathBuf;

use cllrce_core::io::{self, Checkpoint};
use cllrce_core::losses::{LabelBatch, LogitBatch, LossKind};
use cllrce_core::metrics::{self, DcfParams, McNemarMethod, ScoreSet};
use cllrce_core::model;
use cllrce_core::pipeline::{self, ExperimentConfig};
use cllrce_core::synthdata;
use cllrce_core::trainer::TrainHistory;
use cllrce_core::Error;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_loss(name: &str) -> PyResult<LossKind> {
    name.parse().map_err(py_err)
}

fn loss(kind: LossKind, logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let logits = LogitBatch::new(to_matrix(&logits)?).map_err(py_err)?;
    let out = kind.evaluate(&logits, &LabelBatch::new(labels)).map_err(py_err)?;
    Ok((out.value, to_rows(&out.grad)))
}

/// Cross-entropy (nats) and its gradient with respect to the logits.
#[pyfunction]
fn ce_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    loss(LossKind::Ce, logits, labels)
}

/// Minibatch Cllr (bits) and its gradient.
#[pyfunction]
fn cllr_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    loss(LossKind::Cllr, logits, labels)
}

/// Mean of Cllr and cross-entropy, with its gradient.
#[pyfunction]
fn cllr_ce_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    loss(LossKind::CllrCe, logits, labels)
}

#[pyfunction]
fn eer(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> PyResult<f64> {
    metrics::eer(&ScoreSet::new(target_scores, nontarget_scores)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (target_scores, nontarget_scores, p_target=0.01, c_miss=1.0, c_fa=1.0))]
fn min_dcf(
    target_scores: Vec<f64>,
    nontarget_scores: Vec<f64>,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> PyResult<f64> {
    let params = DcfParams { p_target, c_miss, c_fa };
    metrics::min_dcf(&ScoreSet::new(target_scores, nontarget_scores), &params).map_err(py_err)
}

/// Cllr of a set of log-likelihood-ratio scores.
#[pyfunction]
fn cllr(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> PyResult<f64> {
    metrics::cllr_metric(&ScoreSet::new(target_scores, nontarget_scores)).map_err(py_err)
}

/// McNemar's test on paired correctness. `method` is `"exact"`, `"chi2"` or
/// `None` for the automatic choice.
#[pyfunction]
#[pyo3(signature = (correct_a, correct_b, method=None))]
fn mcnemar<'py>(
    py: Python<'py>,
    correct_a: Vec<bool>,
    correct_b: Vec<bool>,
    method: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let method = match method {
        None => None,
        Some("exact") => Some(McNemarMethod::ExactBinomial),
        Some("chi2") => Some(McNemarMethod::ChiSquareCorrected),
        Some(other) => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
    };
    let r = metrics::mcnemar_with(&correct_a, &correct_b, method).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("n01", r.n01)?;
    d.set_item("n10", r.n10)?;
    d.set_item("statistic", r.statistic)?;
    d.set_item("p_value", r.p_value)?;
    d.set_item(
        "method",
        match r.method {
            McNemarMethod::ExactBinomial => "exact",
            McNemarMethod::ChiSquareCorrected => "chi2",
        },
    )?;
    d.set_item("significant", r.significant())?;
    Ok(d)
}

/// An experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML; with no argument, the defaults.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml(text).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.set_seed(seed);
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.inner.train.epochs = epochs;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, epochs={})", self.inner.seed, self.inner.train.epochs)
    }
}

/// A split synthetic corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: synthdata::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Generates and splits the corpus described by `config`.
    #[staticmethod]
    fn generate(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::synth(&config.inner).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_corpus(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_corpus(&path, &self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.utterances.len()
    }

    fn keys(&self) -> Vec<String> {
        self.inner.utterances.iter().map(|u| u.key()).collect()
    }

    /// `(speaker_id, style_id, split)` for every utterance.
    fn labels(&self) -> Vec<(usize, usize, String)> {
        self.inner
            .utterances
            .iter()
            .map(|u| (u.speaker_id, u.style_id, format!("{:?}", u.split).to_lowercase()))
            .collect()
    }

    fn features(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let u = self
            .inner
            .utterances
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no utterance {index}")))?;
        Ok(to_rows(&u.features))
    }
}

/// A trained embedding extractor.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Checkpoint,
    history: Option<TrainHistory>,
}

#[pymethods]
impl PyModel {
    /// Trains on the corpus's training split with `loss` (`ce`, `cllr` or
    /// `cllr_ce`).
    #[staticmethod]
    fn train(py: Python<'_>, config: &PyConfig, corpus: &PyCorpus, loss: &str) -> PyResult<Self> {
        let kind = parse_loss(loss)?;
        let (cfg, data) = (&config.inner, &corpus.inner);
        let (ckpt, history) = py.detach(|| pipeline::train(cfg, data, kind)).map_err(py_err)?;
        Ok(Self {
            inner: ckpt,
            history: Some(history),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_checkpoint(&path).map_err(py_err)?,
            history: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_checkpoint(&path, &self.inner).map_err(py_err)
    }

    /// Per-epoch mean loss, empty for a loaded checkpoint.
    #[getter]
    fn epoch_loss(&self) -> Vec<f64> {
        self.history.as_ref().map_or_else(Vec::new, |h| h.epoch_loss.clone())
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config.embedding_dim
    }

    /// Embeds one utterance given as `frames x feature_dim` rows.
    fn embed(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = to_matrix(&features)?;
        Ok(model::embed(&self.inner.params, x.view()).map_err(py_err)?.0.to_vec())
    }
}

/// Default configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

/// Runs the whole pipeline into `config.output_dir` and returns the report.
#[pyfunction]
fn run(py: Python<'_>, config: &PyConfig) -> PyResult<String> {
    let cfg = &config.inner;
    let (_, table) = py.detach(|| pipeline::run(cfg)).map_err(py_err)?;
    Ok(table.to_text())
}

#[pymodule]
fn cllrce(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cllr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cllr_ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(cllr, m)?)?;
    m.add_function(wrap_pyfunction!(mcnemar, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
