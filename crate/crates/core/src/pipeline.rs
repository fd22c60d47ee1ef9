//! Experiment configuration and the stage implementations behind the `cllrce`
//! binary. Every stage reads and writes the formats in [`crate::io`], and
//! identical inputs give byte-identical outputs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::experiment::embed_corpus;
use crate::io::{self, Checkpoint, ScoreLine};
use crate::losses::LossKind;
use crate::metrics::{self, DcfParams, LabeledScore, McNemarResult, MetricsReport};
use crate::model::{ModelConfig, Pooling};
use crate::scoring::{self, BackendKind, EmbeddingStore, Trial};
use crate::synthdata::{self, parse_key, Corpus, CorpusSpec, Split, SplitSpec};
use crate::trainer::{self, TrainConfig, TrainHistory};

/// Model widths; input size and speaker count come from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub pooling: Pooling,
    pub frame_layer_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub attention_dim: usize,
    pub condition_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let reference = ModelConfig::new(1, 2, Pooling::Attention);
        Self {
            pooling: Pooling::Stats,
            frame_layer_dims: reference.frame_layer_dims,
            embedding_dim: reference.embedding_dim,
            attention_dim: reference.attention_dim.expect("attention defaults"),
            condition_dim: reference.condition_dim.expect("attention defaults"),
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, feature_dim: usize, n_speakers: usize) -> Result<ModelConfig> {
        let attention = self.pooling == Pooling::Attention;
        let config = ModelConfig {
            feature_dim,
            frame_layer_dims: self.frame_layer_dims.clone(),
            embedding_dim: self.embedding_dim,
            n_speakers,
            pooling: self.pooling,
            attention_dim: attention.then_some(self.attention_dim),
            condition_dim: attention.then_some(self.condition_dim),
        };
        config.validate()?;
        Ok(config)
    }
}

/// A whole experiment, read from TOML. The top-level `seed` drives corpus
/// generation, the split and training; the sections may not set their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub backend: BackendKind,
    /// Systems trained by `run`; the first is the significance baseline.
    pub systems: Vec<LossKind>,
    pub corpus: CorpusSpec,
    pub split: SplitSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub dcf: DcfParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            backend: BackendKind::Cosine,
            systems: vec![LossKind::Ce, LossKind::CllrCe],
            corpus: CorpusSpec::default(),
            split: SplitSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            dcf: DcfParams::default(),
        }
    }
}

const SEEDED_SECTIONS: [&str; 3] = ["corpus", "split", "train"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        for section in SEEDED_SECTIONS {
            if value.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::Config(format!(
                    "`{section}.seed` is not allowed; set `seed` at the top level"
                )));
            }
        }
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        config.set_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_text(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        let mut value = toml::Table::try_from(self).expect("config serializes");
        for section in SEEDED_SECTIONS {
            if let Some(toml::Value::Table(t)) = value.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&value).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.dcf.validate()?;
        ensure!(!self.systems.is_empty(), "at least one system is required");
        let mut seen = self.systems.clone();
        seen.sort_by_key(|l| l.name());
        seen.dedup();
        ensure!(seen.len() == self.systems.len(), "systems must be distinct");
        ensure!(
            self.split.train_speakers >= 2,
            "train_speakers must be >= 2 to train a speaker classifier"
        );
        ensure!(
            self.split.train_speakers < self.corpus.n_speakers,
            "train_speakers must leave evaluation speakers"
        );
        self.model.resolve(self.corpus.feature_dim, self.split.train_speakers)?;
        Ok(())
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn synth(config: &ExperimentConfig) -> Result<Corpus> {
    config.validate()?;
    let mut corpus = synthdata::generate_corpus(&config.corpus)?;
    synthdata::split_corpus(&mut corpus, &config.split)?;
    Ok(corpus)
}

pub fn cmd_synth(config: &ExperimentConfig, out: &Path) -> Result<()> {
    io::write_corpus(out, &synth(config)?)
}

pub fn train(config: &ExperimentConfig, corpus: &Corpus, loss: LossKind) -> Result<(Checkpoint, TrainHistory)> {
    config.validate()?;
    let n_train = {
        let train: Vec<_> = corpus.utterances.iter().filter(|u| u.split == Split::Train).collect();
        trainer::speaker_index(&train).len()
    };
    let model = config.model.resolve(corpus.spec.feature_dim, n_train)?;
    let tc = TrainConfig {
        loss_kind: loss,
        ..config.train.clone()
    };
    let outcome = trainer::train(&corpus.utterances, &model, &tc)?;
    Ok((
        Checkpoint {
            config: model,
            params: outcome.params,
            step: outcome.optimizer.step,
            speaker_ids: outcome.speaker_ids,
        },
        outcome.history,
    ))
}

/// Default history path next to a checkpoint: `model.ckpt` -> `model.history.json`.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("history.json")
}

pub fn cmd_train(
    config: &ExperimentConfig,
    corpus_path: &Path,
    loss: LossKind,
    out_checkpoint: &Path,
    out_history: &Path,
) -> Result<TrainHistory> {
    let corpus = io::read_corpus(corpus_path)?;
    let (ckpt, history) = train(config, &corpus, loss)?;
    io::write_checkpoint(out_checkpoint, &ckpt)?;
    io::write_json(out_history, &history)?;
    Ok(history)
}

pub fn cmd_embed(checkpoint: &Path, corpus_path: &Path, out: &Path) -> Result<EmbeddingStore> {
    let ckpt = io::read_checkpoint(checkpoint)?;
    let corpus = io::read_corpus(corpus_path)?;
    ensure!(
        corpus.spec.feature_dim == ckpt.config.feature_dim,
        "corpus feature_dim {} does not match the checkpoint ({})",
        corpus.spec.feature_dim,
        ckpt.config.feature_dim
    );
    let store = embed_corpus(&ckpt.params, &corpus.utterances)?;
    io::write_embeddings(out, &store)?;
    Ok(store)
}

/// The full enroll-style x test-style grid, or one condition of it.
pub fn trials(store: &EmbeddingStore, condition: Option<(usize, usize)>) -> Result<Vec<Trial>> {
    match condition {
        Some((e, t)) => scoring::build_trials(store, e, t),
        None => Ok(scoring::build_trial_grid(store)?
            .into_iter()
            .flat_map(|(_, t)| t)
            .collect()),
    }
}

pub fn cmd_trials(embeddings: &Path, condition: Option<(usize, usize)>, out: &Path) -> Result<Vec<Trial>> {
    let t = trials(&io::read_embeddings(embeddings)?, condition)?;
    io::write_trials(out, &t)?;
    Ok(t)
}

pub fn score(store: &EmbeddingStore, trials: &[Trial], backend: BackendKind) -> Result<Vec<ScoreLine>> {
    let backend = backend.prepare(store)?;
    let (records, _) = scoring::score_trials(trials, store, &backend)?;
    Ok(records.iter().map(ScoreLine::from).collect())
}

pub fn cmd_score(embeddings: &Path, trials_path: &Path, backend: BackendKind, out: &Path) -> Result<Vec<ScoreLine>> {
    let store = io::read_embeddings(embeddings)?;
    let lines = score(&store, &io::read_trials(trials_path)?, backend)?;
    io::write_scores(out, &lines)?;
    Ok(lines)
}

/// A score with its ground truth and style condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledTrial {
    pub score: f64,
    pub is_target: bool,
    pub condition: (usize, usize),
}

fn condition_of(enroll: &str, test: &str) -> Result<((usize, usize), (usize, usize))> {
    let e = parse_key(enroll).ok_or_else(|| Error::Format(format!("malformed enrollment key `{enroll}`")))?;
    let t = parse_key(test).ok_or_else(|| Error::Format(format!("malformed test key `{test}`")))?;
    Ok((e, t))
}

/// Attaches labels to scores. With a trial list, labels come from it and every
/// scored pair must appear in it; without one, a trial is a target trial iff
/// the speaker ids encoded in the two keys agree.
pub fn label_scores(scores: &[ScoreLine], trials: Option<&[Trial]>) -> Result<Vec<LabeledTrial>> {
    let lookup: Option<HashMap<(&str, &str), bool>> = trials.map(|ts| {
        ts.iter()
            .map(|t| ((t.enroll_id.as_str(), t.test_utt_id.as_str()), t.is_target))
            .collect()
    });
    scores
        .iter()
        .map(|s| {
            let ((es, est), (ts, tst)) = condition_of(&s.enroll_id, &s.test_utt_id)?;
            let is_target = match &lookup {
                Some(map) => *map
                    .get(&(s.enroll_id.as_str(), s.test_utt_id.as_str()))
                    .ok_or_else(|| {
                        Error::Contract(format!(
                            "scored pair `{} {}` is not in the trial list",
                            s.enroll_id, s.test_utt_id
                        ))
                    })?,
                None => es == ts,
            };
            Ok(LabeledTrial {
                score: s.score,
                is_target,
                condition: (est, tst),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub enroll_style: usize,
    pub test_style: usize,
    pub metrics: MetricsReport,
}

/// Output of `eval`: pooled metrics plus one entry per style condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub system: String,
    pub dcf: DcfParams,
    pub overall: MetricsReport,
    pub conditions: Vec<ConditionMetrics>,
}

fn by_condition(trials: &[LabeledTrial]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, t) in trials.iter().enumerate() {
        groups.entry(t.condition).or_default().push(i);
    }
    groups
}

fn labeled(trials: &[LabeledTrial], idx: impl IntoIterator<Item = usize>) -> Vec<LabeledScore> {
    idx.into_iter()
        .map(|i| LabeledScore {
            score: trials[i].score,
            is_target: trials[i].is_target,
        })
        .collect()
}

pub fn eval(system: &str, trials: &[LabeledTrial], dcf: &DcfParams) -> Result<MetricsRecord> {
    dcf.validate()?;
    ensure!(!trials.is_empty(), "no scores to evaluate");
    let overall = metrics::evaluate(&labeled(trials, 0..trials.len()), dcf)?;
    let conditions = by_condition(trials)
        .into_iter()
        .map(|((e, t), idx)| {
            Ok(ConditionMetrics {
                enroll_style: e,
                test_style: t,
                metrics: metrics::evaluate(&labeled(trials, idx), dcf)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsRecord {
        system: system.to_owned(),
        dcf: *dcf,
        overall,
        conditions,
    })
}

pub fn cmd_eval(
    system: &str,
    scores: &Path,
    trials: Option<&Path>,
    dcf: &DcfParams,
    out: Option<&Path>,
) -> Result<MetricsRecord> {
    let trial_list = trials.map(io::read_trials).transpose()?;
    let labeled = label_scores(&io::read_scores(scores)?, trial_list.as_deref())?;
    let record = eval(system, &labeled, dcf)?;
    if let Some(out) = out {
        io::write_json(out, &record)?;
    }
    Ok(record)
}

/// Marker for a McNemar outcome.
pub fn significance_marker(result: &McNemarResult) -> &'static str {
    if result.significant() {
        "sig"
    } else {
        "n.s."
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionComparison {
    pub enroll_style: usize,
    pub test_style: usize,
    pub mcnemar: McNemarResult,
    pub marker: String,
}

/// Output of `compare`. Each system's decisions are taken at its own EER
/// threshold, pooled for `overall` and per condition for `conditions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub system_a: String,
    pub system_b: String,
    pub overall: McNemarResult,
    pub marker: String,
    pub conditions: Vec<ConditionComparison>,
}

fn aligned<'a>(a: &'a [ScoreLine], b: &[ScoreLine]) -> Result<Vec<usize>> {
    ensure!(
        a.len() == b.len(),
        "score files have different trial counts ({} vs {})",
        a.len(),
        b.len()
    );
    let pos: HashMap<(&str, &str), usize> = b
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.enroll_id.as_str(), s.test_utt_id.as_str()), i))
        .collect();
    ensure!(pos.len() == b.len(), "duplicate trial in score file");
    a.iter()
        .map(|s| {
            pos.get(&(s.enroll_id.as_str(), s.test_utt_id.as_str()))
                .copied()
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "trial `{} {}` is missing from the second score file",
                        s.enroll_id, s.test_utt_id
                    ))
                })
        })
        .collect()
}

fn decisions(trials: &[LabeledTrial], idx: &[usize]) -> Result<Vec<bool>> {
    let l = labeled(trials, idx.iter().copied());
    let mut set = metrics::ScoreSet::default();
    for t in &l {
        if t.is_target {
            set.target_scores.push(t.score);
        } else {
            set.nontarget_scores.push(t.score);
        }
    }
    metrics::decisions_at(&l, metrics::eer_point(&set)?.threshold)
}

pub fn compare(
    name_a: &str,
    a: &[ScoreLine],
    name_b: &str,
    b: &[ScoreLine],
    trials: &[Trial],
) -> Result<CompareRecord> {
    let order = aligned(a, b)?;
    let b: Vec<ScoreLine> = order.iter().map(|&i| b[i].clone()).collect();
    let la = label_scores(a, Some(trials))?;
    let lb = label_scores(&b, Some(trials))?;
    let all: Vec<usize> = (0..la.len()).collect();
    let overall = metrics::mcnemar(&decisions(&la, &all)?, &decisions(&lb, &all)?)?;
    let conditions = by_condition(&la)
        .into_iter()
        .map(|((e, t), idx)| {
            let m = metrics::mcnemar(&decisions(&la, &idx)?, &decisions(&lb, &idx)?)?;
            Ok(ConditionComparison {
                enroll_style: e,
                test_style: t,
                marker: significance_marker(&m).into(),
                mcnemar: m,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CompareRecord {
        system_a: name_a.to_owned(),
        system_b: name_b.to_owned(),
        marker: significance_marker(&overall).into(),
        overall,
        conditions,
    })
}

pub fn cmd_compare(
    (name_a, scores_a): (&str, &Path),
    (name_b, scores_b): (&str, &Path),
    trials: &Path,
    out: Option<&Path>,
) -> Result<CompareRecord> {
    let record = compare(
        name_a,
        &io::read_scores(scores_a)?,
        name_b,
        &io::read_scores(scores_b)?,
        &io::read_trials(trials)?,
    )?;
    if let Some(out) = out {
        io::write_json(out, &record)?;
    }
    Ok(record)
}

/// One system's numbers in one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub system: String,
    pub eer_percent: f64,
    pub min_dcf: f64,
    pub cllr: f64,
    /// `"base"` for the baseline, `"sig"` / `"n.s."` otherwise, `"-"` if no comparison was given.
    pub significance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub enroll_style: usize,
    pub test_style: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub baseline: String,
    pub systems: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Builds the per-condition table. `baseline` defaults to the first system;
/// significance markers come from comparisons between it and each system.
pub fn report(
    records: &[MetricsRecord],
    comparisons: &[CompareRecord],
    baseline: Option<&str>,
) -> Result<ReportTable> {
    ensure!(!records.is_empty(), "report needs at least one metrics record");
    let systems: Vec<String> = records.iter().map(|r| r.system.clone()).collect();
    let mut distinct = systems.clone();
    distinct.sort();
    distinct.dedup();
    ensure!(distinct.len() == systems.len(), "system names must be distinct");
    let baseline = baseline.unwrap_or(&systems[0]).to_owned();
    ensure!(systems.contains(&baseline), "baseline `{baseline}` has no metrics record");

    let base = &records[systems.iter().position(|s| *s == baseline).expect("checked")];
    let conditions: Vec<(usize, usize)> = base.conditions.iter().map(|c| (c.enroll_style, c.test_style)).collect();
    for r in records {
        let theirs: Vec<(usize, usize)> = r.conditions.iter().map(|c| (c.enroll_style, c.test_style)).collect();
        ensure!(
            theirs == conditions,
            "system `{}` was evaluated on different conditions than `{baseline}`",
            r.system
        );
    }

    let marker = |system: &str, cond: (usize, usize)| -> String {
        if system == baseline {
            return "base".into();
        }
        comparisons
            .iter()
            .find(|c| {
                (c.system_a == baseline && c.system_b == system) || (c.system_b == baseline && c.system_a == system)
            })
            .and_then(|c| c.conditions.iter().find(|x| (x.enroll_style, x.test_style) == cond))
            .map_or_else(|| "-".into(), |x| x.marker.clone())
    };

    let rows = conditions
        .iter()
        .enumerate()
        .map(|(i, &(e, t))| {
            let m = &base.conditions[i].metrics;
            ReportRow {
                enroll_style: e,
                test_style: t,
                n_target: m.n_target,
                n_nontarget: m.n_nontarget,
                cells: records
                    .iter()
                    .map(|r| {
                        let m = &r.conditions[i].metrics;
                        ReportCell {
                            system: r.system.clone(),
                            eer_percent: 100.0 * m.eer,
                            min_dcf: m.min_dcf,
                            cllr: m.cllr,
                            significance: marker(&r.system, (e, t)),
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(ReportTable { baseline, systems, rows })
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let mut header = vec!["enroll".to_string(), "test".into(), "n_tar".into(), "n_non".into()];
        for s in &self.systems {
            for col in ["EER%", "minDCF", "Cllr", "sig"] {
                header.push(format!("{s}:{col}"));
            }
        }
        let mut table = vec![header];
        for r in &self.rows {
            let mut line = vec![
                r.enroll_style.to_string(),
                r.test_style.to_string(),
                r.n_target.to_string(),
                r.n_nontarget.to_string(),
            ];
            for c in &r.cells {
                line.push(format!("{:.2}", c.eer_percent));
                line.push(format!("{:.4}", c.min_dcf));
                line.push(format!("{:.4}", c.cllr));
                line.push(c.significance.clone());
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|j| table.iter().map(|row| row[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("baseline: {}\n", self.baseline);
        for row in &table {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Long format, one line per (condition, system).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("system,enroll_style,test_style,eer_percent,min_dcf,cllr,n_target,n_nontarget,significance\n");
        for r in &self.rows {
            for c in &r.cells {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    c.system, r.enroll_style, r.test_style, c.eer_percent, c.min_dcf, c.cllr, r.n_target,
                    r.n_nontarget, c.significance
                )
                .expect("string write");
            }
        }
        out
    }
}

pub fn cmd_report(
    metrics_paths: &[PathBuf],
    compare_paths: &[PathBuf],
    baseline: Option<&str>,
    out_text: Option<&Path>,
    out_csv: Option<&Path>,
) -> Result<ReportTable> {
    let records = metrics_paths.iter().map(|p| io::read_json(p)).collect::<Result<Vec<MetricsRecord>>>()?;
    let comparisons = compare_paths.iter().map(|p| io::read_json(p)).collect::<Result<Vec<CompareRecord>>>()?;
    let table = report(&records, &comparisons, baseline)?;
    if let Some(p) = out_text {
        io::write_bytes(p, table.to_text().as_bytes())?;
    }
    if let Some(p) = out_csv {
        io::write_bytes(p, table.to_csv().as_bytes())?;
    }
    Ok(table)
}

/// Paths written by [`run`], relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub trials: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub histories: Vec<PathBuf>,
    pub embeddings: Vec<PathBuf>,
    pub scores: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub comparisons: Vec<PathBuf>,
    pub report_text: PathBuf,
    pub report_csv: PathBuf,
}

impl RunArtifacts {
    pub fn all(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.config, &self.corpus, &self.trials];
        for group in [
            &self.checkpoints,
            &self.histories,
            &self.embeddings,
            &self.scores,
            &self.metrics,
            &self.comparisons,
        ] {
            v.extend(group.iter().map(PathBuf::as_path));
        }
        v.push(&self.report_text);
        v.push(&self.report_csv);
        v
    }
}

/// The whole pipeline through the on-disk formats: synth, then train, embed,
/// score and eval for every system, compare each system with the baseline,
/// and report. The trial list is built from the first system's embeddings;
/// it depends only on the corpus split, so it is the same for every system.
pub fn run(config: &ExperimentConfig) -> Result<(RunArtifacts, ReportTable)> {
    config.validate()?;
    let dir = &config.output_dir;
    let p = |name: &str| dir.join(name);
    let config_path = p("config.toml");
    // The saved copy lives in the output directory, so it points there.
    let saved = ExperimentConfig {
        output_dir: PathBuf::from("."),
        ..config.clone()
    };
    io::write_bytes(&config_path, saved.to_toml().as_bytes())?;
    let corpus_path = p("corpus.arc");
    cmd_synth(config, &corpus_path)?;
    let trials_path = p("trials.txt");

    let mut art = RunArtifacts {
        config: config_path,
        corpus: corpus_path.clone(),
        trials: trials_path.clone(),
        checkpoints: vec![],
        histories: vec![],
        embeddings: vec![],
        scores: vec![],
        metrics: vec![],
        comparisons: vec![],
        report_text: p("report.txt"),
        report_csv: p("report.csv"),
    };
    for (i, &loss) in config.systems.iter().enumerate() {
        let name = loss.name();
        let ckpt = p(&format!("{name}.ckpt"));
        let hist = history_path(&ckpt);
        let emb = p(&format!("{name}.emb"));
        let scores = p(&format!("{name}.scores"));
        let metrics = p(&format!("{name}.metrics.json"));
        cmd_train(config, &corpus_path, loss, &ckpt, &hist)?;
        cmd_embed(&ckpt, &corpus_path, &emb)?;
        if i == 0 {
            cmd_trials(&emb, None, &trials_path)?;
        }
        cmd_score(&emb, &trials_path, config.backend, &scores)?;
        cmd_eval(name, &scores, Some(&trials_path), &config.dcf, Some(&metrics))?;
        art.checkpoints.push(ckpt);
        art.histories.push(hist);
        art.embeddings.push(emb);
        art.scores.push(scores);
        art.metrics.push(metrics);
    }
    let base = config.systems[0].name();
    for (i, &loss) in config.systems.iter().enumerate().skip(1) {
        let out = p(&format!("compare.{base}.{}.json", loss.name()));
        cmd_compare((base, &art.scores[0]), (loss.name(), &art.scores[i]), &trials_path, Some(&out))?;
        art.comparisons.push(out);
    }
    let table = cmd_report(
        &art.metrics,
        &art.comparisons,
        Some(base),
        Some(&art.report_text),
        Some(&art.report_csv),
    )?;
    Ok((art, table))
}
