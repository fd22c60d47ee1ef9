//! In-memory experiment helpers: embedding a corpus, evaluating the style
//! grid, and embedding-space geometry summaries.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::metrics::{self, DcfParams, MetricsReport};
use crate::model::{self, ModelParams};
use crate::scoring::{self, BackendKind, EmbeddingEntry, EmbeddingStore, ScoreRecord};
use crate::synthdata::Utterance;

/// Embeds every utterance, keeping corpus order.
pub fn embed_corpus(params: &ModelParams, utterances: &[Utterance]) -> Result<EmbeddingStore> {
    let entries = utterances
        .iter()
        .map(|u| {
            Ok(EmbeddingEntry {
                key: u.key(),
                speaker_id: u.speaker_id,
                style_id: u.style_id,
                split: u.split,
                vector: model::embed(params, u.features.view())?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::new(entries)
}

/// Metrics of one (enroll style, test style) condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub enroll_style: usize,
    pub test_style: usize,
    pub metrics: MetricsReport,
    pub records: Vec<ScoreRecord>,
}

impl ConditionResult {
    pub fn is_mismatched(&self) -> bool {
        self.enroll_style != self.test_style
    }
}

/// Scores and evaluates every style pair of the store.
pub fn evaluate_grid(
    store: &EmbeddingStore,
    backend: BackendKind,
    dcf: &DcfParams,
) -> Result<Vec<ConditionResult>> {
    let backend = backend.prepare(store)?;
    scoring::build_trial_grid(store)?
        .into_iter()
        .map(|((e, t), trials)| {
            let (records, _) = scoring::score_trials(&trials, store, &backend)?;
            let labeled: Vec<_> = records.iter().map(ScoreRecord::labeled).collect();
            Ok(ConditionResult {
                enroll_style: e,
                test_style: t,
                metrics: metrics::evaluate(&labeled, dcf)?,
                records,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over style-mismatched conditions of a per-condition metric.
pub fn mismatched_median(grid: &[ConditionResult], metric: impl Fn(&MetricsReport) -> f64) -> f64 {
    let values: Vec<f64> = grid
        .iter()
        .filter(|c| c.is_mismatched())
        .map(|c| metric(&c.metrics))
        .collect();
    median(&values)
}

/// Mean cosine distances between embeddings of the same speaker and of
/// different speakers, over all unordered pairs of the selected entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub intra: f64,
    pub inter: f64,
}

impl Compactness {
    pub fn ratio(&self) -> f64 {
        self.intra / self.inter
    }
}

pub fn compactness<'a>(entries: impl IntoIterator<Item = &'a EmbeddingEntry>) -> Result<Compactness> {
    let entries: Vec<&EmbeddingEntry> = entries.into_iter().collect();
    let units = entries
        .iter()
        .map(|e| {
            let n = e.vector.dot(&e.vector).sqrt();
            ensure!(n > 0.0, "zero embedding `{}`", e.key);
            Ok(&e.vector / n)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let dist = 1.0 - units[i].dot(&units[j]);
            if entries[i].speaker_id == entries[j].speaker_id {
                intra += dist;
                n_intra += 1;
            } else {
                inter += dist;
                n_inter += 1;
            }
        }
    }
    ensure!(
        n_intra > 0 && n_inter > 0,
        "compactness needs same-speaker and different-speaker pairs"
    );
    Ok(Compactness {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}
