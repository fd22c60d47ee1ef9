//! Detection metrics over verification trial scores.
//!
//! All threshold-based measures share one sweep ([`det_points`]): a trial is
//! accepted when `score >= threshold`, the sweep visits every distinct score
//! plus the two infinite sentinels, so both trivial systems (accept all,
//! reject all) are always among the candidates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{ensure, Result};
use crate::losses::{cllr_from_scores, ScorePartition};

/// Scores of target and non-target trials.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(target_scores: Vec<f64>, nontarget_scores: Vec<f64>) -> Self {
        Self {
            target_scores,
            nontarget_scores,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(!self.target_scores.is_empty(), "score set has no target trials");
        ensure!(
            !self.nontarget_scores.is_empty(),
            "score set has no non-target trials"
        );
        ensure!(
            self.target_scores
                .iter()
                .chain(&self.nontarget_scores)
                .all(|s| s.is_finite()),
            "score set contains non-finite scores"
        );
        Ok(())
    }
}

/// Detection cost parameters. `p_target` is the prior of the operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.p_target > 0.0 && self.p_target < 1.0,
            "p_target must lie in (0, 1), got {}",
            self.p_target
        );
        ensure!(self.c_miss > 0.0, "c_miss must be positive");
        ensure!(self.c_fa > 0.0, "c_fa must be positive");
        Ok(())
    }

    fn normalizer(&self) -> f64 {
        (self.p_target * self.c_miss).min((1.0 - self.p_target) * self.c_fa)
    }
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Miss and false-alarm rates at `-inf`, at every distinct score, and at `+inf`,
/// in increasing threshold order.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    scores.validate()?;
    let mut tar = scores.target_scores.clone();
    let mut non = scores.nontarget_scores.clone();
    tar.sort_by(f64::total_cmp);
    non.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = tar.iter().chain(&non).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let nt = tar.len() as f64;
    let nn = non.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len() + 2);
    points.push(DetPoint {
        threshold: f64::NEG_INFINITY,
        p_miss: 0.0,
        p_fa: 1.0,
    });
    // `below_*` = number of scores strictly below the current threshold.
    let (mut below_tar, mut below_non) = (0usize, 0usize);
    for &t in &thresholds {
        while below_tar < tar.len() && tar[below_tar] < t {
            below_tar += 1;
        }
        while below_non < non.len() && non[below_non] < t {
            below_non += 1;
        }
        points.push(DetPoint {
            threshold: t,
            p_miss: below_tar as f64 / nt,
            p_fa: (non.len() - below_non) as f64 / nn,
        });
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate together with the sweep threshold closest to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// EER with its operating threshold.
///
/// The crossing of `p_miss - p_fa` is bracketed by adjacent sweep points and
/// linearly interpolated between them. An exact crossing is returned as is.
/// The reported threshold is the bracket endpoint with the smaller
/// `|p_miss - p_fa|` (the lower one on ties), clamped to a finite score.
pub fn eer_point(scores: &ScoreSet) -> Result<EerPoint> {
    let points = det_points(scores)?;
    let k = points
        .iter()
        .position(|p| p.p_miss - p.p_fa >= 0.0)
        .expect("the +inf sentinel always has p_miss - p_fa = 1");
    let hi = points[k];
    let (eer, chosen) = if hi.p_miss == hi.p_fa {
        (hi.p_miss, hi)
    } else {
        let lo = points[k - 1];
        let d_miss = hi.p_miss - lo.p_miss;
        let d_fa = hi.p_fa - lo.p_fa;
        let alpha = (lo.p_fa - lo.p_miss) / (d_miss - d_fa);
        let eer = lo.p_miss + alpha * d_miss;
        let chosen = if (lo.p_fa - lo.p_miss) <= (hi.p_miss - hi.p_fa) {
            lo
        } else {
            hi
        };
        (eer, chosen)
    };
    let threshold = if chosen.threshold.is_finite() {
        chosen.threshold
    } else if chosen.threshold < 0.0 {
        points[1].threshold
    } else {
        points[points.len() - 2].threshold
    };
    Ok(EerPoint { eer, threshold })
}

pub fn eer(scores: &ScoreSet) -> Result<f64> {
    Ok(eer_point(scores)?.eer)
}

/// Normalized minimum detection cost over the threshold sweep.
pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let points = det_points(scores)?;
    let norm = params.normalizer();
    let best = points
        .iter()
        .map(|p| {
            params.p_target * params.c_miss * p.p_miss
                + (1.0 - params.p_target) * params.c_fa * p.p_fa
        })
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

/// Cllr of evaluation scores; the same formula the training loss uses.
pub fn cllr_metric(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    cllr_from_scores(&ScorePartition {
        target_scores: scores.target_scores.clone(),
        nontarget_scores: scores.nontarget_scores.clone(),
    })
}

/// A trial score with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub is_target: bool,
}

/// Per-trial correctness at a fixed threshold, in input order.
pub fn decisions_at(trials: &[LabeledScore], threshold: f64) -> Result<Vec<bool>> {
    ensure!(threshold.is_finite(), "decision threshold must be finite");
    ensure!(
        trials.iter().all(|t| t.score.is_finite()),
        "trial scores must be finite"
    );
    Ok(trials
        .iter()
        .map(|t| (t.score >= threshold) == t.is_target)
        .collect())
}

/// How the McNemar p-value is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquareCorrected,
}

/// Below this many discordant pairs the exact binomial test is used.
pub const MCNEMAR_EXACT_LIMIT: u64 = 25;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// System a wrong, system b right.
    pub n01: u64,
    /// System a right, system b wrong.
    pub n10: u64,
    /// Continuity-corrected chi-square statistic (0 when there are no
    /// discordant pairs).
    pub statistic: f64,
    pub p_value: f64,
    pub method: McNemarMethod,
}

impl McNemarResult {
    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// McNemar's test on paired per-trial correctness, choosing the exact
/// binomial test for fewer than [`MCNEMAR_EXACT_LIMIT`] discordant pairs.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<McNemarResult> {
    mcnemar_with(correct_a, correct_b, None)
}

/// McNemar's test with an optional forced method.
pub fn mcnemar_with(
    correct_a: &[bool],
    correct_b: &[bool],
    method: Option<McNemarMethod>,
) -> Result<McNemarResult> {
    ensure!(
        correct_a.len() == correct_b.len(),
        "decision vectors differ in length ({} vs {})",
        correct_a.len(),
        correct_b.len()
    );
    let mut n01 = 0u64;
    let mut n10 = 0u64;
    for (&a, &b) in correct_a.iter().zip(correct_b) {
        match (a, b) {
            (false, true) => n01 += 1,
            (true, false) => n10 += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(n01, n10, method))
}

pub fn mcnemar_from_counts(n01: u64, n10: u64, method: Option<McNemarMethod>) -> McNemarResult {
    let n = n01 + n10;
    let method = method.unwrap_or(if n < MCNEMAR_EXACT_LIMIT {
        McNemarMethod::ExactBinomial
    } else {
        McNemarMethod::ChiSquareCorrected
    });
    if n == 0 {
        return McNemarResult {
            n01,
            n10,
            statistic: 0.0,
            p_value: 1.0,
            method,
        };
    }
    let diff = (n01 as f64 - n10 as f64).abs();
    let statistic = (diff - 1.0).max(0.0).powi(2) / n as f64;
    let p_value = match method {
        McNemarMethod::ExactBinomial => exact_binomial_two_sided(n01.min(n10), n),
        McNemarMethod::ChiSquareCorrected => ChiSquared::new(1.0)
            .expect("one degree of freedom is valid")
            .sf(statistic),
    };
    McNemarResult {
        n01,
        n10,
        statistic,
        p_value: p_value.clamp(0.0, 1.0),
        method,
    }
}

/// `min(1, 2 * P(Bin(n, 1/2) <= k))`.
fn exact_binomial_two_sided(k: u64, n: u64) -> f64 {
    // term_j = C(n, j) / 2^n, built up in log space so large n cannot underflow
    // the first term.
    let mut log_term = n as f64 * 0.5f64.ln();
    let mut tail = log_term.exp();
    for j in 0..k {
        log_term += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
        tail += log_term.exp();
    }
    (2.0 * tail).min(1.0)
}

/// Per-condition metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub cllr: f64,
    pub eer_threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Correctness of every trial at `eer_threshold`, in trial order.
    #[serde(skip)]
    pub decisions: Vec<bool>,
}

/// All metrics for one set of labelled trials.
pub fn evaluate(trials: &[LabeledScore], params: &DcfParams) -> Result<MetricsReport> {
    let mut set = ScoreSet::default();
    for t in trials {
        if t.is_target {
            set.target_scores.push(t.score);
        } else {
            set.nontarget_scores.push(t.score);
        }
    }
    let eer = eer_point(&set)?;
    Ok(MetricsReport {
        eer: eer.eer,
        min_dcf: min_dcf(&set, params)?,
        cllr: cllr_metric(&set)?,
        eer_threshold: eer.threshold,
        n_target: set.target_scores.len(),
        n_nontarget: set.nontarget_scores.len(),
        decisions: decisions_at(trials, eer.threshold)?,
    })
}
