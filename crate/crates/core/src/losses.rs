//! Training losses over last-layer speaker scores.
//!
//! Three objectives share one input domain, a minibatch of logits (`m` samples
//! by `N` training speakers) and the true speaker index of every row:
//!
//! * [`ce_loss`]: softmax cross-entropy, natural log.
//! * [`cllr_loss`]: the log-likelihood-ratio cost in bits, reading every logit
//!   as a detection score. The entry at a row's true speaker is a target
//!   score, every other entry in that row is a non-target score.
//! * [`cllr_ce_loss`]: the equal-weight mean of the two.
//!
//! Every function returns the value together with its gradient with respect
//! to the logits so that the caller can backpropagate into the network.

use std::f64::consts::LN_2;

use ndarray::{Array2, ArrayView2};

use crate::error::{ensure, Result};

/// Last-layer scores for a minibatch, `m` rows by `N` speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    values: Array2<f64>,
}

impl LogitBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (m, n) = values.dim();
        ensure!(m >= 1, "logit batch needs at least one row");
        ensure!(n >= 2, "logit batch needs at least two speaker columns, got {n}");
        ensure!(
            values.iter().all(|v| v.is_finite()),
            "logit batch contains non-finite entries"
        );
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "logit batch needs at least one row");
        let n = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == n),
            "ragged logit rows"
        );
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), n), flat)
            .map_err(|e| crate::Error::Contract(e.to_string()))?;
        Self::new(values)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn speakers(&self) -> usize {
        self.values.ncols()
    }
}

/// True speaker index of every row of a [`LogitBatch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl From<Vec<usize>> for LabelBatch {
    fn from(labels: Vec<usize>) -> Self {
        Self::new(labels)
    }
}

/// A loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Target and non-target scores taken from one minibatch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScorePartition {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

/// Which of the three training objectives to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Cllr,
    CllrCe,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Ce, LossKind::Cllr, LossKind::CllrCe];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Cllr => "cllr",
            LossKind::CllrCe => "cllr_ce",
        }
    }

    pub fn evaluate(self, logits: &LogitBatch, labels: &LabelBatch) -> Result<LossOutput> {
        match self {
            LossKind::Ce => ce_loss(logits, labels),
            LossKind::Cllr => cllr_loss(logits, labels),
            LossKind::CllrCe => cllr_ce_loss(logits, labels),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "cllr" => Ok(LossKind::Cllr),
            "cllr_ce" | "cllrce" => Ok(LossKind::CllrCe),
            other => Err(crate::Error::Config(format!(
                "unknown loss `{other}` (expected ce, cllr or cllr_ce)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `ln(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_pair(logits: &LogitBatch, labels: &LabelBatch) -> Result<()> {
    ensure!(
        logits.rows() == labels.len(),
        "logit batch has {} rows but {} labels were given",
        logits.rows(),
        labels.len()
    );
    let n = logits.speakers();
    if let Some((i, &y)) = labels.as_slice().iter().enumerate().find(|(_, &y)| y >= n) {
        return Err(crate::Error::Contract(format!(
            "label {y} at row {i} is out of range for {n} speakers"
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy (natural log) and its logit gradient.
pub fn ce_loss(logits: &LogitBatch, labels: &LabelBatch) -> Result<LossOutput> {
    check_pair(logits, labels)?;
    let m = logits.rows() as f64;
    let mut grad = Array2::zeros(logits.values.dim());
    let mut total = 0.0;
    for (i, (row, &y)) in logits.values.outer_iter().zip(labels.as_slice()).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        let mut g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - lse).exp() / m;
        }
        g[y] -= 1.0 / m;
    }
    Ok(LossOutput {
        value: (total / m).max(0.0),
        grad,
    })
}

/// Splits minibatch logits into target scores (one per row, at the true
/// speaker) and non-target scores (the other `N - 1` entries of each row).
/// Both lists follow row-major order.
pub fn partition_scores(logits: &LogitBatch, labels: &LabelBatch) -> Result<ScorePartition> {
    check_pair(logits, labels)?;
    let n = logits.speakers();
    let mut part = ScorePartition {
        target_scores: Vec::with_capacity(logits.rows()),
        nontarget_scores: Vec::with_capacity(logits.rows() * (n - 1)),
    };
    for (row, &y) in logits.values.outer_iter().zip(labels.as_slice()) {
        for (j, &v) in row.iter().enumerate() {
            if j == y {
                part.target_scores.push(v);
            } else {
                part.nontarget_scores.push(v);
            }
        }
    }
    Ok(part)
}

/// Closed-form log-likelihood-ratio cost, in bits.
pub fn cllr_from_scores(part: &ScorePartition) -> Result<f64> {
    ensure!(
        !part.target_scores.is_empty(),
        "cllr needs at least one target score"
    );
    ensure!(
        !part.nontarget_scores.is_empty(),
        "cllr needs at least one non-target score"
    );
    let tar: f64 = part.target_scores.iter().map(|&s| softplus(-s)).sum::<f64>()
        / part.target_scores.len() as f64;
    let non: f64 = part.nontarget_scores.iter().map(|&s| softplus(s)).sum::<f64>()
        / part.nontarget_scores.len() as f64;
    Ok(0.5 * (tar + non) / LN_2)
}

/// Minibatch Cllr over the logits and its gradient.
pub fn cllr_loss(logits: &LogitBatch, labels: &LabelBatch) -> Result<LossOutput> {
    let part = partition_scores(logits, labels)?;
    let value = cllr_from_scores(&part)?;
    let n_tar = part.target_scores.len() as f64;
    let n_non = part.nontarget_scores.len() as f64;
    let tar_scale = 0.5 / (n_tar * LN_2);
    let non_scale = 0.5 / (n_non * LN_2);
    let mut grad = Array2::zeros(logits.values.dim());
    for ((mut g, row), &y) in grad
        .outer_iter_mut()
        .zip(logits.values.outer_iter())
        .zip(labels.as_slice())
    {
        for (j, (gj, &s)) in g.iter_mut().zip(row.iter()).enumerate() {
            *gj = if j == y {
                -sigmoid(-s) * tar_scale
            } else {
                sigmoid(s) * non_scale
            };
        }
    }
    Ok(LossOutput { value, grad })
}

/// Equal-weight combination of [`cllr_loss`] and [`ce_loss`].
pub fn cllr_ce_loss(logits: &LogitBatch, labels: &LabelBatch) -> Result<LossOutput> {
    let (cllr, ce) = cllr_and_ce(logits, labels)?;
    Ok(combine(&cllr, &ce))
}

/// Both component losses, computed once. Used by the trainer to log the
/// parts of the combined objective.
pub fn cllr_and_ce(logits: &LogitBatch, labels: &LabelBatch) -> Result<(LossOutput, LossOutput)> {
    Ok((cllr_loss(logits, labels)?, ce_loss(logits, labels)?))
}

pub(crate) fn combine(cllr: &LossOutput, ce: &LossOutput) -> LossOutput {
    LossOutput {
        value: 0.5 * (cllr.value + ce.value),
        grad: (&cllr.grad + &ce.grad) * 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(values: Array2<f64>) -> LogitBatch {
        LogitBatch::new(values).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize, scale: f64) -> (LogitBatch, LabelBatch) {
        let values = Array2::from_shape_fn((m, n), |_| rng.random_range(-scale..scale));
        let labels = (0..m).map(|_| rng.random_range(0..n)).collect::<Vec<_>>();
        (batch(values), labels.into())
    }

    // Independent oracle: textbook softmax, no max-shift, per-row log.
    fn naive_ce(values: &Array2<f64>, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &y) in values.outer_iter().zip(labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[y].exp() / z).ln();
        }
        total / values.nrows() as f64
    }

    fn naive_cllr(values: &Array2<f64>, labels: &[usize]) -> f64 {
        let (mut tar, mut nt, mut non, mut nn) = (0.0, 0.0, 0.0, 0.0);
        for (row, &y) in values.outer_iter().zip(labels) {
            for (j, &s) in row.iter().enumerate() {
                if j == y {
                    tar += (1.0 + (-s).exp()).log2();
                    nt += 1.0;
                } else {
                    non += (1.0 + s.exp()).log2();
                    nn += 1.0;
                }
            }
        }
        0.5 * (tar / nt + non / nn)
    }

    fn finite_diff(
        values: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> f64,
        step: f64,
    ) -> Array2<f64> {
        let mut out = Array2::zeros(values.dim());
        for idx in 0..values.len() {
            let (i, j) = (idx / values.ncols(), idx % values.ncols());
            let mut plus = values.clone();
            plus[[i, j]] += step;
            let mut minus = values.clone();
            minus[[i, j]] -= step;
            out[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out
    }

    fn assert_rel_close(a: &Array2<f64>, b: &Array2<f64>, rel: f64, abs: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let err = (x - y).abs();
            assert!(
                err <= abs || err <= rel * x.abs().max(y.abs()),
                "{x} vs {y} (err {err})"
            );
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_n() {
        let out = ce_loss(&batch(array![[0.0, 0.0]]), &vec![0].into()).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
        for y in 0..4 {
            let out = ce_loss(&batch(array![[0.0, 0.0, 0.0, 0.0]]), &vec![y].into()).unwrap();
            assert!((out.value - 4f64.ln()).abs() < 1e-15);
            assert!((out.value - 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_small_case_matches_oracle() {
        let values = array![[2.0, 0.0, -1.0], [0.0, 3.0, 0.0]];
        let labels = vec![0, 1];
        let out = ce_loss(&batch(values.clone()), &labels.clone().into()).unwrap();
        let want = naive_ce(&values, &labels);
        assert!(((out.value - want) / want).abs() < 1e-6);
        let fd = finite_diff(&values, |v| naive_ce(v, &labels), 1e-5);
        assert_rel_close(&out.grad, &fd, 1e-6, 1e-10);
    }

    #[test]
    fn partition_examples() {
        let p = partition_scores(&batch(array![[5.0, -5.0]]), &vec![0].into()).unwrap();
        assert_eq!(p.target_scores, vec![5.0]);
        assert_eq!(p.nontarget_scores, vec![-5.0]);

        let p = partition_scores(
            &batch(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
            &vec![0, 2].into(),
        )
        .unwrap();
        assert_eq!(p.target_scores, vec![1.0, 6.0]);
        assert_eq!(p.nontarget_scores, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn partition_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (logits, labels) = random_instance(&mut rng, 3, 4, 5.0);
        let p = partition_scores(&logits, &labels).unwrap();
        assert_eq!(p.target_scores.len(), 3);
        assert_eq!(p.nontarget_scores.len(), 9);
        let mut union: Vec<f64> = p.target_scores.iter().chain(&p.nontarget_scores).copied().collect();
        let mut all: Vec<f64> = logits.view().iter().copied().collect();
        union.sort_by(f64::total_cmp);
        all.sort_by(f64::total_cmp);
        assert_eq!(union, all);
    }

    #[test]
    fn cllr_from_scores_fixed_points() {
        let zeros = ScorePartition {
            target_scores: vec![0.0; 5],
            nontarget_scores: vec![0.0; 7],
        };
        assert_eq!(cllr_from_scores(&zeros).unwrap(), 1.0);

        let sep = ScorePartition {
            target_scores: vec![50.0],
            nontarget_scores: vec![-50.0],
        };
        assert!(cllr_from_scores(&sep).unwrap() <= 1e-12);

        let sym = ScorePartition {
            target_scores: vec![2.0],
            nontarget_scores: vec![-2.0],
        };
        let want = (1.0 + (-2f64).exp()).log2();
        assert!((cllr_from_scores(&sym).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.183118).abs() < 1e-6);
    }

    #[test]
    fn cllr_from_scores_rejects_empty_sets() {
        let no_tar = ScorePartition {
            target_scores: vec![],
            nontarget_scores: vec![1.0],
        };
        assert!(matches!(cllr_from_scores(&no_tar), Err(crate::Error::Contract(_))));
        let no_non = ScorePartition {
            target_scores: vec![1.0],
            nontarget_scores: vec![],
        };
        assert!(cllr_from_scores(&no_non).is_err());
    }

    #[test]
    fn cllr_loss_examples() {
        let out = cllr_loss(&batch(array![[0.0, 0.0]]), &vec![0].into()).unwrap();
        assert_eq!(out.value, 1.0);
        let out = cllr_loss(&batch(array![[50.0, -50.0]]), &vec![0].into()).unwrap();
        assert!(out.value <= 1e-12);
    }

    #[test]
    fn cllr_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (logits, labels) = random_instance(&mut rng, 4, 5, 3.0);
        let values = logits.view().to_owned();
        let out = cllr_loss(&logits, &labels).unwrap();
        let fd = finite_diff(&values, |v| naive_cllr(v, labels.as_slice()), 1e-5);
        assert_rel_close(&out.grad, &fd, 1e-6, 1e-11);
    }

    #[test]
    fn cllr_ce_examples() {
        let out = cllr_ce_loss(&batch(array![[0.0, 0.0]]), &vec![0].into()).unwrap();
        assert!((out.value - 0.5 * (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((out.value - 0.846574).abs() < 1e-6);

        let logits = batch(array![[60.0, -60.0], [-60.0, 60.0]]);
        let labels: LabelBatch = vec![0, 1].into();
        let out = cllr_ce_loss(&logits, &labels).unwrap();
        let ce = ce_loss(&logits, &labels).unwrap();
        assert!((out.value - 0.5 * ce.value).abs() < 1e-15);
    }

    #[test]
    fn cllr_ce_is_mean_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (logits, labels) = random_instance(&mut rng, 8, 10, 4.0);
        let out = cllr_ce_loss(&logits, &labels).unwrap();
        let cllr = cllr_loss(&logits, &labels).unwrap();
        let ce = ce_loss(&logits, &labels).unwrap();
        assert!((out.value - 0.5 * (cllr.value + ce.value)).abs() < 1e-12);
        for ((g, a), b) in out.grad.iter().zip(&cllr.grad).zip(&ce.grad) {
            assert!((g - 0.5 * (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_and_label_errors() {
        let logits = batch(array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(
            ce_loss(&logits, &vec![0].into()),
            Err(crate::Error::Contract(_))
        ));
        assert!(cllr_loss(&logits, &vec![0, 2].into()).is_err());
        assert!(LogitBatch::new(array![[1.0]]).is_err());
        assert!(LogitBatch::new(array![[1.0, f64::NAN]]).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let logits = batch(array![[700.0, -700.0, 700.0], [-700.0, 700.0, -700.0]]);
        let labels: LabelBatch = vec![1, 0].into();
        for kind in LossKind::ALL {
            let out = kind.evaluate(&logits, &labels).unwrap();
            assert!(out.value.is_finite() && out.value >= 0.0, "{kind}");
            assert!(out.grad.iter().all(|g| g.is_finite()), "{kind}");
        }
    }

    #[test]
    fn ce_shift_invariant_cllr_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (logits, labels) = random_instance(&mut rng, 6, 7, 5.0);
        let mut shifted = logits.view().to_owned();
        for (i, mut row) in shifted.outer_iter_mut().enumerate() {
            row += 0.75 * (i as f64 + 1.0);
        }
        let shifted = batch(shifted);
        let a = ce_loss(&logits, &labels).unwrap().value;
        let b = ce_loss(&shifted, &labels).unwrap().value;
        assert!((a - b).abs() < 1e-9);
        let a = cllr_loss(&logits, &labels).unwrap().value;
        let b = cllr_loss(&shifted, &labels).unwrap().value;
        assert!((a - b).abs() > 1e-6);
    }
}
