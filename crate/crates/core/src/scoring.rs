//! Enrollment, trial construction and scoring backends.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{LabeledScore, ScoreSet};
use crate::synthdata::{enrollment_key, parse_key, Split};

/// Regularizer added to the within-speaker covariance.
pub const WITHIN_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_utt_id: String,
    pub is_target: bool,
}

/// An utterance embedding with the labels needed for enrollment and trials.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingEntry {
    pub key: String,
    pub speaker_id: usize,
    pub style_id: usize,
    pub split: Split,
    pub vector: Array1<f64>,
}

/// Embeddings addressable by utterance key, kept in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    entries: Vec<EmbeddingEntry>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(entries: Vec<EmbeddingEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            ensure!(
                index.insert(e.key.clone(), i).is_none(),
                "duplicate embedding key `{}`",
                e.key
            );
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[EmbeddingEntry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    pub fn styles(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.entries.iter().map(|e| e.style_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Enrollment utterances of one speaker-style cell, in store order.
    pub fn enrollment_members(&self, speaker: usize, style: usize) -> Vec<&EmbeddingEntry> {
        self.entries
            .iter()
            .filter(|e| e.speaker_id == speaker && e.style_id == style && e.split.is_enroll())
            .collect()
    }
}

/// All enrollment-by-test pairs for one (enroll style, test style) condition.
///
/// One enrollment model per speaker with enrollment utterances in
/// `enroll_style`; every test utterance in `test_style`. A pair whose test
/// utterance is itself part of the enrollment (shared cells) is skipped.
pub fn build_trials(store: &EmbeddingStore, enroll_style: usize, test_style: usize) -> Result<Vec<Trial>> {
    let styles = store.styles();
    ensure!(
        styles.contains(&enroll_style) && styles.contains(&test_style),
        "styles {enroll_style} and {test_style} must both exist (available: {styles:?})"
    );
    let mut enrollments: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for e in store.entries().iter().filter(|e| e.style_id == enroll_style && e.split.is_enroll()) {
        enrollments.entry(e.speaker_id).or_default().push(&e.key);
    }
    let tests: Vec<&EmbeddingEntry> = store
        .entries()
        .iter()
        .filter(|e| e.style_id == test_style && e.split.is_test())
        .collect();

    let mut trials = Vec::with_capacity(enrollments.len() * tests.len());
    for (&speaker, members) in &enrollments {
        let enroll_id = enrollment_key(speaker, enroll_style);
        for t in &tests {
            if members.contains(&t.key.as_str()) {
                continue;
            }
            trials.push(Trial {
                enroll_id: enroll_id.clone(),
                test_utt_id: t.key.clone(),
                is_target: t.speaker_id == speaker,
            });
        }
    }
    ensure!(
        !trials.is_empty(),
        "no trials for enroll style {enroll_style} / test style {test_style}"
    );
    Ok(trials)
}

/// Trials for every (enroll style, test style) pair, row-major over styles.
pub fn build_trial_grid(store: &EmbeddingStore) -> Result<Vec<((usize, usize), Vec<Trial>)>> {
    let styles = store.styles();
    let mut grid = Vec::new();
    for &e in &styles {
        for &t in &styles {
            grid.push(((e, t), build_trials(store, e, t)?));
        }
    }
    Ok(grid)
}

fn unit(v: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    ensure!(
        norm > 0.0 && norm.is_finite(),
        "cannot normalize a vector with norm {norm}"
    );
    Ok(v.mapv(|x| x / norm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentModel {
    pub speaker_id: usize,
    pub style_id: usize,
    /// Unit length.
    pub vector: Array1<f64>,
}

/// Length-normalizes each embedding, averages, and re-normalizes.
pub fn enroll(embeddings: &[ArrayView1<'_, f64>]) -> Result<Array1<f64>> {
    ensure!(!embeddings.is_empty(), "enrollment needs at least one embedding");
    let dim = embeddings[0].len();
    ensure!(
        embeddings.iter().all(|e| e.len() == dim),
        "enrollment embeddings differ in dimension"
    );
    let mut sum = Array1::zeros(dim);
    for e in embeddings {
        sum += &unit(*e)?;
    }
    unit(sum.view())
}

pub fn enroll_cell(store: &EmbeddingStore, speaker: usize, style: usize) -> Result<EnrollmentModel> {
    let members = store.enrollment_members(speaker, style);
    let views: Vec<_> = members.iter().map(|e| e.vector.view()).collect();
    Ok(EnrollmentModel {
        speaker_id: speaker,
        style_id: style,
        vector: enroll(&views)?,
    })
}

/// Cosine similarity.
pub fn cosine_score(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    ensure!(a.len() == b.len(), "vectors differ in dimension");
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    ensure!(na > 0.0 && nb > 0.0, "cosine score of a zero vector");
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Two-covariance model: `x = mu + y + e`, `y ~ N(0, B)`, `e ~ N(0, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoCovModel {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
    /// The inverse of the same-speaker joint covariance `[[B+W, B], [B, B+W]]`
    /// has the form `[[P, Q], [Q, P]]`.
    same_diag: DMatrix<f64>,
    same_cross: DMatrix<f64>,
    /// Inverse of the marginal covariance `B + W`.
    total_inv: DMatrix<f64>,
    /// `logdet(B+W) - logdet(same) / 2`.
    log_norm: f64,
}

fn to_dvector(v: ArrayView1<'_, f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

impl TwoCovModel {
    /// Builds the scoring model from explicit parameters.
    pub fn from_parts(mean: DVector<f64>, between: DMatrix<f64>, within: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        ensure!(
            between.shape() == (d, d) && within.shape() == (d, d),
            "covariances must be {d}x{d}"
        );
        let total = &between + &within;
        let mut same = DMatrix::zeros(2 * d, 2 * d);
        same.view_mut((0, 0), (d, d)).copy_from(&total);
        same.view_mut((d, d), (d, d)).copy_from(&total);
        same.view_mut((0, d), (d, d)).copy_from(&between);
        same.view_mut((d, 0), (d, d)).copy_from(&between);
        let total_chol = total
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Contract("B + W is not positive definite".into()))?;
        let same_chol = same
            .cholesky()
            .ok_or_else(|| Error::Contract("same-speaker covariance is singular".into()))?;
        let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = logdet(&total_chol.l()) - 0.5 * logdet(&same_chol.l());
        let inv = same_chol.inverse();
        let block = |r: usize, c: usize| inv.view((r, c), (d, d)).into_owned();
        // Averaging the blocks makes the score exactly symmetric in floating point.
        let p = 0.5 * (block(0, 0) + block(d, d));
        let q = 0.5 * (block(0, d) + block(d, 0));
        Ok(Self {
            mean,
            between,
            within,
            same_diag: 0.5 * (&p + p.transpose()),
            same_cross: 0.5 * (&q + q.transpose()),
            total_inv: total_chol.inverse(),
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log p(a, b | same) - log p(a, b | different)`.
    pub fn score(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
        let d = self.dim();
        ensure!(
            a.len() == d && b.len() == d,
            "two-covariance model is {d}-dimensional"
        );
        let x1 = to_dvector(a) - &self.mean;
        let x2 = to_dvector(b) - &self.mean;
        let own = |x: &DVector<f64>| x.dot(&(&self.total_inv * x)) - x.dot(&(&self.same_diag * x));
        let cross = x1.dot(&(&self.same_cross * &x2)) + x2.dot(&(&self.same_cross * &x1));
        Ok(0.5 * (own(&x1) + own(&x2)) - 0.5 * cross + self.log_norm)
    }
}

/// Fits mean, between- and within-speaker covariances.
///
/// `W` pools the within-speaker scatter with `N - S` degrees of freedom and
/// gets `WITHIN_RIDGE * I` added; `B` is the scatter of speaker means around
/// the global mean divided by `S`.
pub fn fit_two_cov(embeddings: &[ArrayView1<'_, f64>], speakers: &[usize]) -> Result<TwoCovModel> {
    ensure!(
        embeddings.len() == speakers.len(),
        "{} embeddings but {} labels",
        embeddings.len(),
        speakers.len()
    );
    ensure!(!embeddings.is_empty(), "no embeddings to fit");
    let d = embeddings[0].len();
    ensure!(embeddings.iter().all(|e| e.len() == d), "embeddings differ in dimension");
    let mut groups: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
    for (e, &s) in embeddings.iter().zip(speakers) {
        groups.entry(s).or_default().push(to_dvector(*e));
    }
    ensure!(groups.len() >= 2, "two-covariance fit needs at least 2 speakers");
    ensure!(
        groups.values().any(|g| g.len() >= 2),
        "two-covariance fit needs a speaker with at least 2 embeddings"
    );
    let n = embeddings.len() as f64;
    let s = groups.len() as f64;
    let mean = groups.values().flatten().fold(DVector::zeros(d), |acc, x| acc + x) / n;

    let mut within = DMatrix::zeros(d, d);
    let mut between = DMatrix::zeros(d, d);
    for members in groups.values() {
        let m = members.iter().fold(DVector::zeros(d), |acc, x| acc + x) / members.len() as f64;
        for x in members {
            let c = x - &m;
            within += &c * c.transpose();
        }
        let c = &m - &mean;
        between += &c * c.transpose();
    }
    within /= n - s;
    between /= s;
    within += DMatrix::identity(d, d) * WITHIN_RIDGE;
    TwoCovModel::from_parts(mean, between, within)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Cosine,
    TwoCov(Box<TwoCovModel>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Cosine,
    #[serde(alias = "two_cov")]
    Twocov,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(BackendKind::Cosine),
            "twocov" | "two_cov" => Ok(BackendKind::Twocov),
            other => Err(Error::Config(format!(
                "unknown backend `{other}` (expected cosine or twocov)"
            ))),
        }
    }
}

impl BackendKind {
    /// Prepares a backend; the two-covariance model is fitted on the
    /// length-normalized training-split embeddings of `store`.
    pub fn prepare(self, store: &EmbeddingStore) -> Result<Backend> {
        match self {
            BackendKind::Cosine => Ok(Backend::Cosine),
            BackendKind::Twocov => {
                let train: Vec<&EmbeddingEntry> =
                    store.entries().iter().filter(|e| e.split == Split::Train).collect();
                let normed = train
                    .iter()
                    .map(|e| unit(e.vector.view()))
                    .collect::<Result<Vec<_>>>()?;
                let views: Vec<_> = normed.iter().map(|v| v.view()).collect();
                let labels: Vec<usize> = train.iter().map(|e| e.speaker_id).collect();
                Ok(Backend::TwoCov(Box::new(fit_two_cov(&views, &labels)?)))
            }
        }
    }
}

impl Backend {
    pub fn score(&self, enrollment: &EnrollmentModel, test: ArrayView1<'_, f64>) -> Result<f64> {
        match self {
            Backend::Cosine => cosine_score(enrollment.vector.view(), test),
            Backend::TwoCov(model) => model.score(enrollment.vector.view(), unit(test)?.view()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub enroll_id: String,
    pub test_utt_id: String,
    pub score: f64,
    pub is_target: bool,
}

impl ScoreRecord {
    pub fn labeled(&self) -> LabeledScore {
        LabeledScore {
            score: self.score,
            is_target: self.is_target,
        }
    }
}

/// Scores every trial in order and splits the scores by ground truth.
pub fn score_trials(
    trials: &[Trial],
    store: &EmbeddingStore,
    backend: &Backend,
) -> Result<(Vec<ScoreRecord>, ScoreSet)> {
    let mut models: HashMap<&str, EnrollmentModel> = HashMap::new();
    let mut records = Vec::with_capacity(trials.len());
    let mut set = ScoreSet::default();
    for t in trials {
        if !models.contains_key(t.enroll_id.as_str()) {
            let (speaker, style) = parse_key(&t.enroll_id).ok_or_else(|| {
                Error::Contract(format!("unresolved enrollment key `{}`", t.enroll_id))
            })?;
            if store.enrollment_members(speaker, style).is_empty() {
                return Err(Error::Contract(format!(
                    "unresolved enrollment key `{}`",
                    t.enroll_id
                )));
            }
            models.insert(&t.enroll_id, enroll_cell(store, speaker, style)?);
        }
        let test = store
            .get(&t.test_utt_id)
            .ok_or_else(|| Error::Contract(format!("unresolved test key `{}`", t.test_utt_id)))?;
        let score = backend.score(&models[t.enroll_id.as_str()], test.vector.view())?;
        if t.is_target {
            set.target_scores.push(score);
        } else {
            set.nontarget_scores.push(score);
        }
        records.push(ScoreRecord {
            enroll_id: t.enroll_id.clone(),
            test_utt_id: t.test_utt_id.clone(),
            score,
            is_target: t.is_target,
        });
    }
    Ok((records, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn entry(spk: usize, sty: usize, idx: usize, split: Split, v: Array1<f64>) -> EmbeddingEntry {
        EmbeddingEntry {
            key: crate::synthdata::utterance_key(spk, sty, idx),
            speaker_id: spk,
            style_id: sty,
            split,
            vector: v,
        }
    }

    #[test]
    fn exhaustive_pairing() {
        let store = EmbeddingStore::new(vec![
            entry(0, 0, 0, Split::Enroll, array![1.0, 0.0]),
            entry(0, 0, 1, Split::Test, array![0.9, 0.1]),
            entry(1, 0, 0, Split::Enroll, array![0.0, 1.0]),
            entry(1, 0, 1, Split::Test, array![0.1, 0.9]),
        ])
        .unwrap();
        let trials = build_trials(&store, 0, 0).unwrap();
        assert_eq!(trials.len(), 4);
        assert_eq!(trials.iter().filter(|t| t.is_target).count(), 2);
        assert_eq!(trials[0].enroll_id, "spk000-sty0");
        assert!(build_trials(&store, 0, 3).is_err());
    }

    #[test]
    fn shared_utterances_are_not_scored_against_themselves() {
        let store = EmbeddingStore::new(vec![
            entry(0, 0, 0, Split::Shared, array![1.0, 0.0]),
            entry(1, 0, 0, Split::Shared, array![0.0, 1.0]),
            entry(2, 0, 0, Split::Shared, array![1.0, 1.0]),
        ])
        .unwrap();
        let trials = build_trials(&store, 0, 0).unwrap();
        assert_eq!(trials.len(), 6);
        assert!(trials.iter().all(|t| !t.is_target));
        assert!(trials
            .iter()
            .all(|t| !t.test_utt_id.starts_with(&t.enroll_id)));
    }

    #[test]
    fn enroll_examples() {
        let single = enroll(&[array![3.0, 4.0].view()]).unwrap();
        assert!((single[0] - 0.6).abs() < 1e-15 && (single[1] - 0.8).abs() < 1e-15);
        let twice = enroll(&[array![1.0, 2.0].view(), array![1.0, 2.0].view()]).unwrap();
        let once = enroll(&[array![1.0, 2.0].view()]).unwrap();
        assert!((&twice - &once).iter().all(|v| v.abs() < 1e-15));
        assert!(enroll(&[array![0.0, 0.0].view()]).is_err());
    }

    #[test]
    fn enroll_matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let vecs: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| normal.sample(&mut rng)).collect()).collect();
        let mut acc = [0.0; 6];
        for v in &vecs {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x / n;
            }
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        let arrays: Vec<Array1<f64>> = vecs.into_iter().map(Array1::from).collect();
        let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
        let got = enroll(&views).unwrap();
        for (g, a) in got.iter().zip(acc) {
            assert!((g - a / n).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        let a = array![1.0, 2.0, 3.0];
        assert!((cosine_score(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(array![1.0, 0.0].view(), array![0.0, 2.0].view()).unwrap(), 0.0);
        assert_eq!(cosine_score(a.view(), (-&a).view()).unwrap(), -1.0);
        assert!(cosine_score(a.view(), array![0.0, 0.0, 0.0].view()).is_err());
    }

    #[test]
    fn two_cov_constructed_geometry() {
        let pts = [array![1.0, 0.0], array![1.0, 0.0], array![-1.0, 0.0], array![-1.0, 0.0]];
        let views: Vec<_> = pts.iter().map(|p| p.view()).collect();
        let model = fit_two_cov(&views, &[0, 0, 1, 1]).unwrap();
        assert!((model.between[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(model.between[(0, 1)], 0.0);
        assert_eq!(model.between[(1, 1)], 0.0);
        assert!((model.within[(0, 0)] - WITHIN_RIDGE).abs() < 1e-18);
        assert!((model.within[(1, 1)] - WITHIN_RIDGE).abs() < 1e-18);
    }

    #[test]
    fn two_cov_degenerate_counts() {
        let a = array![1.0, 0.0];
        assert!(fit_two_cov(&[a.view(), a.view()], &[0, 0]).is_err());
        assert!(fit_two_cov(&[a.view(), a.view()], &[0, 1]).is_err());
    }

    fn model_1d(mu: f64, b: f64, w: f64) -> TwoCovModel {
        TwoCovModel::from_parts(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, w),
        )
        .unwrap()
    }

    #[test]
    fn two_cov_ordering_and_symmetry() {
        let (mu, b, w) = (0.5, 2.0, 0.3);
        let m = model_1d(mu, b, w);
        let same = m.score(array![mu].view(), array![mu].view()).unwrap();
        let far = mu + 3.0 * b.sqrt();
        let opposite = m.score(array![far].view(), array![-far].view()).unwrap();
        assert!(same > opposite);
        let ab = m.score(array![0.3].view(), array![-1.2].view()).unwrap();
        let ba = m.score(array![-1.2].view(), array![0.3].view()).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn two_cov_matches_quadrature_oracle() {
        let (mu, b, w) = (0.2, 1.5, 0.4);
        let m = model_1d(mu, b, w);
        let pdf = |x: f64, var: f64| (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        for (e1, e2) in [(0.1, 0.5), (1.7, -0.4), (-2.0, -2.5)] {
            // Integrate over the latent speaker variable with composite Simpson.
            let (lo, hi, n) = (-15.0, 15.0, 20_000);
            let h = (hi - lo) / n as f64;
            let f = |y: f64| pdf(e1 - mu - y, w) * pdf(e2 - mu - y, w) * pdf(y, b);
            let mut same = f(lo) + f(hi);
            for i in 1..n {
                let y = lo + i as f64 * h;
                same += if i % 2 == 1 { 4.0 } else { 2.0 } * f(y);
            }
            same *= h / 3.0;
            let diff = pdf(e1 - mu, b + w) * pdf(e2 - mu, b + w);
            let want = same.ln() - diff.ln();
            let got = m.score(array![e1].view(), array![e2].view()).unwrap();
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn two_cov_recovers_1d_variances() {
        let (sb, sw) = (1.0f64, 0.25f64);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let between = Normal::new(0.0, sb.sqrt()).unwrap();
        let within = Normal::new(0.0, sw.sqrt()).unwrap();
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        for s in 0..1000 {
            let y = between.sample(&mut rng);
            for _ in 0..10 {
                xs.push(array![y + within.sample(&mut rng)]);
                labels.push(s);
            }
        }
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let model = fit_two_cov(&views, &labels).unwrap();
        assert!((model.between[(0, 0)] / sb - 1.0).abs() < 0.1);
        assert!((model.within[(0, 0)] / sw - 1.0).abs() < 0.1);

        let mut shuffled = labels.clone();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for i in (1..shuffled.len()).rev() {
            let j = rand::Rng::random_range(&mut r, 0..=i);
            shuffled.swap(i, j);
        }
        let scrambled = fit_two_cov(&views, &shuffled).unwrap();
        assert!(scrambled.between[(0, 0)] < 0.5 * model.between[(0, 0)]);
    }

    #[test]
    fn unresolved_keys_are_named() {
        let store = EmbeddingStore::new(vec![
            entry(0, 0, 0, Split::Enroll, array![1.0, 0.0]),
            entry(0, 0, 1, Split::Test, array![1.0, 0.1]),
        ])
        .unwrap();
        let bad = [Trial {
            enroll_id: "spk000-sty0".into(),
            test_utt_id: "spk009-sty0-utt00".into(),
            is_target: false,
        }];
        let err = score_trials(&bad, &store, &Backend::Cosine).unwrap_err().to_string();
        assert!(err.contains("spk009-sty0-utt00"));
        let bad = [Trial {
            enroll_id: "spk004-sty0".into(),
            test_utt_id: "spk000-sty0-utt01".into(),
            is_target: false,
        }];
        assert!(score_trials(&bad, &store, &Backend::Cosine).is_err());
    }

    #[test]
    fn score_trials_preserves_order() {
        let store = EmbeddingStore::new(vec![
            entry(0, 0, 0, Split::Enroll, array![1.0, 0.0]),
            entry(0, 0, 1, Split::Test, array![0.8, 0.6]),
        ])
        .unwrap();
        let trials = [Trial {
            enroll_id: "spk000-sty0".into(),
            test_utt_id: "spk000-sty0-utt01".into(),
            is_target: true,
        }];
        let (records, set) = score_trials(&trials, &store, &Backend::Cosine).unwrap();
        assert_eq!(records.len(), 1);
        assert!((records[0].score - 0.8).abs() < 1e-15);
        assert_eq!(set.target_scores.len(), 1);
        assert!(set.nontarget_scores.is_empty());
    }
}
