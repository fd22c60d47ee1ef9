//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cllrce_core::losses::{LabelBatch, LogitBatch, LossKind};
use cllrce_core::metrics::{DcfParams, ScoreSet};
use cllrce_core::model::{self, ModelConfig, ModelParams, Pooling};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Miss and false-alarm rates at `t` by direct counting (accept iff score >= t).
pub fn rates(s: &ScoreSet, t: f64) -> (f64, f64) {
    let miss = s.target_scores.iter().filter(|&&x| x < t).count();
    let fa = s.nontarget_scores.iter().filter(|&&x| x >= t).count();
    (
        miss as f64 / s.target_scores.len() as f64,
        fa as f64 / s.nontarget_scores.len() as f64,
    )
}

fn candidate_thresholds(s: &ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = s.target_scores.iter().chain(&s.nontarget_scores).copied().collect();
    t.push(f64::NEG_INFINITY);
    t.push(f64::INFINITY);
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// EER by enumerating every threshold: the first threshold with
/// `p_miss >= p_fa`, interpolated against its predecessor when not exact.
pub fn eer_oracle(s: &ScoreSet) -> f64 {
    let pts: Vec<(f64, f64)> = candidate_thresholds(s).into_iter().map(|t| rates(s, t)).collect();
    for k in 0..pts.len() {
        let (m, f) = pts[k];
        if m == f {
            return m;
        }
        if m > f {
            let (m0, f0) = pts[k - 1];
            // Solve m0 + a (m - m0) = f0 + a (f - f0) for a.
            let a = (f0 - m0) / ((m - m0) - (f - f0));
            return m0 + a * (m - m0);
        }
    }
    unreachable!("the +inf threshold has p_miss = 1 > p_fa = 0")
}

pub fn min_dcf_oracle(s: &ScoreSet, p: &DcfParams) -> f64 {
    let best = candidate_thresholds(s)
        .into_iter()
        .map(|t| {
            let (m, f) = rates(s, t);
            p.p_target * p.c_miss * m + (1.0 - p.p_target) * p.c_fa * f
        })
        .fold(f64::INFINITY, f64::min);
    best / (p.p_target * p.c_miss).min((1.0 - p.p_target) * p.c_fa)
}

/// `min(1, 2 * sum_{j <= min(n01, n10)} C(n, j) / 2^n)` with exact integer binomials.
pub fn binomial_two_sided_oracle(n01: u64, n10: u64) -> f64 {
    let n = n01 + n10;
    if n == 0 {
        return 1.0;
    }
    let k = n01.min(n10);
    let mut c: u128 = 1;
    let mut sum: u128 = 0;
    for j in 0..=k {
        if j > 0 {
            c = c * u128::from(n - j + 1) / u128::from(j);
        }
        sum += c;
    }
    (2.0 * sum as f64 / 2f64.powi(n as i32)).min(1.0)
}

/// Chi-square(1) survival function, `1 - 2 * int_0^sqrt(x) phi`, by Simpson's rule.
pub fn chi2_1_sf_oracle(x: f64) -> f64 {
    let b = x.sqrt();
    let n = 20_000;
    let h = b / n as f64;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = phi(0.0) + phi(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * phi(i as f64 * h);
    }
    1.0 - 2.0 * acc * h / 3.0
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), normal_vec(rng, rows * cols, scale)).unwrap()
}

pub fn random_score_set(rng: &mut ChaCha8Rng, max_trials: usize) -> ScoreSet {
    let nt = rng.random_range(1..max_trials / 2);
    let nn = rng.random_range(1..max_trials / 2);
    let shift = rng.random_range(0.0..3.0);
    // Rounded scores produce ties.
    let quant = if rng.random_bool(0.5) { 10.0 } else { 1e6 };
    let round = |v: f64| (v * quant).round() / quant;
    ScoreSet::new(
        normal_vec(rng, nt, 1.0).into_iter().map(|v| round(v + shift)).collect(),
        normal_vec(rng, nn, 1.0).into_iter().map(round).collect(),
    )
}

/// A tiny model config for gradient checks.
pub fn tiny_config(pooling: Pooling) -> ModelConfig {
    ModelConfig {
        feature_dim: 5,
        frame_layer_dims: vec![6, 5],
        embedding_dim: 4,
        n_speakers: 4,
        pooling,
        attention_dim: (pooling == Pooling::Attention).then_some(3),
        condition_dim: (pooling == Pooling::Attention).then_some(2),
    }
}

/// Loss of a minibatch as a function of the flat parameter vector.
pub fn batch_loss(params: &ModelParams, feats: &[Array2<f64>], labels: &[usize], loss: LossKind) -> f64 {
    let fwd = model::forward_batch(params, feats.iter().map(|f| f.view())).unwrap();
    loss.evaluate(&LogitBatch::new(fwd.logits).unwrap(), &LabelBatch::new(labels.to_vec()))
        .unwrap()
        .value
}

pub struct GradCheck {
    pub n_params: usize,
    pub n_ok: usize,
    pub worst_rel: f64,
}

impl GradCheck {
    pub fn fraction_ok(&self) -> f64 {
        self.n_ok as f64 / self.n_params as f64
    }
}

/// End-to-end analytic gradient against central differences with step `h`.
/// A parameter passes when `|a - n| <= max(rel * max(|a|, |n|), abs_floor)`.
pub fn gradient_check(pooling: Pooling, loss: LossKind, seed: u64, h: f64, rel: f64, abs_floor: f64) -> GradCheck {
    let config = tiny_config(pooling);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&config, rng.random()).unwrap();
    let n_utt = 6;
    let feats: Vec<Array2<f64>> = (0..n_utt)
        .map(|_| {
            let frames = rng.random_range(3..8);
            normal_matrix(&mut rng, frames, config.feature_dim, 1.0)
        })
        .collect();
    let labels: Vec<usize> = (0..n_utt).map(|i| i % config.n_speakers).collect();

    let fwd = model::forward_batch(&params, feats.iter().map(|f| f.view())).unwrap();
    let out = loss
        .evaluate(&LogitBatch::new(fwd.logits.clone()).unwrap(), &LabelBatch::new(labels.clone()))
        .unwrap();
    let grads = model::backward_batch(&params, feats.iter().map(|f| f.view()), &fwd, out.grad.view(), &config).unwrap();
    let analytic = grads.to_flat();

    let base = params.to_flat();
    let mut probe = params.clone();
    let mut n_ok = 0;
    let mut worst_rel: f64 = 0.0;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        probe.assign_flat(&v).unwrap();
        let up = batch_loss(&probe, &feats, &labels, loss);
        v[i] = base[i] - h;
        probe.assign_flat(&v).unwrap();
        let down = batch_loss(&probe, &feats, &labels, loss);
        let numeric = (up - down) / (2.0 * h);
        let diff = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs());
        if diff <= (rel * scale).max(abs_floor) {
            n_ok += 1;
        }
        if diff > abs_floor {
            worst_rel = worst_rel.max(diff / scale);
        }
    }
    GradCheck {
        n_params: base.len(),
        n_ok,
        worst_rel,
    }
}
