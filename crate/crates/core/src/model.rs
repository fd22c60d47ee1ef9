//! Embedding extractor with hand-written backpropagation.
//!
//! ```text
//! features (T x D) -> [affine + tanh] x L -> pooling -> affine (embedding) -> affine (logits)
//! ```
//!
//! Pooling is either statistics pooling (mean and standard deviation over
//! frames) or self-attention pooling whose energies see each frame
//! concatenated with a gated utterance-level condition vector:
//!
//! ```text
//! c'  = logistic(Wg c + bg) * (Wc c + bc)
//! e_f = v . tanh(Wh [h_f ; c'] + bh)
//! a   = softmax_f(e)
//! out = [ sum_f a_f h_f ; sqrt(sum_f a_f (h_f - mean)^2 + eps) ]
//! ```
//!
//! Frames are processed independently by the frame layers; there is no
//! temporal context.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::sigmoid;

/// Variance floor inside the square root of both pooling layers.
pub const POOL_EPS: f64 = 1e-8;

/// Number of entropy summaries (mean, std, min, max) behind the condition vector.
const ENTROPY_SUMMARIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Stats,
    #[serde(alias = "attn", alias = "attention-conditioned")]
    Attention,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stats" => Ok(Pooling::Stats),
            "attn" | "attention" => Ok(Pooling::Attention),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected stats or attn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub frame_layer_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub n_speakers: usize,
    pub pooling: Pooling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_dim: Option<usize>,
}

impl ModelConfig {
    /// Default widths for the given input size, speaker count and pooling.
    pub fn new(feature_dim: usize, n_speakers: usize, pooling: Pooling) -> Self {
        let (attention_dim, condition_dim) = match pooling {
            Pooling::Stats => (None, None),
            Pooling::Attention => (Some(32), Some(4)),
        };
        Self {
            feature_dim,
            frame_layer_dims: vec![64, 64],
            embedding_dim: 32,
            n_speakers,
            pooling,
            attention_dim,
            condition_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_dim >= 1, "feature_dim must be >= 1");
        ensure!(
            !self.frame_layer_dims.is_empty(),
            "at least one frame layer is required"
        );
        ensure!(
            self.frame_layer_dims.iter().all(|&d| d >= 1),
            "frame layer widths must be >= 1"
        );
        ensure!(self.embedding_dim >= 1, "embedding_dim must be >= 1");
        ensure!(self.n_speakers >= 2, "n_speakers must be >= 2");
        match self.pooling {
            Pooling::Stats => ensure!(
                self.attention_dim.is_none() && self.condition_dim.is_none(),
                "attention_dim and condition_dim are only valid with attention pooling"
            ),
            Pooling::Attention => {
                ensure!(
                    matches!(self.attention_dim, Some(d) if d >= 1),
                    "attention pooling needs attention_dim >= 1"
                );
                ensure!(
                    matches!(self.condition_dim, Some(d) if d >= 1),
                    "attention pooling needs condition_dim >= 1"
                );
            }
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        *self.frame_layer_dims.last().expect("validated non-empty")
    }
}

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        let limit = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || {
                rng.random_range(-limit..limit)
            }),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Condition gate, `condition_dim -> condition_dim`.
    pub gate: Dense,
    /// Condition transform, `condition_dim -> condition_dim`.
    pub transform: Dense,
    /// Energy hidden layer over `[h_f ; c']`, `(hidden + condition_dim) -> attention_dim`.
    pub hidden: Dense,
    /// Energy read-out vector `v`.
    pub score: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub frame_layers: Vec<Dense>,
    pub attention: Option<AttentionParams>,
    pub embedding: Dense,
    /// Final speaker layer: `W` is `embedding_dim x n_speakers`, `b` has length `n_speakers`.
    pub classifier: Dense,
}

fn tensor_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl ModelParams {
    /// Seeded uniform fan-in initialization, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(config, |i, o| Dense::init(&mut rng, i, o)))
    }

    /// All-zero parameters with the shapes of `config`. Doubles as a gradient
    /// accumulator.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, Dense::zeros))
    }

    fn build(config: &ModelConfig, mut dense: impl FnMut(usize, usize) -> Dense) -> Self {
        let mut frame_layers = Vec::with_capacity(config.frame_layer_dims.len());
        let mut input = config.feature_dim;
        for &width in &config.frame_layer_dims {
            frame_layers.push(dense(input, width));
            input = width;
        }
        let hidden = config.hidden_dim();
        let attention = match config.pooling {
            Pooling::Stats => None,
            Pooling::Attention => {
                let c = config.condition_dim.expect("validated");
                let a = config.attention_dim.expect("validated");
                let gate = dense(c, c);
                let transform = dense(c, c);
                let hidden_layer = dense(hidden + c, a);
                // The read-out vector is initialized like a 1-column layer.
                let score_layer = dense(a, 1);
                Some(AttentionParams {
                    gate,
                    transform,
                    hidden: hidden_layer,
                    score: score_layer.weight.column(0).to_owned(),
                })
            }
        };
        let embedding = dense(2 * hidden, config.embedding_dim);
        let classifier = dense(config.embedding_dim, config.n_speakers);
        Self {
            frame_layers,
            attention,
            embedding,
            classifier,
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.frame_layers.iter().enumerate() {
            out.push((format!("frame.{i}.weight"), tensor_slice(&l.weight)));
            out.push((format!("frame.{i}.bias"), l.bias.as_slice().expect("contiguous")));
        }
        if let Some(att) = &self.attention {
            for (name, l) in [("gate", &att.gate), ("transform", &att.transform), ("hidden", &att.hidden)] {
                out.push((format!("attention.{name}.weight"), tensor_slice(&l.weight)));
                out.push((format!("attention.{name}.bias"), l.bias.as_slice().expect("contiguous")));
            }
            out.push(("attention.score".into(), att.score.as_slice().expect("contiguous")));
        }
        out.push(("embedding.weight".into(), tensor_slice(&self.embedding.weight)));
        out.push(("embedding.bias".into(), self.embedding.bias.as_slice().expect("contiguous")));
        out.push(("classifier.weight".into(), tensor_slice(&self.classifier.weight)));
        out.push(("classifier.bias".into(), self.classifier.bias.as_slice().expect("contiguous")));
        out
    }

    /// Mutable views in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.frame_layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        if let Some(att) = &mut self.attention {
            for l in [&mut att.gate, &mut att.transform, &mut att.hidden] {
                out.push(l.weight.as_slice_mut().expect("standard layout"));
                out.push(l.bias.as_slice_mut().expect("contiguous"));
            }
            out.push(att.score.as_slice_mut().expect("contiguous"));
        }
        out.push(self.embedding.weight.as_slice_mut().expect("standard layout"));
        out.push(self.embedding.bias.as_slice_mut().expect("contiguous"));
        out.push(self.classifier.weight.as_slice_mut().expect("standard layout"));
        out.push(self.classifier.bias.as_slice_mut().expect("contiguous"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.num_params(),
            "flat parameter vector has {} entries, model has {}",
            flat.len(),
            self.num_params()
        );
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Checks that the tensor shapes agree with `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let reference = Self::zeros(config)?;
        let ours = self.named_tensors();
        let theirs = reference.named_tensors();
        ensure!(
            ours.len() == theirs.len()
                && ours.iter().zip(&theirs).all(|(a, b)| a.0 == b.0 && a.1.len() == b.1.len())
                && self.shapes() == reference.shapes(),
            "parameter shapes do not match the model config"
        );
        Ok(())
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.frame_layers {
            out.push(l.weight.shape().to_vec());
        }
        if let Some(att) = &self.attention {
            out.push(att.gate.weight.shape().to_vec());
            out.push(att.transform.weight.shape().to_vec());
            out.push(att.hidden.weight.shape().to_vec());
        }
        out.push(self.embedding.weight.shape().to_vec());
        out.push(self.classifier.weight.shape().to_vec());
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Utterance-level variability descriptor fed to attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector(pub Array1<f64>);

/// Per-frame Shannon entropy (nats) of the softmax over feature dimensions.
pub fn frame_entropies(features: ArrayView2<'_, f64>) -> Array1<f64> {
    features
        .outer_iter()
        .map(|row| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            // H = -sum p ln p = lse - sum p x
            let expected: f64 = row.iter().map(|&v| (v - lse).exp() * v).sum();
            (lse - expected).max(0.0)
        })
        .collect()
}

/// `(mean, std, min, max)` of the frame entropies divided by `ln D`, tiled
/// cyclically to `condition_dim` entries.
pub fn condition_vector(features: ArrayView2<'_, f64>, condition_dim: usize) -> Result<ConditionVector> {
    ensure!(features.nrows() >= 1, "condition vector needs at least one frame");
    ensure!(condition_dim >= 1, "condition_dim must be >= 1");
    let d = features.ncols();
    let h = frame_entropies(features);
    let n = h.len() as f64;
    let mean = h.sum() / n;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let min = h.fold(f64::INFINITY, |a, &b| a.min(b));
    let max = h.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    // A single feature dimension has zero entropy everywhere; avoid 0/0.
    let scale = if d > 1 { 1.0 / (d as f64).ln() } else { 1.0 };
    let summary = [mean * scale, var.sqrt() * scale, min * scale, max * scale];
    Ok(ConditionVector(
        (0..condition_dim)
            .map(|i| summary[i % ENTROPY_SUMMARIES])
            .collect(),
    ))
}

/// `tanh` through a single `exp`; within one ulp-scale absolute error of
/// `f64::tanh` and considerably cheaper.
#[inline]
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Frame-level network: `tanh(H W + b)` per configured layer. Returns every
/// layer's output.
fn frame_layer_outputs(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
    let first = &params.frame_layers[0];
    ensure!(
        features.ncols() == first.weight.nrows(),
        "features have {} dims, model expects {}",
        features.ncols(),
        first.weight.nrows()
    );
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(params.frame_layers.len());
    for (i, layer) in params.frame_layers.iter().enumerate() {
        let input = if i == 0 { features } else { outputs[i - 1].view() };
        let mut z = input.dot(&layer.weight);
        z += &layer.bias;
        z.mapv_inplace(tanh);
        outputs.push(z);
    }
    Ok(outputs)
}

pub fn forward_frames(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(frame_layer_outputs(params, features)?
        .pop()
        .expect("at least one layer"))
}

/// Mean and population standard deviation per dimension, concatenated.
pub fn stats_pool(frame_acts: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    ensure!(
        frame_acts.nrows() >= 2,
        "statistics pooling needs at least 2 frames, got {}",
        frame_acts.nrows()
    );
    let (mean, std) = stats_moments(frame_acts);
    Ok(concat(&mean, &std))
}

fn stats_moments(h: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let t = h.nrows() as f64;
    let mean = h.sum_axis(Axis(0)) / t;
    let centered = &h - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / t;
    let std = var.mapv(|v| (v + POOL_EPS).sqrt());
    (mean, std)
}

fn concat(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.len() + b.len());
    out.slice_mut(s![..a.len()]).assign(a);
    out.slice_mut(s![a.len()..]).assign(b);
    out
}

#[derive(Debug, Clone)]
struct AttentionCache {
    cond: Array1<f64>,
    gate: Array1<f64>,
    transformed: Array1<f64>,
    gated: Array1<f64>,
    /// `tanh` of the energy hidden layer, `T x attention_dim`.
    energy_hidden: Array2<f64>,
    weights: Array1<f64>,
}

fn attention_forward(
    h: ArrayView2<'_, f64>,
    cond: &ConditionVector,
    att: &AttentionParams,
) -> Result<(Array1<f64>, Array1<f64>, AttentionCache)> {
    let hidden = h.ncols();
    let c_dim = att.gate.weight.nrows();
    ensure!(h.nrows() >= 1, "attention pooling needs at least one frame");
    ensure!(
        cond.0.len() == c_dim,
        "condition vector has {} dims, attention expects {}",
        cond.0.len(),
        c_dim
    );
    ensure!(
        att.hidden.weight.nrows() == hidden + c_dim,
        "frame activations have {} dims, attention expects {}",
        hidden,
        att.hidden.weight.nrows() - c_dim
    );
    let c = &cond.0;
    let gate = att.gate.apply(c.view()).mapv(sigmoid);
    let transformed = att.transform.apply(c.view());
    let gated = &gate * &transformed;

    let w_frame = att.hidden.weight.slice(s![..hidden, ..]);
    let w_cond = att.hidden.weight.slice(s![hidden.., ..]);
    let shared = gated.dot(&w_cond) + &att.hidden.bias;
    let mut energy_hidden = h.dot(&w_frame);
    energy_hidden += &shared;
    energy_hidden.mapv_inplace(tanh);
    let energies = energy_hidden.dot(&att.score);

    let max = energies.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut weights = energies.mapv(|e| (e - max).exp());
    let z = weights.sum();
    weights /= z;

    let mean = weights.dot(&h);
    let centered = &h - &mean;
    let var = weights.dot(&centered.mapv(|v| v * v));
    let std = var.mapv(|v| (v + POOL_EPS).sqrt());
    Ok((
        mean,
        std,
        AttentionCache {
            cond: c.clone(),
            gate,
            transformed,
            gated,
            energy_hidden,
            weights,
        },
    ))
}

/// Attention-weighted mean and standard deviation, conditioned on `cond`.
pub fn attention_pool(
    frame_acts: ArrayView2<'_, f64>,
    cond: &ConditionVector,
    params: &AttentionParams,
) -> Result<Array1<f64>> {
    let (mean, std, _) = attention_forward(frame_acts, cond, params)?;
    Ok(concat(&mean, &std))
}

/// Attention weights over frames, for inspection.
pub fn attention_weights(
    frame_acts: ArrayView2<'_, f64>,
    cond: &ConditionVector,
    params: &AttentionParams,
) -> Result<Array1<f64>> {
    Ok(attention_forward(frame_acts, cond, params)?.2.weights)
}

#[derive(Debug, Clone)]
enum PoolCache {
    Stats,
    Attention(AttentionCache),
}

/// Values saved by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_outputs: Vec<Array2<f64>>,
    pool: PoolCache,
    mean: Array1<f64>,
    std: Array1<f64>,
    pooled: Array1<f64>,
    embedding: Array1<f64>,
    n_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Array1<f64>);

/// Full forward pass for one utterance: logits plus the cache for backward.
pub fn forward(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, ForwardCache)> {
    let layer_outputs = frame_layer_outputs(params, features)?;
    let h = layer_outputs.last().expect("at least one layer").view();
    let (mean, std, pool) = match &params.attention {
        None => {
            ensure!(
                h.nrows() >= 2,
                "statistics pooling needs at least 2 frames, got {}",
                h.nrows()
            );
            let (m, s) = stats_moments(h);
            (m, s, PoolCache::Stats)
        }
        Some(att) => {
            let cond = condition_vector(features, att.gate.weight.nrows())?;
            let (m, s, cache) = attention_forward(h, &cond, att)?;
            (m, s, PoolCache::Attention(cache))
        }
    };
    let pooled = concat(&mean, &std);
    ensure!(
        pooled.len() == params.embedding.weight.nrows(),
        "pooled vector has {} dims, embedding layer expects {}",
        pooled.len(),
        params.embedding.weight.nrows()
    );
    let embedding = params.embedding.apply(pooled.view());
    let logits = params.classifier.apply(embedding.view());
    let n_frames = features.nrows();
    Ok((
        logits,
        ForwardCache {
            layer_outputs,
            pool,
            mean,
            std,
            pooled,
            embedding,
            n_frames,
        },
    ))
}

pub fn embed(params: &ModelParams, features: ArrayView2<'_, f64>) -> Result<Embedding> {
    Ok(Embedding(forward(params, features)?.1.embedding))
}

pub fn classify(params: &ModelParams, embedding: &Embedding) -> Result<Array1<f64>> {
    ensure!(
        embedding.0.len() == params.classifier.weight.nrows(),
        "embedding has {} dims, classifier expects {}",
        embedding.0.len(),
        params.classifier.weight.nrows()
    );
    Ok(params.classifier.apply(embedding.0.view()))
}

/// Accumulates into `grads` the parameter gradient of a scalar whose gradient
/// with respect to this utterance's logits is `d_logits`.
pub fn backward(
    params: &ModelParams,
    features: ArrayView2<'_, f64>,
    cache: &ForwardCache,
    d_logits: ArrayView1<'_, f64>,
    grads: &mut ModelParams,
) -> Result<()> {
    ensure!(
        d_logits.len() == params.classifier.bias.len(),
        "upstream gradient has {} entries, model has {} speakers",
        d_logits.len(),
        params.classifier.bias.len()
    );
    ensure!(
        cache.n_frames == features.nrows(),
        "forward cache belongs to a different utterance"
    );

    // Classifier and embedding layers.
    outer_add(&mut grads.classifier.weight, cache.embedding.view(), d_logits);
    grads.classifier.bias += &d_logits;
    let d_emb = params.classifier.weight.dot(&d_logits);
    outer_add(&mut grads.embedding.weight, cache.pooled.view(), d_emb.view());
    grads.embedding.bias += &d_emb;
    let d_pooled = params.embedding.weight.dot(&d_emb);

    let hidden = cache.mean.len();
    let d_mean = d_pooled.slice(s![..hidden]);
    let d_std = d_pooled.slice(s![hidden..]);
    let d_var = &d_std / &(2.0 * &cache.std);

    let h = cache.layer_outputs.last().expect("at least one layer");
    let centered = h - &cache.mean;
    let mut d_h: Array2<f64>;
    match &cache.pool {
        PoolCache::Stats => {
            // d var / d h_f = 2 (h_f - mean) / T; the mean term cancels.
            let t = h.nrows() as f64;
            d_h = &centered * &(&d_var * (2.0 / t));
            d_h += &(&d_mean / t);
        }
        PoolCache::Attention(ac) => {
            let att = params.attention.as_ref().ok_or_else(|| {
                Error::Contract("attention cache without attention parameters".into())
            })?;
            let g_att = grads.attention.as_mut().ok_or_else(|| {
                Error::Contract("gradient buffer lacks attention parameters".into())
            })?;
            let a = &ac.weights;
            // Direct paths through the weighted mean and variance.
            d_h = &centered * &(&d_var * 2.0);
            d_h += &d_mean;
            d_h *= &a.view().insert_axis(Axis(1));
            // d out / d a_f = d_mean . h_f + d_var . (h_f - mean)^2
            let d_a = h.dot(&d_mean) + centered.mapv(|v| v * v).dot(&d_var);
            let a_dot = a.dot(&d_a);
            let d_energy = a * &(&d_a - a_dot);

            g_att.score += &ac.energy_hidden.t().dot(&d_energy);
            // d pre = d_energy_f * v * (1 - u^2)
            let mut d_pre = ac.energy_hidden.mapv(|u| 1.0 - u * u);
            Zip::from(d_pre.rows_mut())
                .and(&d_energy)
                .for_each(|mut row, &de| {
                    row *= de;
                });
            d_pre *= &att.score;

            let w_frame = att.hidden.weight.slice(s![..hidden, ..]);
            let w_cond = att.hidden.weight.slice(s![hidden.., ..]);
            let d_pre_sum = d_pre.sum_axis(Axis(0));
            g_att
                .hidden
                .weight
                .slice_mut(s![..hidden, ..])
                .scaled_add(1.0, &h.t().dot(&d_pre));
            outer_add_view(
                &mut g_att.hidden.weight.slice_mut(s![hidden.., ..]),
                ac.gated.view(),
                d_pre_sum.view(),
            );
            g_att.hidden.bias += &d_pre_sum;
            d_h += &d_pre.dot(&w_frame.t());

            let d_gated = w_cond.dot(&d_pre_sum);
            let d_transformed = &d_gated * &ac.gate;
            let d_gate_pre = &d_gated * &ac.transformed * ac.gate.mapv(|g| g * (1.0 - g));
            outer_add(&mut g_att.transform.weight, ac.cond.view(), d_transformed.view());
            g_att.transform.bias += &d_transformed;
            outer_add(&mut g_att.gate.weight, ac.cond.view(), d_gate_pre.view());
            g_att.gate.bias += &d_gate_pre;
        }
    }

    // Frame layers, last to first.
    for l in (0..params.frame_layers.len()).rev() {
        let out = &cache.layer_outputs[l];
        let d_z = d_h * &out.mapv(|u| 1.0 - u * u);
        let input = if l == 0 {
            features
        } else {
            cache.layer_outputs[l - 1].view()
        };
        grads.frame_layers[l]
            .weight
            .scaled_add(1.0, &input.t().dot(&d_z));
        grads.frame_layers[l].bias += &d_z.sum_axis(Axis(0));
        if l == 0 {
            break;
        }
        d_h = d_z.dot(&params.frame_layers[l].weight.t());
    }
    Ok(())
}

fn outer_add(dst: &mut Array2<f64>, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) {
    outer_add_view(&mut dst.view_mut(), x, y);
}

fn outer_add_view(
    dst: &mut ndarray::ArrayViewMut2<'_, f64>,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) {
    for (mut row, &xi) in dst.rows_mut().into_iter().zip(x.iter()) {
        row.scaled_add(xi, &y);
    }
}

/// Forward pass over a minibatch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub logits: Array2<f64>,
    caches: Vec<ForwardCache>,
}

pub fn forward_batch<'a, I>(params: &ModelParams, batch: I) -> Result<BatchForward>
where
    I: IntoIterator<Item = ArrayView2<'a, f64>>,
{
    let mut rows = Vec::new();
    let mut caches = Vec::new();
    for features in batch {
        let (logits, cache) = forward(params, features)?;
        rows.push(logits);
        caches.push(cache);
    }
    ensure!(!rows.is_empty(), "empty minibatch");
    let n = rows[0].len();
    let mut logits = Array2::zeros((rows.len(), n));
    for (mut dst, src) in logits.rows_mut().into_iter().zip(&rows) {
        dst.assign(src);
    }
    Ok(BatchForward { logits, caches })
}

/// Parameter gradients for a minibatch, summed over utterances in batch order.
pub fn backward_batch<'a, I>(
    params: &ModelParams,
    batch: I,
    forward: &BatchForward,
    d_logits: ArrayView2<'_, f64>,
    config: &ModelConfig,
) -> Result<ModelParams>
where
    I: IntoIterator<Item = ArrayView2<'a, f64>>,
{
    let features: Vec<_> = batch.into_iter().collect();
    ensure!(
        d_logits.dim() == forward.logits.dim(),
        "upstream gradient shape {:?} does not match logits {:?}",
        d_logits.dim(),
        forward.logits.dim()
    );
    ensure!(
        features.len() == forward.caches.len(),
        "missing forward cache: {} utterances but {} cached passes",
        features.len(),
        forward.caches.len()
    );
    let mut grads = ModelParams::zeros(config)?;
    for ((f, cache), d) in features.iter().zip(&forward.caches).zip(d_logits.rows()) {
        backward(params, *f, cache, d, &mut grads)?;
    }
    Ok(grads)
}
