//! Seeded minibatch training with Adam.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::{self, LabelBatch, LogitBatch, LossKind};
use crate::model::{self, ModelConfig, ModelParams};
use crate::synthdata::{Split, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::CllrCe,
            batch_size: 128,
            epochs: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 2, "batch_size must be >= 2");
        ensure!(self.epochs >= 1, "epochs must be >= 1");
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive"
        );
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, "adam_eps must be positive");
        Ok(())
    }
}

/// First and second moment estimates over the flattened parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update over a list of tensors laid end to end in
/// `state`. `grads` pairs a tensor name (for diagnostics) with its gradient.
pub fn adam_step_tensors(
    params: Vec<&mut [f64]>,
    grads: &[(String, &[f64])],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    ensure!(
        params.len() == grads.len(),
        "{} parameter tensors but {} gradient tensors",
        params.len(),
        grads.len()
    );
    let total: usize = params.iter().map(|p| p.len()).sum();
    ensure!(
        state.m.len() == total && state.v.len() == total,
        "optimizer state holds {} entries, parameters have {}",
        state.m.len(),
        total
    );
    for (p, (name, g)) in params.iter().zip(grads) {
        ensure!(p.len() == g.len(), "gradient `{name}` has the wrong length");
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: name.clone(),
                index,
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let mut offset = 0;
    for (p, (_, g)) in params.into_iter().zip(grads) {
        let m = &mut state.m[offset..offset + p.len()];
        let v = &mut state.v[offset..offset + p.len()];
        for (((w, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
        offset += g.len();
    }
    Ok(())
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let named = grads.named_tensors();
    adam_step_tensors(params.tensors_mut(), &named, state, config)
}

/// Loss values of one optimizer step. `ce` and `cllr` are always the two
/// component losses on the same logits, whatever objective was optimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: f64,
    pub ce: f64,
    pub cllr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss_kind: LossKind,
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub steps: Vec<StepRecord>,
    /// Not serialized, so history files stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub optimizer: AdamState,
    /// Sorted original speaker ids; position = classifier column.
    pub speaker_ids: Vec<usize>,
}

/// Dense label space over the speakers of `utterances`, in ascending id order.
pub fn speaker_index(utterances: &[&Utterance]) -> BTreeMap<usize, usize> {
    let mut ids: Vec<usize> = utterances.iter().map(|u| u.speaker_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

fn distinct(labels: &[usize], batch: &[usize]) -> usize {
    let mut seen: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Shuffled minibatches of sample indices, each with at least two samples
/// and at least two distinct labels.
pub fn epoch_batches(labels: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    ensure!(batch_size >= 2, "batch_size must be >= 2");
    ensure!(
        distinct(labels, &(0..labels.len()).collect::<Vec<_>>()) >= 2,
        "training data must contain at least two speakers"
    );
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }

    for b in 0..batches.len() {
        if distinct(labels, &batches[b]) >= 2 {
            continue;
        }
        let fixed = 'search: {
            for d in (0..batches.len()).filter(|&d| d != b) {
                for pos in 0..batches[d].len() {
                    if labels[batches[d][pos]] == labels[batches[b][0]] {
                        continue;
                    }
                    let last = batches[b].len() - 1;
                    let (give, take) = (batches[b][last], batches[d][pos]);
                    batches[b][last] = take;
                    batches[d][pos] = give;
                    if distinct(labels, &batches[d]) >= 2 {
                        break 'search true;
                    }
                    batches[d][pos] = take;
                    batches[b][last] = give;
                }
            }
            false
        };
        ensure!(fixed, "cannot form a minibatch with two distinct speakers");
    }
    Ok(batches)
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Trains on the [`Split::Train`] utterances of `corpus`.
pub fn train(
    corpus: &[Utterance],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    let train_set: Vec<&Utterance> = corpus.iter().filter(|u| u.split == Split::Train).collect();
    train_utterances(&train_set, model_config, train_config)
}

/// Trains on the given utterances, whatever their split label.
pub fn train_utterances(
    utterances: &[&Utterance],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    model_config.validate()?;
    ensure!(!utterances.is_empty(), "the training split is empty");
    let index = speaker_index(utterances);
    ensure!(
        index.len() == model_config.n_speakers,
        "training data has {} speakers but the model has {} outputs",
        index.len(),
        model_config.n_speakers
    );
    let labels: Vec<usize> = utterances.iter().map(|u| index[&u.speaker_id]).collect();
    let features: Vec<ArrayView2<'_, f64>> = utterances.iter().map(|u| u.features.view()).collect();

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let init_seed: u64 = rng.random();
    let mut params = ModelParams::init(model_config, init_seed)?;
    let mut optimizer = AdamState::new(params.num_params());
    let mut history = TrainHistory {
        loss_kind: train_config.loss_kind,
        epoch_loss: Vec::with_capacity(train_config.epochs),
        epoch_accuracy: Vec::with_capacity(train_config.epochs),
        steps: Vec::new(),
        wall_time_secs: 0.0,
    };

    for _ in 0..train_config.epochs {
        let batches = epoch_batches(&labels, train_config.batch_size, &mut rng)?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in &batches {
            let feats = batch.iter().map(|&i| features[i]);
            let fwd = model::forward_batch(&params, feats.clone())?;
            let batch_labels = LabelBatch::new(batch.iter().map(|&i| labels[i]).collect());
            let logits = LogitBatch::new(fwd.logits.clone())?;
            let (cllr, ce) = losses::cllr_and_ce(&logits, &batch_labels)?;
            let out = match train_config.loss_kind {
                LossKind::Ce => ce.clone(),
                LossKind::Cllr => cllr.clone(),
                LossKind::CllrCe => losses::combine(&cllr, &ce),
            };
            history.steps.push(StepRecord {
                loss: out.value,
                ce: ce.value,
                cllr: cllr.value,
            });
            loss_sum += out.value * batch.len() as f64;
            correct += fwd
                .logits
                .rows()
                .into_iter()
                .zip(batch_labels.as_slice())
                .filter(|(row, &y)| argmax(*row) == y)
                .count();
            let grads = model::backward_batch(&params, feats, &fwd, out.grad.view(), model_config)?;
            adam_step(&mut params, &grads, &mut optimizer, train_config)?;
        }
        history.epoch_loss.push(loss_sum / labels.len() as f64);
        history.epoch_accuracy.push(correct as f64 / labels.len() as f64);
    }
    history.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        params,
        history,
        optimizer,
        speaker_ids: index.into_keys().collect(),
    })
}

/// Logits for a list of utterances, one row each.
pub fn predict(params: &ModelParams, utterances: &[&Utterance]) -> Result<Array2<f64>> {
    Ok(model::forward_batch(params, utterances.iter().map(|u| u.features.view()))?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_config(beta1: f64, beta2: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            adam_beta1: beta1,
            adam_beta2: beta2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_state() {
        let mut w = [1.5, -2.0];
        let g = [0.0, 0.0];
        let mut state = AdamState::new(2);
        let cfg = TrainConfig::default();
        adam_step_tensors(vec![&mut w[..]], &[("w".into(), &g[..])], &mut state, &cfg).unwrap();
        assert_eq!(w, [1.5, -2.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn constant_gradient_matches_scalar_oracle() {
        // Hand-rolled recurrences, kept apart from the implementation.
        let cfg = scalar_config(0.9, 0.999);
        let g = 0.37;
        let mut w = [2.0];
        let mut state = AdamState::new(1);
        let (mut m, mut v, mut want) = (0.0f64, 0.0f64, 2.0f64);
        for k in 1..=6 {
            adam_step_tensors(vec![&mut w[..]], &[("w".into(), &[g][..])], &mut state, &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(k));
            let v_hat = v / (1.0 - 0.999f64.powi(k));
            want -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((w[0] - want).abs() < 1e-14, "step {k}");
        }
        // With a constant gradient m_hat = g and v_hat = g^2 exactly, so each
        // step moves by lr * g / (|g| + eps).
        let step = 0.1 * g / (g + 1e-8);
        assert!((w[0] - (2.0 - 6.0 * step)).abs() < 1e-12);
    }

    #[test]
    fn zero_betas_give_sign_update() {
        let cfg = scalar_config(0.0, 0.0);
        let mut w = [0.0, 0.0];
        let g = [-3.0, 0.5];
        let mut state = AdamState::new(2);
        adam_step_tensors(vec![&mut w[..]], &[("w".into(), &g[..])], &mut state, &cfg).unwrap();
        for (wi, gi) in w.iter().zip(g) {
            assert!((wi + 0.1 * gi / (gi.abs() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut w = [0.0, 0.0];
        let g = [0.0, f64::NAN];
        let mut state = AdamState::new(2);
        let err = adam_step_tensors(
            vec![&mut w[..]],
            &[("frame.0.weight".into(), &g[..])],
            &mut state,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 1, .. }));
        assert_eq!(state.step, 0);
        assert_eq!(w, [0.0, 0.0]);
    }

    #[test]
    fn batches_cover_every_sample_once_with_two_speakers() {
        let labels: Vec<usize> = (0..131).map(|i| if i < 100 { 0 } else { 1 + i % 3 }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let batches = epoch_batches(&labels, 8, &mut rng).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..131).collect::<Vec<_>>());
            for b in &batches {
                assert!(b.len() >= 2);
                assert!(distinct(&labels, b) >= 2);
            }
        }
    }

    #[test]
    fn single_speaker_data_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(epoch_batches(&[3, 3, 3], 2, &mut rng).is_err());
    }

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let labels = vec![0, 1, 0, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(&labels, 2, &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
