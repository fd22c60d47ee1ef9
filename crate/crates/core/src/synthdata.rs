//! Seeded synthetic multi-speaker, multi-style corpus.
//!
//! Every frame of an utterance by speaker `s` in style `t` is
//!
//! ```text
//! x = A (mu_s + tau_t + delta_st) + eps,   eps ~ N(0, sigma_frame^2 I)
//! ```
//!
//! with speaker identity `mu_s ~ N(0, sigma_spk^2 I)`, a style offset shared by
//! all speakers `tau_t ~ N(0, sigma_style^2 I)`, a speaker-by-style interaction
//! `delta_st ~ N(0, (sigma_style / 2)^2 I)` and a fixed mixing matrix `A` with
//! orthonormal columns. `sigma_spk` sets inter-speaker distance, `sigma_style`
//! sets the style-induced intra-speaker distance.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Frame features of one utterance, `frames x feature_dim`.
pub type FeatureSequence = Array2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_styles: usize,
    pub utts_per_speaker_style: usize,
    /// Inclusive range of frames per utterance.
    pub frames_per_utt: (usize, usize),
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub style_shift_scale: f64,
    pub speaker_scale: f64,
    pub frame_noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 50,
            n_styles: 3,
            utts_per_speaker_style: 4,
            frames_per_utt: (200, 300),
            feature_dim: 24,
            latent_dim: 8,
            style_shift_scale: 0.6,
            speaker_scale: 1.0,
            frame_noise: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_speakers >= 1, "n_speakers must be >= 1");
        ensure!(self.n_styles >= 1, "n_styles must be >= 1");
        ensure!(
            self.utts_per_speaker_style >= 1,
            "utts_per_speaker_style must be >= 1"
        );
        let (lo, hi) = self.frames_per_utt;
        ensure!(lo >= 1 && lo <= hi, "invalid frame range {lo}..={hi}");
        ensure!(self.latent_dim >= 1, "latent_dim must be >= 1");
        ensure!(
            self.feature_dim >= self.latent_dim,
            "feature_dim ({}) must be >= latent_dim ({})",
            self.feature_dim,
            self.latent_dim
        );
        for (name, v) in [
            ("style_shift_scale", self.style_shift_scale),
            ("speaker_scale", self.speaker_scale),
            ("frame_noise", self.frame_noise),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be finite and >= 0, got {v}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Enroll,
    Test,
    /// Used for both enrollment and test (single-utterance cells).
    Shared,
}

impl Split {
    pub fn is_enroll(self) -> bool {
        matches!(self, Split::Enroll | Split::Shared)
    }

    pub fn is_test(self) -> bool {
        matches!(self, Split::Test | Split::Shared)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: FeatureSequence,
    pub speaker_id: usize,
    pub style_id: usize,
    /// Index within the speaker-style cell.
    pub index: usize,
    pub split: Split,
}

impl Utterance {
    pub fn key(&self) -> String {
        utterance_key(self.speaker_id, self.style_id, self.index)
    }
}

pub fn utterance_key(speaker: usize, style: usize, index: usize) -> String {
    format!("spk{speaker:03}-sty{style}-utt{index:02}")
}

pub fn enrollment_key(speaker: usize, style: usize) -> String {
    format!("spk{speaker:03}-sty{style}")
}

/// Parses `spkSSS-styT[-uttUU]` into `(speaker, style)`.
pub fn parse_key(key: &str) -> Option<(usize, usize)> {
    let mut parts = key.split('-');
    let spk = parts.next()?.strip_prefix("spk")?.parse().ok()?;
    let sty = parts.next()?.strip_prefix("sty")?.parse().ok()?;
    match parts.next() {
        None => {}
        Some(u) => {
            u.strip_prefix("utt")?.parse::<usize>().ok()?;
            if parts.next().is_some() {
                return None;
            }
        }
    }
    Some((spk, sty))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

/// The hidden generative state, exposed for statistical checks.
#[derive(Debug, Clone)]
pub struct CorpusLatents {
    /// `feature_dim x latent_dim`, orthonormal columns.
    pub mixing: Array2<f64>,
    pub speaker_means: Array2<f64>,
    pub style_offsets: Array2<f64>,
    /// Indexed `[speaker * n_styles + style]`.
    pub interactions: Array2<f64>,
}

impl CorpusLatents {
    /// Noise-free feature-space mean of a speaker-style cell.
    pub fn cell_mean(&self, speaker: usize, style: usize) -> Array1<f64> {
        let n_styles = self.style_offsets.nrows();
        let z = &self.speaker_means.row(speaker)
            + &self.style_offsets.row(style)
            + &self.interactions.row(speaker * n_styles + style);
        self.mixing.dot(&z)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Modified Gram-Schmidt on the columns.
fn orthonormalize_columns(mut m: Array2<f64>) -> Array2<f64> {
    for j in 0..m.ncols() {
        for k in 0..j {
            let proj = m.column(j).dot(&m.column(k));
            let prev = m.column(k).to_owned();
            m.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    Ok(generate_corpus_with_latents(spec)?.0)
}

/// Generates the corpus and returns the latent state it was drawn from. All
/// utterances start in the [`Split::Train`] split; see [`split_corpus`].
pub fn generate_corpus_with_latents(spec: &CorpusSpec) -> Result<(Corpus, CorpusLatents)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, k) = (spec.feature_dim, spec.latent_dim);
    let mixing = orthonormalize_columns(gaussian_matrix(&mut rng, d, k, 1.0));
    let speaker_means = gaussian_matrix(&mut rng, spec.n_speakers, k, spec.speaker_scale);
    let style_offsets = gaussian_matrix(&mut rng, spec.n_styles, k, spec.style_shift_scale);
    let interactions = gaussian_matrix(
        &mut rng,
        spec.n_speakers * spec.n_styles,
        k,
        spec.style_shift_scale / 2.0,
    );
    let latents = CorpusLatents {
        mixing,
        speaker_means,
        style_offsets,
        interactions,
    };

    let (lo, hi) = spec.frames_per_utt;
    let mut utterances =
        Vec::with_capacity(spec.n_speakers * spec.n_styles * spec.utts_per_speaker_style);
    for speaker in 0..spec.n_speakers {
        for style in 0..spec.n_styles {
            let mean = latents.cell_mean(speaker, style);
            for index in 0..spec.utts_per_speaker_style {
                let frames = rng.random_range(lo..=hi);
                let mut features = gaussian_matrix(&mut rng, frames, d, spec.frame_noise);
                features += &mean.view().insert_axis(Axis(0));
                utterances.push(Utterance {
                    features,
                    speaker_id: speaker,
                    style_id: style,
                    index,
                    split: Split::Train,
                });
            }
        }
    }
    Ok((
        Corpus {
            spec: spec.clone(),
            utterances,
        },
        latents,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Speakers `0..train_speakers` are used for training only; the rest are
    /// divided into enrollment and test utterances.
    pub train_speakers: usize,
    pub enroll_fraction: f64,
    /// Single-utterance cells serve as both enrollment and test.
    pub allow_reuse: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_speakers: 30,
            enroll_fraction: 0.5,
            allow_reuse: false,
            seed: 0,
        }
    }
}

/// Assigns train, enroll and test splits in place.
pub fn split_corpus(corpus: &mut Corpus, split: &SplitSpec) -> Result<()> {
    ensure!(
        split.enroll_fraction > 0.0 && split.enroll_fraction < 1.0,
        "enroll_fraction must lie in (0, 1)"
    );
    let spec = &corpus.spec;
    ensure!(
        split.train_speakers <= spec.n_speakers,
        "train_speakers ({}) exceeds n_speakers ({})",
        split.train_speakers,
        spec.n_speakers
    );
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); spec.n_speakers * spec.n_styles];
    for (i, u) in corpus.utterances.iter().enumerate() {
        ensure!(
            u.speaker_id < spec.n_speakers && u.style_id < spec.n_styles,
            "utterance {} has labels outside the corpus spec",
            u.key()
        );
        cells[u.speaker_id * spec.n_styles + u.style_id].push(i);
    }

    let infeasible: Vec<String> = cells
        .iter()
        .enumerate()
        .filter(|(c, idx)| c / spec.n_styles >= split.train_speakers && idx.len() < 2)
        .map(|(c, _)| enrollment_key(c / spec.n_styles, c % spec.n_styles))
        .collect();
    if !infeasible.is_empty() && !split.allow_reuse {
        return Err(Error::Contract(format!(
            "cells with fewer than 2 utterances cannot provide both enroll and test: {}",
            infeasible.join(", ")
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
    for (c, idx) in cells.iter_mut().enumerate() {
        if c / spec.n_styles < split.train_speakers {
            for &i in idx.iter() {
                corpus.utterances[i].split = Split::Train;
            }
            continue;
        }
        match idx.len() {
            0 => {}
            1 => corpus.utterances[idx[0]].split = Split::Shared,
            n => {
                // Fisher-Yates with the split rng; the corpus order itself is untouched.
                for i in (1..n).rev() {
                    let j = rng.random_range(0..=i);
                    idx.swap(i, j);
                }
                let n_enroll = ((split.enroll_fraction * n as f64).round() as usize).clamp(1, n - 1);
                for (pos, &i) in idx.iter().enumerate() {
                    corpus.utterances[i].split = if pos < n_enroll {
                        Split::Enroll
                    } else {
                        Split::Test
                    };
                }
            }
        }
    }
    Ok(())
}
