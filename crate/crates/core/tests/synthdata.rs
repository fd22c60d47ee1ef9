use cllrce_core::scoring::{build_trial_grid, EmbeddingEntry, EmbeddingStore};
use cllrce_core::synthdata::{
    generate_corpus, generate_corpus_with_latents, split_corpus, CorpusSpec, Split, SplitSpec,
};
use ndarray::{Array1, Array2, Axis};

#[test]
fn per_speaker_frame_means_are_consistent_with_the_latents() {
    let spec = CorpusSpec::default();
    let (corpus, lat) = generate_corpus_with_latents(&spec).unwrap();
    let d = spec.feature_dim;
    let mut z2 = Vec::new();
    let mut within_spec_band = 0;
    let mut coords = 0;
    for s in 0..spec.n_speakers {
        let utts: Vec<_> = corpus.utterances.iter().filter(|u| u.speaker_id == s).collect();
        let n: usize = utts.iter().map(|u| u.features.nrows()).sum();
        let mut sum = Array1::<f64>::zeros(d);
        let mut expected = Array1::<f64>::zeros(d);
        for u in &utts {
            sum += &u.features.sum_axis(Axis(0));
            expected.scaled_add(u.features.nrows() as f64, &lat.cell_mean(s, u.style_id));
        }
        let mean = sum / n as f64;
        expected /= n as f64;
        // Given the latents, what remains is frame noise with sd sigma / sqrt(n).
        let sd = spec.frame_noise / (n as f64).sqrt();
        for j in 0..d {
            let z = (mean[j] - expected[j]) / sd;
            assert!(z.abs() < 5.0, "speaker {s} coord {j}: z = {z}");
            z2.push(z * z);
        }
        // Against A mu_s alone, style offsets and interactions add variance too.
        let back = lat.mixing.t().dot(&mean);
        let mu = lat.speaker_means.row(s);
        let var_style = 1.25 * spec.style_shift_scale.powi(2) / spec.n_styles as f64;
        let sigma = (var_style + spec.frame_noise.powi(2) / n as f64).sqrt();
        for k in 0..spec.latent_dim {
            coords += 1;
            if (back[k] - mu[k]).abs() <= 3.0 * sigma {
                within_spec_band += 1;
            }
        }
    }
    let mean_z2 = z2.iter().sum::<f64>() / z2.len() as f64;
    assert!((mean_z2 - 1.0).abs() < 0.12, "mean squared z = {mean_z2}");
    assert!(within_spec_band as f64 >= 0.98 * coords as f64, "{within_spec_band}/{coords}");
}

#[test]
fn within_cell_covariance_converges_at_1e5_frames() {
    for noise in [1.0, 0.7] {
        let spec = CorpusSpec {
            n_speakers: 1,
            n_styles: 1,
            utts_per_speaker_style: 1,
            frames_per_utt: (100_000, 100_000),
            frame_noise: noise,
            seed: 4,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let x = &corpus.utterances[0].features;
        let centered = x - &x.mean_axis(Axis(0)).unwrap();
        let cov = centered.t().dot(&centered) / (x.nrows() - 1) as f64;
        let truth = Array2::<f64>::eye(spec.feature_dim) * noise * noise;
        let err = (&cov - &truth).mapv(|v| v * v).sum().sqrt();
        let scale = truth.mapv(|v| v * v).sum().sqrt();
        assert!(err / scale < 0.05, "relative error {}", err / scale);
    }
}

#[test]
fn generation_is_bit_identical_for_a_seed() {
    let spec = CorpusSpec {
        n_speakers: 6,
        ..CorpusSpec::default()
    };
    let a = generate_corpus(&spec).unwrap();
    let b = generate_corpus(&spec).unwrap();
    for (u, v) in a.utterances.iter().zip(&b.utterances) {
        assert!(u.features.iter().zip(v.features.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(a, b);
}

#[test]
fn default_grid_has_closed_form_trial_counts() {
    let spec = CorpusSpec::default();
    let mut corpus = generate_corpus(&spec).unwrap();
    let split = SplitSpec::default();
    split_corpus(&mut corpus, &split).unwrap();
    let entries = corpus
        .utterances
        .iter()
        .map(|u| EmbeddingEntry {
            key: u.key(),
            speaker_id: u.speaker_id,
            style_id: u.style_id,
            split: u.split,
            vector: u.features.mean_axis(Axis(0)).unwrap(),
        })
        .collect();
    let store = EmbeddingStore::new(entries).unwrap();
    let grid = build_trial_grid(&store).unwrap();
    assert_eq!(grid.len(), spec.n_styles * spec.n_styles);
    let n_eval = spec.n_speakers - split.train_speakers;
    let n_test = spec.utts_per_speaker_style / 2;
    for ((e, t), trials) in grid {
        let tar = trials.iter().filter(|x| x.is_target).count();
        let non = trials.len() - tar;
        assert_eq!(tar, n_eval * n_test, "condition ({e}, {t})");
        assert_eq!(non, n_eval * (n_eval - 1) * n_test, "condition ({e}, {t})");
    }
    let train = corpus.utterances.iter().filter(|u| u.split == Split::Train).count();
    assert_eq!(train, split.train_speakers * spec.n_styles * spec.utts_per_speaker_style);
}
