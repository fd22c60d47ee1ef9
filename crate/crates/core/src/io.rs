//! On-disk formats: the binary matrix archive (features, embeddings,
//! checkpoints), trial lists and score files.
//!
//! Archive layout, all integers little-endian `u64`:
//!
//! ```text
//! magic "CLLRARC\0" | version | metadata length | metadata (UTF-8 JSON)
//! | matrix count | per matrix: rows, cols, rows*cols f64 (row-major, LE)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scoring::{EmbeddingEntry, EmbeddingStore, ScoreRecord, Trial};
use crate::synthdata::{Corpus, CorpusSpec, Split, Utterance};

pub const MAGIC: &[u8; 8] = b"CLLRARC\0";
pub const VERSION: u64 = 1;

/// JSON metadata plus an ordered list of matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub metadata: String,
    pub matrices: Vec<Array2<f64>>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.matrices.iter().map(|m| 16 + 8 * m.len()).sum();
        let mut out = Vec::with_capacity(32 + self.metadata.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.matrices.len() as u64).to_le_bytes());
        for m in &self.matrices {
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure_format(r.take(8)? == MAGIC, "not an archive (bad magic)")?;
        let version = r.u64()?;
        ensure_format(version == VERSION, &format!("unsupported archive version {version}"))?;
        let meta_len = r.len()?;
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("archive metadata is not UTF-8".into()))?
            .to_owned();
        let count = r.len()?;
        let mut matrices = Vec::new();
        for _ in 0..count {
            let (rows, cols) = (r.len()?, r.len()?);
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format("truncated archive".into()))?;
            let data = r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            matrices.push(Array2::from_shape_vec((rows, cols), data).expect("sized above"));
        }
        ensure_format(r.remaining() == 0, "trailing bytes after archive")?;
        Ok(Self { metadata, matrices })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn ensure_format(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(msg.to_owned()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure_format(n <= self.remaining(), "truncated archive")?;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn meta<T: DeserializeOwned>(archive: &Archive, kind: &str) -> Result<T> {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    let k: Kind = from_json(&archive.metadata)?;
    ensure_format(
        k.kind == kind,
        &format!("expected a {kind} archive, found {}", k.kind),
    )?;
    from_json(&archive.metadata)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceMeta {
    speaker: usize,
    style: usize,
    index: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusMeta {
    kind: String,
    spec: CorpusSpec,
    utterances: Vec<UtteranceMeta>,
}

pub fn corpus_to_archive(corpus: &Corpus) -> Result<Archive> {
    let meta = CorpusMeta {
        kind: "features".into(),
        spec: corpus.spec.clone(),
        utterances: corpus
            .utterances
            .iter()
            .map(|u| UtteranceMeta {
                speaker: u.speaker_id,
                style: u.style_id,
                index: u.index,
                split: u.split,
            })
            .collect(),
    };
    Ok(Archive {
        metadata: serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?,
        matrices: corpus.utterances.iter().map(|u| u.features.clone()).collect(),
    })
}

pub fn corpus_from_archive(archive: Archive) -> Result<Corpus> {
    let meta: CorpusMeta = meta(&archive, "features")?;
    ensure_format(
        meta.utterances.len() == archive.matrices.len(),
        "utterance metadata and matrix counts differ",
    )?;
    let utterances = meta
        .utterances
        .into_iter()
        .zip(archive.matrices)
        .map(|(m, features)| Utterance {
            features,
            speaker_id: m.speaker,
            style_id: m.style,
            index: m.index,
            split: m.split,
        })
        .collect();
    Ok(Corpus {
        spec: meta.spec,
        utterances,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    corpus_to_archive(corpus)?.write(path)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    corpus_from_archive(Archive::read(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    key: String,
    speaker: usize,
    style: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingMeta {
    kind: String,
    entries: Vec<EntryMeta>,
}

/// Embeddings are stored as one `n x dim` matrix.
pub fn embeddings_to_archive(store: &EmbeddingStore) -> Result<Archive> {
    let entries = store.entries();
    let dim = entries.first().map_or(0, |e| e.vector.len());
    ensure!(
        entries.iter().all(|e| e.vector.len() == dim),
        "embeddings have differing dimensions"
    );
    let mut matrix = Array2::zeros((entries.len(), dim));
    for (mut row, e) in matrix.rows_mut().into_iter().zip(entries) {
        row.assign(&e.vector);
    }
    let meta = EmbeddingMeta {
        kind: "embeddings".into(),
        entries: entries
            .iter()
            .map(|e| EntryMeta {
                key: e.key.clone(),
                speaker: e.speaker_id,
                style: e.style_id,
                split: e.split,
            })
            .collect(),
    };
    Ok(Archive {
        metadata: serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?,
        matrices: vec![matrix],
    })
}

pub fn embeddings_from_archive(archive: Archive) -> Result<EmbeddingStore> {
    let meta: EmbeddingMeta = meta(&archive, "embeddings")?;
    ensure_format(archive.matrices.len() == 1, "embedding archive needs one matrix")?;
    let matrix = &archive.matrices[0];
    ensure_format(
        matrix.nrows() == meta.entries.len(),
        "embedding metadata and matrix rows differ",
    )?;
    let entries = meta
        .entries
        .into_iter()
        .zip(matrix.rows())
        .map(|(m, row)| EmbeddingEntry {
            key: m.key,
            speaker_id: m.speaker,
            style_id: m.style,
            split: m.split,
            vector: row.to_owned(),
        })
        .collect();
    EmbeddingStore::new(entries)
}

pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    embeddings_to_archive(store)?.write(path)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    embeddings_from_archive(Archive::read(path)?)
}

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Optimizer steps taken.
    pub step: u64,
    /// Corpus speaker id of each classifier output.
    pub speaker_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    model: ModelConfig,
    tensors: Vec<String>,
    step: u64,
    speaker_ids: Vec<usize>,
}

/// Tensors are stored flat, one `1 x len` matrix each, named in the metadata.
pub fn checkpoint_to_archive(ckpt: &Checkpoint) -> Result<Archive> {
    ckpt.params.check_config(&ckpt.config)?;
    let tensors = ckpt.params.named_tensors();
    let meta = CheckpointMeta {
        kind: "checkpoint".into(),
        model: ckpt.config.clone(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
        step: ckpt.step,
        speaker_ids: ckpt.speaker_ids.clone(),
    };
    Ok(Archive {
        metadata: serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?,
        matrices: tensors
            .into_iter()
            .map(|(_, t)| Array1::from(t.to_vec()).insert_axis(ndarray::Axis(0)))
            .collect(),
    })
}

pub fn checkpoint_from_archive(archive: Archive) -> Result<Checkpoint> {
    let meta: CheckpointMeta = meta(&archive, "checkpoint")?;
    meta.model.validate()?;
    let mut params = ModelParams::zeros(&meta.model)?;
    let expected: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let found: Vec<(String, usize)> = meta
        .tensors
        .iter()
        .cloned()
        .zip(archive.matrices.iter().map(|m| m.len()))
        .collect();
    ensure_format(
        meta.tensors.len() == archive.matrices.len() && expected == found,
        "checkpoint tensors do not match the model config",
    )?;
    for (dst, m) in params.tensors_mut().into_iter().zip(&archive.matrices) {
        for (d, s) in dst.iter_mut().zip(m.iter()) {
            *d = *s;
        }
    }
    ensure_format(
        meta.speaker_ids.len() == meta.model.n_speakers,
        "checkpoint speaker list does not match the classifier",
    )?;
    Ok(Checkpoint {
        config: meta.model,
        params,
        step: meta.step,
        speaker_ids: meta.speaker_ids,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    checkpoint_to_archive(ckpt)?.write(path)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_archive(Archive::read(path)?)
}

fn label(is_target: bool) -> &'static str {
    if is_target {
        "target"
    } else {
        "nontarget"
    }
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        writeln!(s, "{} {} {}", t.enroll_id, t.test_utt_id, label(t.is_target)).expect("string write");
    }
    s
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let is_target = match f.as_slice() {
                [_, _, "target"] => true,
                [_, _, "nontarget"] => false,
                _ => {
                    return Err(Error::Format(format!(
                        "trial list line {}: expected `<enroll> <test> target|nontarget`",
                        i + 1
                    )))
                }
            };
            Ok(Trial {
                enroll_id: f[0].to_owned(),
                test_utt_id: f[1].to_owned(),
                is_target,
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    write_bytes(path, format_trials(trials).as_bytes())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll_id: String,
    pub test_utt_id: String,
    pub score: f64,
}

impl From<&ScoreRecord> for ScoreLine {
    fn from(r: &ScoreRecord) -> Self {
        Self {
            enroll_id: r.enroll_id.clone(),
            test_utt_id: r.test_utt_id.clone(),
            score: r.score,
        }
    }
}

/// Scores are printed with 17 significant digits, enough to round-trip any f64.
pub fn format_scores(lines: &[ScoreLine]) -> String {
    let mut s = String::new();
    for l in lines {
        writeln!(s, "{} {} {:.16e}", l.enroll_id, l.test_utt_id, l.score).expect("string write");
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Format(format!("score file line {}: expected `<enroll> <test> <score>`", i + 1));
            let [e, t, s] = f.as_slice() else {
                return Err(bad());
            };
            let score: f64 = s.parse().map_err(|_| bad())?;
            ensure_format(!score.is_nan(), &format!("score file line {}: NaN score", i + 1))?;
            Ok(ScoreLine {
                enroll_id: (*e).to_owned(),
                test_utt_id: (*t).to_owned(),
                score,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, lines: &[ScoreLine]) -> Result<()> {
    write_bytes(path, format_scores(lines).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    parse_scores(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
