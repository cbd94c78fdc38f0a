//! Utterances, manifests, feature files, splitting, chunking and the
//! synthetic emission-model corpus generator.
//!
//! A manifest is a JSON Lines file with one utterance per line:
//!
//! ```text
//! {"id":"a-0001","features":"feats/a-0001.slf","frame_rate":100.0,"duration_s":0.42,"transcript":"ab","source":"labeled"}
//! ```
//!
//! Feature paths are relative to the manifest's directory. Feature files use
//! the `SLF1` layout: the 4-byte magic, `u32` frame count, `u32` feature
//! dimension (both little-endian), then row-major little-endian `f32` values.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::vocab::Vocabulary;

pub const DEFAULT_FRAME_RATE: f64 = 100.0;
pub const DEFAULT_MAX_CHUNK_S: f64 = 15.0;

const FEATURE_MAGIC: &[u8; 4] = b"SLF1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed manifest record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("utterance {id:?}: {message}")]
    FeatureMismatch { id: String, message: String },
    #[error("{path}: bad feature file: {message}")]
    BadFeatureFile { path: PathBuf, message: String },
    #[error("split needs at least 10 utterances, manifest {name:?} has {count}")]
    TooFewUtterances { name: String, count: usize },
    #[error("split ratios must be positive")]
    BadRatios,
    #[error("text {text:?} contains out-of-vocabulary character {ch:?}")]
    OutOfVocabulary { text: String, ch: char },
    #[error("invalid emission model: {0}")]
    BadEmissionSpec(String),
    #[error("utterance {id:?}: {message}")]
    InvalidUtterance { id: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Labeled,
    Unlabeled,
    Pseudo,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    Unsplit,
}

/// Row-major `frames × dims` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, data: Vec<f32>) -> Self {
        assert_eq!(frames * dims, data.len(), "feature buffer size");
        Self { frames, dims, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::new(
            end - start,
            self.dims,
            self.data[start * self.dims..end * self.dims].to_vec(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
            return Err("missing SLF1 header".into());
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != frames * dims * 4 {
            return Err(format!(
                "header declares {frames}x{dims} but body holds {} bytes",
                body.len()
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self::new(frames, dims, data))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|message| CorpusError::BadFeatureFile {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
    pub frame_rate: f64,
    pub duration_s: f64,
    pub transcript: Option<String>,
    pub source: Source,
    /// Feature file location relative to the manifest directory, if the
    /// utterance was loaded from or written to disk.
    pub feature_path: Option<String>,
}

impl Utterance {
    /// Builds an utterance whose duration is derived from its frame count.
    pub fn new(
        id: impl Into<String>,
        features: FeatureMatrix,
        frame_rate: f64,
        transcript: Option<String>,
        source: Source,
    ) -> Result<Self, CorpusError> {
        let duration_s = features.frames() as f64 / frame_rate;
        let u = Self {
            id: id.into(),
            features,
            frame_rate,
            duration_s,
            transcript,
            source,
            feature_path: None,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |message: String| CorpusError::InvalidUtterance {
            id: self.id.clone(),
            message,
        };
        if self.features.frames() == 0 || self.features.dims() == 0 {
            return Err(bad("features must have at least one frame and one dimension".into()));
        }
        if !(self.frame_rate > 0.0) {
            return Err(bad(format!("frame rate {} must be positive", self.frame_rate)));
        }
        let expected = (self.duration_s * self.frame_rate).round();
        if expected != self.features.frames() as f64 {
            return Err(CorpusError::FeatureMismatch {
                id: self.id.clone(),
                message: format!(
                    "duration {} s at {} fps implies {} frames, features have {}",
                    self.duration_s,
                    self.frame_rate,
                    expected,
                    self.features.frames()
                ),
            });
        }
        let unlabeled = self.source == Source::Unlabeled;
        if unlabeled == self.transcript.is_some() {
            return Err(bad(format!(
                "source {:?} {} a transcript",
                self.source,
                if unlabeled { "must not carry" } else { "requires" }
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.features.frames()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    features: String,
    frame_rate: f64,
    duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    source: Source,
}

impl Manifest {
    pub fn new(name: impl Into<String>, split: Split, utterances: Vec<Utterance>) -> Result<Self, CorpusError> {
        let m = Self {
            name: name.into(),
            split,
            utterances,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Feature dimension shared by every utterance, if any.
    pub fn feature_dims(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.dims())
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::with_capacity(self.utterances.len());
        let dims = self.feature_dims();
        for u in &self.utterances {
            if !seen.insert(u.id.as_str()) {
                return Err(CorpusError::DuplicateId(u.id.clone()));
            }
            u.validate()?;
            if Some(u.features.dims()) != dims {
                return Err(CorpusError::FeatureMismatch {
                    id: u.id.clone(),
                    message: format!(
                        "feature dimension {} differs from manifest dimension {}",
                        u.features.dims(),
                        dims.unwrap_or(0)
                    ),
                });
            }
        }
        Ok(())
    }

    /// Checks every transcript against the vocabulary.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), CorpusError> {
        for u in &self.utterances {
            if let Some(text) = &u.transcript {
                if let Some(ch) = text.chars().find(|&c| vocab.index_of(c).is_none()) {
                    return Err(CorpusError::OutOfVocabulary {
                        text: text.clone(),
                        ch,
                    });
                }
            }
        }
        Ok(())
    }

    /// Drops transcripts and marks every utterance unlabeled.
    pub fn into_unlabeled(mut self) -> Self {
        for u in &mut self.utterances {
            u.transcript = None;
            u.source = Source::Unlabeled;
        }
        self
    }
}

/// Loads a JSON Lines manifest. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(rec);
    }

    let mut seen = HashSet::with_capacity(records.len());
    for rec in &records {
        if !seen.insert(rec.id.as_str()) {
            return Err(CorpusError::DuplicateId(rec.id.clone()));
        }
    }

    let utterances = records
        .into_par_iter()
        .map(|rec| {
            let features = FeatureMatrix::read(&base.join(&rec.features))?;
            Ok(Utterance {
                id: rec.id,
                features,
                frame_rate: rec.frame_rate,
                duration_s: rec.duration_s,
                transcript: rec.transcript,
                source: rec.source,
                feature_path: Some(rec.features),
            })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;

    Manifest::new(name, Split::Unsplit, utterances)
}

/// Writes the manifest and every feature file. Utterances without a stored
/// feature path get `<manifest stem>_feats/<id>.slf`.
pub fn write_manifest(m: &Manifest, path: &Path) -> Result<(), CorpusError> {
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| m.name.clone());
    let mut out = String::new();
    for u in &m.utterances {
        let rel = u
            .feature_path
            .clone()
            .unwrap_or_else(|| format!("{stem}_feats/{}.slf", u.id));
        let feat_path = base.join(&rel);
        write_atomic(&feat_path, &u.features.to_bytes()).map_err(io_err(&feat_path))?;
        let rec = ManifestRecord {
            id: u.id.clone(),
            features: rel,
            frame_rate: u.frame_rate,
            duration_s: u.duration_s,
            transcript: u.transcript.clone(),
            source: u.source,
        };
        out.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(io_err(path))
}

/// Deterministic seeded partition into train/valid/test. Valid and test get
/// `floor(n * r / sum)` utterances each; the remainder goes to train. Each
/// part keeps the input order.
pub fn split_dataset(
    m: &Manifest,
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<(Manifest, Manifest, Manifest), CorpusError> {
    let (rt, rv, rs) = ratios;
    if rt == 0 || rv == 0 || rs == 0 {
        return Err(CorpusError::BadRatios);
    }
    let n = m.len();
    if n < 10 {
        return Err(CorpusError::TooFewUtterances {
            name: m.name.clone(),
            count: n,
        });
    }
    let total = (rt + rv + rs) as usize;
    let n_valid = n * rv as usize / total;
    let n_test = n * rs as usize / total;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assign = vec![Split::Train; n];
    for &i in &order[..n_valid] {
        assign[i] = Split::Valid;
    }
    for &i in &order[n_valid..n_valid + n_test] {
        assign[i] = Split::Test;
    }

    let part = |split: Split, suffix: &str| Manifest {
        name: format!("{}.{suffix}", m.name),
        split,
        utterances: m
            .utterances
            .iter()
            .zip(&assign)
            .filter(|(_, &s)| s == split)
            .map(|(u, _)| u.clone())
            .collect(),
    };
    Ok((
        part(Split::Train, "train"),
        part(Split::Valid, "valid"),
        part(Split::Test, "test"),
    ))
}

/// Splits an utterance into consecutive fixed-length chunks of at most
/// `max_s` seconds. Returns the utterance unchanged when it already fits.
/// Chunks are named `<id>-<k>` and carry no transcript.
pub fn chunk_utterance(u: &Utterance, max_s: f64) -> Vec<Utterance> {
    assert!(max_s > 0.0, "chunk length must be positive");
    // tolerate float noise in max_s * frame_rate, e.g. 15 * 100
    let max_frames = ((max_s * u.frame_rate) + 1e-9).floor().max(1.0) as usize;
    let total = u.num_frames();
    if total <= max_frames {
        return vec![u.clone()];
    }
    (0..total)
        .step_by(max_frames)
        .enumerate()
        .map(|(k, start)| {
            let end = (start + max_frames).min(total);
            let features = u.features.slice_rows(start, end);
            Utterance {
                id: format!("{}-{k}", u.id),
                duration_s: features.frames() as f64 / u.frame_rate,
                features,
                frame_rate: u.frame_rate,
                transcript: None,
                source: Source::Unlabeled,
                feature_path: None,
            }
        })
        .collect()
}

/// Applies [`chunk_utterance`] to every utterance of an unlabeled manifest.
pub fn chunk_manifest(m: &Manifest, max_s: f64) -> Manifest {
    Manifest {
        name: m.name.clone(),
        split: m.split,
        utterances: m
            .utterances
            .iter()
            .flat_map(|u| chunk_utterance(u, max_s))
            .collect(),
    }
}

/// Gaussian emission model: every character emits a run of frames around
/// its mean vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionModelSpec {
    pub means: BTreeMap<char, Vec<f64>>,
    pub noise_std: f64,
    pub frames_per_symbol: (usize, usize),
    pub rng_seed: u64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

fn default_frame_rate() -> f64 {
    DEFAULT_FRAME_RATE
}

impl EmissionModelSpec {
    /// Draws one standard-normal mean vector of `dims` entries per non-blank
    /// vocabulary character, scaled by `separation`.
    pub fn random_means(
        vocab: &Vocabulary,
        dims: usize,
        separation: f64,
        seed: u64,
    ) -> BTreeMap<char, Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vocab
            .chars()
            .iter()
            .map(|&c| {
                let mean = (0..dims)
                    .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (c, mean)
            })
            .collect()
    }

    pub fn dims(&self) -> usize {
        self.means.values().next().map_or(0, Vec::len)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), CorpusError> {
        let bad = |s: String| Err(CorpusError::BadEmissionSpec(s));
        let (lo, hi) = self.frames_per_symbol;
        if lo < 1 || hi < lo {
            return bad(format!("frames_per_symbol range [{lo}, {hi}] is invalid"));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be non-negative", self.noise_std));
        }
        if !(self.frame_rate > 0.0) {
            return bad(format!("frame_rate {} must be positive", self.frame_rate));
        }
        let dims = self.dims();
        if dims == 0 {
            return bad("mean vectors must be non-empty".into());
        }
        for &c in vocab.chars() {
            match self.means.get(&c) {
                None => return bad(format!("no mean vector for {c:?}")),
                Some(m) if m.len() != dims => {
                    return bad(format!("mean vector for {c:?} has {} dims, expected {dims}", m.len()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// One utterance per text; ids are `<name>-<index>` zero-padded to five
/// digits. Each utterance draws from its own ChaCha stream, so the output
/// depends only on `(texts, spec)`.
pub fn synthesize_corpus(
    name: &str,
    texts: &[String],
    vocab: &Vocabulary,
    spec: &EmissionModelSpec,
    source: Source,
) -> Result<Manifest, CorpusError> {
    spec.validate(vocab)?;
    for text in texts {
        if let Some(ch) = text.chars().find(|&c| vocab.index_of(c).is_none()) {
            return Err(CorpusError::OutOfVocabulary {
                text: text.clone(),
                ch,
            });
        }
    }
    let dims = spec.dims();
    let (lo, hi) = spec.frames_per_symbol;
    let utterances = texts
        .par_iter()
        .enumerate()
        .map(|(i, text)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
            rng.set_stream(i as u64);
            let mut data = Vec::new();
            for c in text.chars() {
                let mean = &spec.means[&c];
                let k = rng.gen_range(lo..=hi);
                for _ in 0..k {
                    for &m in mean {
                        let noise: f64 = rng.sample(StandardNormal);
                        data.push((m + spec.noise_std * noise) as f32);
                    }
                }
            }
            if data.is_empty() {
                // an empty text still needs one frame; use a zero vector
                data.resize(dims, 0.0);
            }
            let frames = data.len() / dims;
            let transcript = (source != Source::Unlabeled).then(|| text.clone());
            Utterance::new(
                format!("{name}-{i:05}"),
                FeatureMatrix::new(frames, dims, data),
                spec.frame_rate,
                transcript,
                source,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Manifest::new(name, Split::Unsplit, utterances)
}
