//! Windowed feed-forward acoustic model with a CTC output layer, Adam, the
//! warmup/linear-decay learning-rate schedule, and `SLM1` checkpoints.
//!
//! Each output frame sees the `2c + 1` surrounding input frames (zero
//! padded at the edges), passes them through one `tanh` layer and a linear
//! layer over the vocabulary, and ends in a log-softmax.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FeatureMatrix, Utterance};
use crate::ctc::{self, CtcError, LogProbMatrix};
use crate::vocab::Vocabulary;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SLM1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("features have {got} dimensions, model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("utterance {0:?} has no transcript")]
    MissingTranscript(String),
    #[error("utterance {id:?}: character {ch:?} is not in the vocabulary")]
    OutOfVocabulary { id: String, ch: char },
    #[error("no utterance in the training set has a feasible CTC alignment")]
    AllInfeasible,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_peak_lr() -> f64 {
    3e-4
}
fn default_warmup_fraction() -> f64 {
    0.10
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    5.0
}
fn default_context() -> usize {
    2
}
fn default_hidden() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub freeze_encoder: bool,
    #[serde(default)]
    pub rng_seed: u64,
    /// Frames of context on each side of the centre frame.
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            peak_lr: default_peak_lr(),
            warmup_fraction: default_warmup_fraction(),
            betas: default_betas(),
            epsilon: default_epsilon(),
            grad_clip_norm: default_clip(),
            freeze_encoder: false,
            rng_seed: 0,
            context: default_context(),
            hidden: default_hidden(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::BadConfig(s.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie strictly between 0 and 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub feature_dims: usize,
    pub context: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn window(&self) -> usize {
        2 * self.context + 1
    }

    pub fn input_dims(&self) -> usize {
        self.feature_dims * self.window()
    }
}

/// Weights are row-major: `w1[i * hidden + j]`, `w2[j * classes + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            shape,
            w1: vec![0.0; shape.input_dims() * shape.hidden],
            b1: vec![0.0; shape.hidden],
            w2: vec![0.0; shape.hidden * shape.classes],
            b2: vec![0.0; shape.classes],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init(shape: ModelShape, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let a1 = 1.0 / (shape.input_dims() as f64).sqrt();
        let a2 = 1.0 / (shape.hidden as f64).sqrt();
        for w in p.w1.iter_mut().chain(p.b1.iter_mut()) {
            *w = rng.gen_range(-a1..a1);
        }
        for w in p.w2.iter_mut().chain(p.b2.iter_mut()) {
            *w = rng.gen_range(-a2..a2);
        }
        p
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    fn scale(&mut self, k: f64) {
        for a in self.iter_mut() {
            *a *= k;
        }
    }

    fn zero_encoder(&mut self) {
        self.w1.iter_mut().chain(self.b1.iter_mut()).for_each(|g| *g = 0.0);
    }
}

struct ForwardCache {
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    log_probs: LogProbMatrix,
}

fn check_dims(p: &ModelParams, features: &FeatureMatrix) -> Result<(), ModelError> {
    if features.dims() != p.shape.feature_dims {
        return Err(ModelError::DimensionMismatch {
            got: features.dims(),
            expected: p.shape.feature_dims,
        });
    }
    Ok(())
}

fn forward_cached(p: &ModelParams, features: &FeatureMatrix) -> ForwardCache {
    let s = p.shape;
    let frames = features.frames();
    let (d_in, h, v) = (s.input_dims(), s.hidden, s.classes);
    let c = s.context as isize;

    let mut inputs = vec![0.0; frames * d_in];
    for t in 0..frames {
        let x = &mut inputs[t * d_in..(t + 1) * d_in];
        for (k, off) in (-c..=c).enumerate() {
            let src = t as isize + off;
            if src >= 0 && (src as usize) < frames {
                let row = features.row(src as usize);
                for (dst, &val) in x[k * s.feature_dims..(k + 1) * s.feature_dims].iter_mut().zip(row) {
                    *dst = val as f64;
                }
            }
        }
    }

    let mut hidden = vec![0.0; frames * h];
    let mut logits = vec![0.0; frames * v];
    for t in 0..frames {
        let x = &inputs[t * d_in..(t + 1) * d_in];
        let a = &mut hidden[t * h..(t + 1) * h];
        a.copy_from_slice(&p.b1);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (aj, &w) in a.iter_mut().zip(&p.w1[i * h..(i + 1) * h]) {
                *aj += xi * w;
            }
        }
        for aj in a.iter_mut() {
            *aj = aj.tanh();
        }
        let z = &mut logits[t * v..(t + 1) * v];
        z.copy_from_slice(&p.b2);
        for (j, &hj) in a.iter().enumerate() {
            for (zu, &w) in z.iter_mut().zip(&p.w2[j * v..(j + 1) * v]) {
                *zu += hj * w;
            }
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|&zu| (zu - max).exp()).sum::<f64>().ln();
        for zu in z.iter_mut() {
            *zu -= lse;
        }
    }
    ForwardCache {
        inputs,
        hidden,
        log_probs: LogProbMatrix::new(frames, v, logits),
    }
}

/// Per-frame log-softmax outputs.
pub fn forward(p: &ModelParams, features: &FeatureMatrix) -> Result<LogProbMatrix, ModelError> {
    check_dims(p, features)?;
    Ok(forward_cached(p, features).log_probs)
}

/// CTC loss and parameter gradients for one utterance.
pub fn backward(
    p: &ModelParams,
    features: &FeatureMatrix,
    target: &[usize],
    freeze_encoder: bool,
) -> Result<(f64, ModelParams), ModelError> {
    check_dims(p, features)?;
    let s = p.shape;
    let (d_in, h, v) = (s.input_dims(), s.hidden, s.classes);
    let cache = forward_cached(p, features);
    let (loss, g_lp) = ctc::ctc_loss_and_grad_indices(&cache.log_probs, target)?;

    let mut grads = ModelParams::zeros(s);
    let mut dz = vec![0.0; v];
    let mut dh = vec![0.0; h];
    for t in 0..features.frames() {
        let g = &g_lp[t * v..(t + 1) * v];
        let lp = cache.log_probs.row(t);
        let g_sum: f64 = g.iter().sum();
        for u in 0..v {
            dz[u] = g[u] - lp[u].exp() * g_sum;
        }
        let hid = &cache.hidden[t * h..(t + 1) * h];
        for (j, &hj) in hid.iter().enumerate() {
            let row = &mut grads.w2[j * v..(j + 1) * v];
            let w_row = &p.w2[j * v..(j + 1) * v];
            let mut acc = 0.0;
            for u in 0..v {
                row[u] += hj * dz[u];
                acc += w_row[u] * dz[u];
            }
            dh[j] = acc * (1.0 - hj * hj);
        }
        for (b, d) in grads.b2.iter_mut().zip(&dz) {
            *b += d;
        }
        if freeze_encoder {
            continue;
        }
        for (b, d) in grads.b1.iter_mut().zip(&dh) {
            *b += d;
        }
        let x = &cache.inputs[t * d_in..(t + 1) * d_in];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (gw, &d) in grads.w1[i * h..(i + 1) * h].iter_mut().zip(&dh) {
                *gw += xi * d;
            }
        }
    }
    Ok((loss, grads))
}

/// Linear warmup from 0 to `peak_lr` over the first
/// `ceil(warmup_fraction * total_steps)` steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    // the epsilon keeps e.g. 0.1 * 70 = 7.000000000000001 from rounding up to 8
    let warmup = ((cfg.warmup_fraction * total_steps as f64) - 1e-9).ceil().max(1.0) as usize;
    if step <= warmup {
        cfg.peak_lr * (step as f64 / warmup as f64)
    } else {
        cfg.peak_lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(shape: ModelShape) -> Self {
        Self {
            m: ModelParams::zeros(shape),
            v: ModelParams::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update after clipping `grads` to a global norm
/// of `cfg.grad_clip_norm`.
pub fn adam_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &ModelParams,
    lr: f64,
    cfg: &TrainConfig,
) {
    let norm = grads.global_norm();
    let clip = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((w, m), v), &g) in params
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
        .zip(grads.iter())
    {
        let g = g * clip;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
    /// Utterance visits skipped because no CTC alignment fits.
    pub skipped: usize,
}

struct Example<'a> {
    features: &'a FeatureMatrix,
    target: Vec<usize>,
}

fn prepare<'a>(data: &'a [Utterance], vocab: &Vocabulary, dims: usize) -> Result<Vec<Example<'a>>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    data.iter()
        .map(|u| {
            let text = u
                .transcript
                .as_deref()
                .ok_or_else(|| ModelError::MissingTranscript(u.id.clone()))?;
            let target = text
                .chars()
                .map(|c| {
                    vocab.index_of(c).ok_or_else(|| ModelError::OutOfVocabulary {
                        id: u.id.clone(),
                        ch: c,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if u.features.dims() != dims {
                return Err(ModelError::DimensionMismatch {
                    got: u.features.dims(),
                    expected: dims,
                });
            }
            Ok(Example {
                features: &u.features,
                target,
            })
        })
        .collect()
}

/// Fresh seeded initialization followed by [`train_from`].
pub fn train(data: &[Utterance], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    let dims = data.first().ok_or(ModelError::EmptyTrainingSet)?.features.dims();
    let init = initial_params(dims, vocab, cfg);
    train_from(init, data, vocab, cfg)
}

/// Parameters `train` starts from for this feature dimension and config.
pub fn initial_params(feature_dims: usize, vocab: &Vocabulary, cfg: &TrainConfig) -> ModelParams {
    let shape = ModelShape {
        feature_dims,
        context: cfg.context,
        hidden: cfg.hidden,
        classes: vocab.size(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    ModelParams::init(shape, &mut rng)
}

/// Trains starting from `init`. Shuffling uses a ChaCha stream seeded by
/// `cfg.rng_seed`; each batch gradient is the mean over its feasible
/// utterances, reduced in batch order, so results are bit-reproducible.
pub fn train_from(
    init: ModelParams,
    data: &[Utterance],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if init.shape.classes != vocab.size() {
        return Err(ModelError::BadConfig(format!(
            "model has {} classes, vocabulary has {}",
            init.shape.classes,
            vocab.size()
        )));
    }
    let examples = prepare(data, vocab, init.shape.feature_dims)?;
    if examples
        .iter()
        .all(|e| ctc::min_frames(&e.target) > e.features.frames())
    {
        return Err(ModelError::AllInfeasible);
    }

    let mut params = init;
    let mut opt = OptimizerState::new(params.shape);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1);
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    let mut step = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results: Vec<Option<(f64, ModelParams)>> = batch
                .par_iter()
                .map(|&i| {
                    let e = &examples[i];
                    match backward(&params, e.features, &e.target, cfg.freeze_encoder) {
                        Ok(r) => Some(r),
                        Err(ModelError::Ctc(CtcError::NoValidAlignment { .. })) => None,
                        Err(e) => panic!("unexpected backward failure: {e}"),
                    }
                })
                .collect();
            let mut total: Option<ModelParams> = None;
            let mut n = 0usize;
            for r in results {
                match r {
                    Some((loss, g)) => {
                        loss_sum += loss;
                        loss_count += 1;
                        n += 1;
                        match &mut total {
                            Some(acc) => acc.add_assign(&g),
                            None => total = Some(g),
                        }
                    }
                    None => skipped += 1,
                }
            }
            if let Some(mut g) = total {
                g.scale(1.0 / n as f64);
                if cfg.freeze_encoder {
                    g.zero_encoder();
                }
                adam_step(&mut params, &mut opt, &g, lr_at(step, total_steps, cfg), cfg);
            }
        }
        epoch_losses.push(if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            f64::NAN
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} utterance visits with no valid CTC alignment");
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        skipped,
    })
}

/// A trained model together with what is needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub train_cfg: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    vocab: Vocabulary,
    shape: ModelShape,
    train_cfg: TrainConfig,
}

impl Checkpoint {
    /// `SLM1` layout: magic, `u32` version, `u32` header length, JSON header
    /// (vocabulary, shape, training config), then w1, b1, w2, b2 each as
    /// `u32 rows, u32 cols` followed by little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            vocab: self.vocab.clone(),
            shape: self.params.shape,
            train_cfg: self.train_cfg.clone(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (t, (rows, cols)) in self.params.tensors().iter().zip(tensor_dims(&self.params.shape)) {
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |s: String| ModelError::BadCheckpoint(s);
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if cur.len() < n {
                return Err(ModelError::BadCheckpoint("unexpected end of file".into()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("missing SLM1 magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(take(len)?).map_err(|e| bad(format!("header: {e}")))?;
        let shape = header.shape;
        if shape.classes != header.vocab.size() {
            return Err(bad(format!(
                "model has {} classes, vocabulary has {}",
                shape.classes,
                header.vocab.size()
            )));
        }
        let mut params = ModelParams::zeros(shape);
        for (t, (rows, cols)) in params.tensors_mut().into_iter().zip(tensor_dims(&shape)) {
            let r = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let c = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if (r, c) != (rows, cols) {
                return Err(bad(format!("tensor is {r}x{c}, header implies {rows}x{cols}")));
            }
            let raw = take(8 * r * c)?;
            for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if !cur.is_empty() {
            return Err(bad(format!("{} trailing bytes", cur.len())));
        }
        Ok(Self {
            params,
            vocab: header.vocab,
            train_cfg: header.train_cfg,
        })
    }

    /// Rejects a checkpoint whose vocabulary or input size differs.
    pub fn check_compatible(&self, vocab: &Vocabulary, feature_dims: usize) -> Result<(), ModelError> {
        if &self.vocab != vocab {
            return Err(ModelError::BadCheckpoint("vocabulary differs from the configured one".into()));
        }
        if self.params.shape.feature_dims != feature_dims {
            return Err(ModelError::DimensionMismatch {
                got: feature_dims,
                expected: self.params.shape.feature_dims,
            });
        }
        Ok(())
    }
}

fn tensor_dims(s: &ModelShape) -> [(usize, usize); 4] {
    [
        (s.input_dims(), s.hidden),
        (1, s.hidden),
        (s.hidden, s.classes),
        (1, s.classes),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmissionModelSpec, Source};

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::new(" a".chars()).unwrap()
    }

    fn tiny_shape() -> ModelShape {
        ModelShape {
            feature_dims: 2,
            context: 1,
            hidden: 3,
            classes: 3,
        }
    }

    fn random_features(rng: &mut impl Rng, frames: usize, dims: usize) -> FeatureMatrix {
        FeatureMatrix::new(frames, dims, (0..frames * dims).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale < 1e-8 {
            (a - b).abs()
        } else {
            (a - b).abs() / scale
        }
    }

    #[test]
    fn forward_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(tiny_shape(), &mut rng);
        let f = random_features(&mut rng, 6, 2);
        let lp = forward(&p, &f).unwrap();
        assert!(lp.max_row_deviation() < 1e-6);
        assert_eq!(lp, forward(&p, &f).unwrap());
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = ModelParams::zeros(tiny_shape());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp = forward(&p, &random_features(&mut rng, 4, 2)).unwrap();
        for &x in lp.as_slice() {
            assert!((x - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let p = ModelParams::zeros(tiny_shape());
        let f = FeatureMatrix::new(2, 3, vec![0.0; 6]);
        assert!(matches!(forward(&p, &f), Err(ModelError::DimensionMismatch { got: 3, expected: 2 })));
    }

    #[test]
    fn backward_loss_matches_ctc_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(tiny_shape(), &mut rng);
        let f = random_features(&mut rng, 4, 2);
        let (loss, _) = backward(&p, &f, &[2, 1], false).unwrap();
        let direct = ctc::ctc_log_loss(&forward(&p, &f).unwrap(), "a ", &tiny_vocab()).unwrap();
        assert_eq!(loss, direct);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let shape = tiny_shape();
            let p = ModelParams::init(shape, &mut rng);
            let f = random_features(&mut rng, 4, 2);
            let target: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..3)).collect();
            let (_, grads) = backward(&p, &f, &target, false).unwrap();
            let loss_at = |q: &ModelParams| {
                ctc::ctc_loss_indices(&forward(q, &f).unwrap(), &target).unwrap()
            };
            let analytic: Vec<f64> = grads.iter().copied().collect();
            let mut worst = 0.0f64;
            for k in 0..p.num_params() {
                let mut plus = p.clone();
                *plus.iter_mut().nth(k).unwrap() += h;
                let mut minus = p.clone();
                *minus.iter_mut().nth(k).unwrap() -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                worst = worst.max(relative_error(analytic[k], numeric));
            }
            assert!(worst <= 1e-4, "trial {trial}: worst relative error {worst}");
        }
    }

    #[test]
    fn frozen_encoder_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(tiny_shape(), &mut rng);
        let f = random_features(&mut rng, 4, 2);
        let (_, g) = backward(&p, &f, &[2], true).unwrap();
        assert!(g.w1.iter().chain(&g.b1).all(|&x| x == 0.0));
        assert!(g.w2.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn schedule_anchor_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg), 0.0);
        assert_eq!(lr_at(100, 1000, &cfg), 3e-4);
        assert_eq!(lr_at(1000, 1000, &cfg), 0.0);
        assert!((lr_at(50, 1000, &cfg) - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(550, 1000, &cfg) - 1.5e-4).abs() < 1e-18);
        // 0.1 * 70 is not exactly 7 in floating point
        assert_eq!(lr_at(7, 70, &cfg), 3e-4);
    }

    #[test]
    fn schedule_peaks_once_and_is_continuous() {
        let cfg = TrainConfig::default();
        for total in [3usize, 10, 70, 333] {
            let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &cfg)).collect();
            let peak = lrs.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, cfg.peak_lr);
            let argmax = lrs.iter().position(|&x| x == peak).unwrap();
            assert!(lrs[..argmax].windows(2).all(|w| w[0] < w[1]));
            assert!(lrs[argmax..].windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn first_adam_step_by_hand() {
        let shape = ModelShape { feature_dims: 1, context: 0, hidden: 1, classes: 1 };
        let mut p = ModelParams::zeros(shape);
        p.w1[0] = 1.0;
        let mut g = ModelParams::zeros(shape);
        g.w1[0] = 2.0;
        let mut st = OptimizerState::new(shape);
        adam_step(&mut p, &mut st, &g, 0.1, &TrainConfig::default());
        // m_hat = 2, v_hat = 4
        let want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.w1[0] - want).abs() < 1e-12);
        assert!((p.w1[0] - 0.9).abs() < 1e-8);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ModelParams::init(tiny_shape(), &mut rng);
        let before = p.clone();
        let mut st = OptimizerState::new(tiny_shape());
        adam_step(&mut p, &mut st, &ModelParams::zeros(tiny_shape()), 0.1, &TrainConfig::default());
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn clipping_halves_norm_ten_gradient() {
        let shape = ModelShape { feature_dims: 1, context: 0, hidden: 1, classes: 1 };
        let mut g = ModelParams::zeros(shape);
        g.w1[0] = 6.0;
        g.b1[0] = 8.0;
        assert_eq!(g.global_norm(), 10.0);
        let mut p = ModelParams::zeros(shape);
        let mut st = OptimizerState::new(shape);
        adam_step(&mut p, &mut st, &g, 0.1, &TrainConfig::default());
        // first moment holds (1 - beta1) * clipped gradient
        assert!((st.m.w1[0] - 0.1 * 3.0).abs() < 1e-15);
        assert!((st.m.b1[0] - 0.1 * 4.0).abs() < 1e-15);
    }

    fn toy_data(n: usize, noise: f64) -> (Vocabulary, Vec<Utterance>) {
        let vocab = Vocabulary::new(" ab".chars()).unwrap();
        let spec = EmissionModelSpec {
            means: EmissionModelSpec::random_means(&vocab, 3, 1.5, 1),
            noise_std: noise,
            frames_per_symbol: (2, 3),
            rng_seed: 2,
            frame_rate: 100.0,
        };
        let texts: Vec<String> = ["ab", "ba ab", "a b", "bab", "ab ba"].iter().cycle().take(n).map(|s| s.to_string()).collect();
        let m = crate::corpus::synthesize_corpus("t", &texts, &vocab, &spec, Source::Synthetic).unwrap();
        (vocab, m.utterances)
    }

    #[test]
    fn overfits_five_utterances() {
        let (vocab, data) = toy_data(5, 0.2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 5,
            peak_lr: 0.01,
            hidden: 32,
            rng_seed: 7,
            ..TrainConfig::default()
        };
        let out = train(&data, &vocab, &cfg).unwrap();
        let first = out.epoch_losses[0];
        let last = *out.epoch_losses.last().unwrap();
        assert!(last < 0.1 * first, "loss went from {first} to {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let (vocab, data) = toy_data(12, 0.5);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, peak_lr: 0.01, hidden: 8, rng_seed: 3, ..TrainConfig::default() };
        let a = train(&data, &vocab, &cfg).unwrap();
        let b = train(&data, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
        let bytes = |o: &TrainOutcome| Checkpoint { params: o.params.clone(), vocab: vocab.clone(), train_cfg: cfg.clone() }.to_bytes();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn frozen_encoder_keeps_initial_layer() {
        let (vocab, data) = toy_data(8, 0.5);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, peak_lr: 0.01, hidden: 8, freeze_encoder: true, ..TrainConfig::default() };
        let init = initial_params(3, &vocab, &cfg);
        let out = train(&data, &vocab, &cfg).unwrap();
        assert_eq!(out.params.w1, init.w1);
        assert_eq!(out.params.b1, init.b1);
        assert_ne!(out.params.w2, init.w2);
    }

    #[test]
    fn infeasible_utterances_are_skipped() {
        let (vocab, mut data) = toy_data(4, 0.5);
        data[0].transcript = Some("abababababababababababababab".into());
        let cfg = TrainConfig { epochs: 2, batch_size: 2, peak_lr: 0.01, hidden: 4, ..TrainConfig::default() };
        let out = train(&data, &vocab, &cfg).unwrap();
        assert_eq!(out.skipped, 2);
        for u in &mut data {
            u.transcript = Some("ab".repeat(40));
        }
        assert!(matches!(train(&data, &vocab, &cfg), Err(ModelError::AllInfeasible)));
    }

    #[test]
    fn training_input_errors() {
        let vocab = tiny_vocab();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&[], &vocab, &cfg), Err(ModelError::EmptyTrainingSet)));
        let (_, data) = toy_data(2, 0.1);
        // 'b' is not in the tiny vocabulary
        assert!(matches!(train(&data, &vocab, &cfg), Err(ModelError::OutOfVocabulary { ch: 'b', .. })));
        let bad = TrainConfig { warmup_fraction: 1.0, ..TrainConfig::default() };
        assert!(matches!(train(&data, &vocab, &bad), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vocab = tiny_vocab();
        let ck = Checkpoint {
            params: ModelParams::init(tiny_shape(), &mut rng),
            vocab: vocab.clone(),
            train_cfg: TrainConfig::default(),
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SLM1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert!(back.check_compatible(&vocab, 2).is_ok());
        assert!(back.check_compatible(&vocab, 5).is_err());
        assert!(back.check_compatible(&Vocabulary::new(" b".chars()).unwrap(), 2).is_err());

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        // corrupt the first tensor's row count
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut corrupt = bytes.clone();
        corrupt[12 + header_len] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(ModelError::BadCheckpoint(_))));
    }
}
