//! Connectionist temporal classification: collapse, forward loss,
//! forward–backward gradient and best-path decoding.
//!
//! Everything runs in natural-log space. Impossible events are represented
//! by [`LOG_ZERO`] rather than `-inf`.

use thiserror::Error;

use crate::vocab::{Vocabulary, BLANK};

/// Log-domain zero. Anything at or below half of it counts as impossible.
pub const LOG_ZERO: f64 = -1e30;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("no valid alignment: target needs {required} frames, input has {frames}")]
    NoValidAlignment { required: usize, frames: usize },
    #[error("target character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),
    #[error("log-prob matrix has {got} classes, vocabulary has {expected}")]
    ClassMismatch { got: usize, expected: usize },
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO * 0.5 {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Row-major `frames × classes` matrix of per-frame natural-log probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbMatrix {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogProbMatrix {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Self {
        assert_eq!(frames * classes, data.len(), "log-prob buffer size");
        let data = data.into_iter().map(|v| v.max(LOG_ZERO)).collect();
        Self { frames, classes, data }
    }

    /// Builds a matrix from linear probabilities.
    pub fn from_probs(frames: usize, classes: usize, probs: &[f64]) -> Self {
        Self::new(
            frames,
            classes,
            probs.iter().map(|&p| if p > 0.0 { p.ln() } else { LOG_ZERO }).collect(),
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize) -> f64 {
        self.data[t * self.classes + v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest deviation of a row's log-sum-exp from zero.
    pub fn max_row_deviation(&self) -> f64 {
        (0..self.frames)
            .map(|t| self.row(t).iter().fold(LOG_ZERO, |acc, &v| log_add(acc, v)).abs())
            .fold(0.0, f64::max)
    }
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[usize], vocab: &Vocabulary) -> String {
    vocab.decode(&collapse_indices(path))
}

pub fn collapse_indices(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Minimum number of frames a target needs: one per label plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn encode_target(target: &str, vocab: &Vocabulary) -> Result<Vec<usize>, CtcError> {
    target
        .chars()
        .map(|c| vocab.index_of(c).ok_or(CtcError::OutOfVocabulary(c)))
        .collect()
}

/// `−ln P(target | lp)` summed over all alignments.
pub fn ctc_log_loss(lp: &LogProbMatrix, target: &str, vocab: &Vocabulary) -> Result<f64, CtcError> {
    check_classes(lp, vocab)?;
    ctc_loss_indices(lp, &encode_target(target, vocab)?)
}

/// Loss and `∂loss/∂lp[t][v]`, treating every log-probability entry as an
/// independent input.
pub fn ctc_gradient(
    lp: &LogProbMatrix,
    target: &str,
    vocab: &Vocabulary,
) -> Result<(f64, Vec<f64>), CtcError> {
    check_classes(lp, vocab)?;
    ctc_loss_and_grad_indices(lp, &encode_target(target, vocab)?)
}

fn check_classes(lp: &LogProbMatrix, vocab: &Vocabulary) -> Result<(), CtcError> {
    if lp.classes() != vocab.size() {
        return Err(CtcError::ClassMismatch {
            got: lp.classes(),
            expected: vocab.size(),
        });
    }
    Ok(())
}

fn extended_labels(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

#[inline]
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

fn feasibility(lp: &LogProbMatrix, target: &[usize]) -> Result<(), CtcError> {
    let required = min_frames(target);
    if lp.frames() < required || lp.frames() == 0 {
        return Err(CtcError::NoValidAlignment {
            required: required.max(1),
            frames: lp.frames(),
        });
    }
    Ok(())
}

fn forward(lp: &LogProbMatrix, ext: &[usize]) -> Vec<f64> {
    let t_len = lp.frames();
    let s_len = ext.len();
    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let cur = &mut cur[..s_len];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc <= LOG_ZERO * 0.5 {
                LOG_ZERO
            } else {
                acc + lp.get(t, ext[s])
            };
        }
    }
    alpha
}

fn backward(lp: &LogProbMatrix, ext: &[usize]) -> Vec<f64> {
    let t_len = lp.frames();
    let s_len = ext.len();
    let mut beta = vec![LOG_ZERO; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = lp.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc <= LOG_ZERO * 0.5 {
                LOG_ZERO
            } else {
                acc + lp.get(t, ext[s])
            };
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// Loss for a target given as vocabulary indices (no blanks).
pub fn ctc_loss_indices(lp: &LogProbMatrix, target: &[usize]) -> Result<f64, CtcError> {
    feasibility(lp, target)?;
    let ext = extended_labels(target);
    let alpha = forward(lp, &ext);
    Ok(-total_log_prob(&alpha, lp.frames(), ext.len()))
}

pub fn ctc_loss_and_grad_indices(
    lp: &LogProbMatrix,
    target: &[usize],
) -> Result<(f64, Vec<f64>), CtcError> {
    feasibility(lp, target)?;
    let ext = extended_labels(target);
    let s_len = ext.len();
    let alpha = forward(lp, &ext);
    let beta = backward(lp, &ext);
    let log_p = total_log_prob(&alpha, lp.frames(), s_len);

    let mut grad = vec![0.0; lp.frames() * lp.classes()];
    if log_p <= LOG_ZERO * 0.5 {
        return Ok((-log_p, grad));
    }
    for t in 0..lp.frames() {
        let g_row = &mut grad[t * lp.classes()..(t + 1) * lp.classes()];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a <= LOG_ZERO * 0.5 || b <= LOG_ZERO * 0.5 {
                continue;
            }
            let occupancy = a + b - lp.get(t, ext[s]) - log_p;
            g_row[ext[s]] -= occupancy.exp();
        }
    }
    Ok((-log_p, grad))
}

/// Best-path decoding: argmax per frame, then collapse. Ties go to the
/// lower index.
pub fn greedy_decode(lp: &LogProbMatrix, vocab: &Vocabulary) -> String {
    let path: Vec<usize> = (0..lp.frames())
        .map(|t| {
            let row = lp.row(t);
            let mut best = 0;
            for (v, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = v;
                }
            }
            best
        })
        .collect();
    collapse(&path, vocab)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force path enumeration, used only to check the DP.
    use super::*;

    /// Every length-`frames` path over `classes` symbols, in lexicographic order.
    pub fn all_paths(frames: usize, classes: usize) -> impl Iterator<Item = Vec<usize>> {
        let total = classes.pow(frames as u32);
        (0..total).map(move |mut code| {
            let mut path = vec![0; frames];
            for t in (0..frames).rev() {
                path[t] = code % classes;
                code /= classes;
            }
            path
        })
    }

    /// `P(target)` as a plain sum of path probabilities.
    pub fn path_sum(lp: &LogProbMatrix, target: &[usize]) -> f64 {
        all_paths(lp.frames(), lp.classes())
            .filter(|p| collapse_indices(p) == target)
            .map(|p| p.iter().enumerate().map(|(t, &v)| lp.get(t, v).exp()).product::<f64>())
            .sum()
    }
}
