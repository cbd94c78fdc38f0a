//! Error rates, relative improvement, and manifest evaluation.

use std::fmt::Write as _;

use thiserror::Error;

use crate::acoustic::ModelParams;
use crate::corpus::Manifest;
use crate::decoder::{decode_manifest, DecodeConfig, DecodeError};
use crate::lm::NGramModel;
use crate::vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference corpus has no tokens")]
    EmptyReference,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("baseline WER must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("utterance {0} has no transcript")]
    MissingTranscript(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Pooled edit counts over a corpus: `(errors, reference tokens)`.
fn pooled<F, T>(refs: &[String], hyps: &[String], tokenize: F) -> Result<(usize, usize), MetricsError>
where
    F: Fn(&str) -> Vec<T>,
    T: PartialEq,
{
    if refs.len() != hyps.len() {
        return Err(MetricsError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let mut errors = 0;
    let mut total = 0;
    for (r, h) in refs.iter().zip(hyps) {
        let r = tokenize(r);
        errors += edit_distance(&r, &tokenize(h));
        total += r.len();
    }
    if total == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok((errors, total))
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Characters with whitespace runs collapsed to one space and trimmed.
fn normalized_chars(s: &str) -> Vec<char> {
    words(s).join(" ").chars().collect()
}

/// Corpus-level word error rate, in percent.
pub fn wer(refs: &[String], hyps: &[String]) -> Result<f64, MetricsError> {
    let (e, n) = pooled(refs, hyps, |s| words(s).into_iter().map(str::to_owned).collect())?;
    Ok(100.0 * e as f64 / n as f64)
}

/// Corpus-level character error rate, in percent.
pub fn cer(refs: &[String], hyps: &[String]) -> Result<f64, MetricsError> {
    let (e, n) = pooled(refs, hyps, normalized_chars)?;
    Ok(100.0 * e as f64 / n as f64)
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `100 * (baseline - new) / baseline`, rounded to two decimals.
pub fn relative_improvement(baseline_wer: f64, new_wer: f64) -> Result<f64, MetricsError> {
    if !(baseline_wer > 0.0) {
        return Err(MetricsError::NonPositiveBaseline(baseline_wer));
    }
    Ok(round2(100.0 * (baseline_wer - new_wer) / baseline_wer))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub wer: f64,
    pub cer: f64,
    pub n_utts: usize,
    pub n_ref_words: usize,
    pub hypotheses: Vec<String>,
}

/// Decodes every utterance and scores it against its transcript.
pub fn evaluate(
    params: &ModelParams,
    manifest: &Manifest,
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<EvalResult, MetricsError> {
    let refs: Vec<String> = manifest
        .utterances
        .iter()
        .map(|u| {
            u.transcript
                .clone()
                .ok_or_else(|| MetricsError::MissingTranscript(u.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let cfg = DecodeConfig {
        n_best: 1,
        ..cfg.clone()
    };
    let decoded = decode_manifest(params, lm, vocab, manifest, &cfg)?;
    let hyps: Vec<String> = decoded
        .into_iter()
        .map(|(_, h)| h.into_iter().next().map(|h| h.text).unwrap_or_default())
        .collect();
    Ok(EvalResult {
        wer: wer(&refs, &hyps)?,
        cer: cer(&refs, &hyps)?,
        n_utts: refs.len(),
        n_ref_words: refs.iter().map(|r| words(r).len()).sum(),
        hypotheses: hyps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub mode: String,
    pub result: EvalResult,
}

pub const EVAL_CSV_HEADER: &str = "dataset,mode,wer,cer,n_utts,n_ref_words";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{:.2},{:.2},{},{}",
            r.dataset, r.mode, r.result.wer, r.result.cer, r.result.n_utts, r.result.n_ref_words
        )
        .expect("writing to a String");
    }
    out
}
