//! CTC prefix beam search with character n-gram shallow fusion.
//!
//! A hypothesis is ranked by
//!
//! ```text
//! fused = acoustic_logp + alpha * lm_logp + beta * word_count
//! ```
//!
//! where `acoustic_logp` is the natural-log CTC probability of the prefix
//! (summed over its blank-ending and non-blank-ending alignments),
//! `lm_logp` is the LM log-probability of `<s> text </s>` converted to
//! natural log, and `word_count` counts whitespace-delimited words. During
//! the search the same expression is evaluated on partial prefixes, with
//! only completed words and without the `</s>` term.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{self, ModelError, ModelParams};
use crate::corpus::Manifest;
use crate::ctc::{self, log_add, LogProbMatrix, LOG_ZERO};
use crate::lm::{LmState, NGramModel, EOS};
use crate::vocab::{Vocabulary, BLANK};

/// Confidence of an empty hypothesis; below every finite threshold.
pub const EMPTY_CONFIDENCE: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("n_best ({n_best}) must not exceed beam_width ({beam_width}), and beam_width must be positive")]
    BeamTooNarrow { beam_width: usize, n_best: usize },
    #[error("use_lm is {use_lm} but a language model was {}", if *.has_lm { "given" } else { "not given" })]
    LmMismatch { use_lm: bool, has_lm: bool },
    #[error("log-prob matrix has {got} classes, vocabulary has {expected}")]
    ClassMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthNorm {
    #[default]
    Words,
    Chars,
}

fn default_beam_width() -> usize {
    32
}
fn default_alpha() -> f64 {
    0.7
}
fn default_beta() -> f64 {
    4.0
}
fn default_n_best() -> usize {
    1
}
fn default_use_lm() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_n_best")]
    pub n_best: usize,
    #[serde(default = "default_use_lm")]
    pub use_lm: bool,
    #[serde(default)]
    pub length_norm: LengthNorm,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: default_beam_width(),
            alpha: default_alpha(),
            beta: default_beta(),
            n_best: default_n_best(),
            use_lm: default_use_lm(),
            length_norm: LengthNorm::Words,
        }
    }
}

impl DecodeConfig {
    /// Plain CTC scoring: no LM, no word bonus.
    pub fn without_lm(&self) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            use_lm: false,
            ..self.clone()
        }
    }

    /// True when decoding reduces to best-path decoding.
    pub fn is_greedy(&self) -> bool {
        !self.use_lm && self.alpha == 0.0 && self.beta == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub acoustic_logp: f64,
    pub lm_logp: f64,
    pub word_count: usize,
    pub fused_score: f64,
    pub confidence: f64,
}

/// N-best output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    #[serde(flatten)]
    pub hypothesis: Hypothesis,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// `fused_score / max(length, 1)`; empty text gets [`EMPTY_CONFIDENCE`].
pub fn confidence_of(h: &Hypothesis, norm: LengthNorm) -> f64 {
    if h.text.is_empty() {
        return EMPTY_CONFIDENCE;
    }
    let len = match norm {
        LengthNorm::Words => h.word_count,
        LengthNorm::Chars => h.text.chars().count(),
    };
    h.fused_score / len.max(1) as f64
}

/// Builds a hypothesis from its parts so the fusion identity holds exactly.
pub fn make_hypothesis(text: String, acoustic_logp: f64, lm_logp: f64, cfg: &DecodeConfig) -> Hypothesis {
    let words = word_count(&text);
    let mut h = Hypothesis {
        fused_score: acoustic_logp + cfg.alpha * lm_logp + cfg.beta * words as f64,
        text,
        acoustic_logp,
        lm_logp,
        word_count: words,
        confidence: 0.0,
    };
    h.confidence = confidence_of(&h, cfg.length_norm);
    h
}

/// A prefix in the search trie. LM state and word count are computed once
/// when the prefix is first reached.
struct Node {
    parent: usize,
    /// Vocabulary index of the last label; 0 for the root.
    label: usize,
    lm_state: Option<LmState>,
    /// natural log
    lm_logp: f64,
    words_done: usize,
    in_word: bool,
}

struct Trie<'a> {
    nodes: Vec<Node>,
    children: HashMap<(usize, usize), usize>,
    lm: Option<&'a NGramModel>,
    chars: &'a [char],
}

impl<'a> Trie<'a> {
    const ROOT: usize = 0;

    fn new(lm: Option<&'a NGramModel>, chars: &'a [char]) -> Self {
        let root = Node {
            parent: usize::MAX,
            label: 0,
            lm_state: lm.map(NGramModel::begin_state),
            lm_logp: 0.0,
            words_done: 0,
            in_word: false,
        };
        Self {
            nodes: vec![root],
            children: HashMap::new(),
            lm,
            chars,
        }
    }

    fn child(&mut self, node: usize, label: usize) -> usize {
        if let Some(&id) = self.children.get(&(node, label)) {
            return id;
        }
        let parent = &self.nodes[node];
        let c = self.chars[label - 1];
        let (lm_state, lm_logp) = match (self.lm, &parent.lm_state) {
            (Some(m), Some(s)) => {
                let (lp10, next) = m.score_char(s, c);
                (Some(next), parent.lm_logp + lp10 * std::f64::consts::LN_10)
            }
            _ => (None, parent.lm_logp),
        };
        let is_space = c.is_whitespace();
        let n = Node {
            parent: node,
            label,
            lm_state,
            lm_logp,
            words_done: parent.words_done + usize::from(is_space && parent.in_word),
            in_word: !is_space,
        };
        let id = self.nodes.len();
        self.nodes.push(n);
        self.children.insert((node, label), id);
        id
    }

    fn labels(&self, mut node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        while node != Self::ROOT {
            out.push(self.nodes[node].label);
            node = self.nodes[node].parent;
        }
        out.reverse();
        out
    }
}

#[derive(Clone, Copy)]
struct Live {
    node: usize,
    p_blank: f64,
    p_non_blank: f64,
}

impl Live {
    fn total(&self) -> f64 {
        log_add(self.p_blank, self.p_non_blank)
    }
}

fn slot_of(next: &mut Vec<Live>, slots: &mut HashMap<usize, usize>, node: usize) -> usize {
    *slots.entry(node).or_insert_with(|| {
        next.push(Live {
            node,
            p_blank: LOG_ZERO,
            p_non_blank: LOG_ZERO,
        });
        next.len() - 1
    })
}

pub fn beam_search(
    lp: &LogProbMatrix,
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, DecodeError> {
    if cfg.beam_width == 0 || cfg.n_best > cfg.beam_width {
        return Err(DecodeError::BeamTooNarrow {
            beam_width: cfg.beam_width,
            n_best: cfg.n_best,
        });
    }
    if cfg.use_lm != lm.is_some() {
        return Err(DecodeError::LmMismatch {
            use_lm: cfg.use_lm,
            has_lm: lm.is_some(),
        });
    }
    if lp.classes() != vocab.size() {
        return Err(DecodeError::ClassMismatch {
            got: lp.classes(),
            expected: vocab.size(),
        });
    }
    let lm = if cfg.use_lm { lm } else { None };
    let mut trie = Trie::new(lm, vocab.chars());

    let mut beams = vec![Live {
        node: Trie::ROOT,
        p_blank: 0.0,
        p_non_blank: LOG_ZERO,
    }];
    let mut next: Vec<Live> = Vec::new();
    let mut slots: HashMap<usize, usize> = HashMap::new();

    for t in 0..lp.frames() {
        let row = lp.row(t);
        next.clear();
        slots.clear();
        for b in &beams {
            let total = b.total();
            let s = slot_of(&mut next, &mut slots, b.node);
            next[s].p_blank = log_add(next[s].p_blank, total + row[BLANK]);
            let last = trie.nodes[b.node].label;
            for (c, &pc) in row.iter().enumerate().skip(1) {
                if pc <= LOG_ZERO * 0.5 {
                    continue;
                }
                let from = if c == last {
                    let s = slot_of(&mut next, &mut slots, b.node);
                    next[s].p_non_blank = log_add(next[s].p_non_blank, b.p_non_blank + pc);
                    b.p_blank
                } else {
                    total
                };
                let child = trie.child(b.node, c);
                let s = slot_of(&mut next, &mut slots, child);
                next[s].p_non_blank = log_add(next[s].p_non_blank, from + pc);
            }
        }
        let mut ranked: Vec<(f64, Live)> = next
            .iter()
            .filter(|l| l.total() > LOG_ZERO * 0.5)
            .map(|l| {
                let n = &trie.nodes[l.node];
                let score = l.total() + cfg.alpha * n.lm_logp + cfg.beta * n.words_done as f64;
                (score, *l)
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| trie.labels(a.1.node).cmp(&trie.labels(b.1.node)))
        });
        ranked.truncate(cfg.beam_width);
        beams = ranked.into_iter().map(|(_, l)| l).collect();
    }

    let mut hyps: Vec<Hypothesis> = beams
        .iter()
        .map(|b| {
            let n = &trie.nodes[b.node];
            let text = vocab.decode(&trie.labels(b.node));
            let lm_logp = match (lm, &n.lm_state) {
                (Some(m), Some(s)) => n.lm_logp + m.score_token(s, EOS).0 * std::f64::consts::LN_10,
                _ => 0.0,
            };
            make_hypothesis(text, b.total(), lm_logp, cfg)
        })
        .collect();
    hyps.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.text.cmp(&b.text)));
    hyps.truncate(cfg.n_best);
    Ok(hyps)
}

/// Decodes one log-prob matrix to its best text: best-path decoding when
/// the config is plain CTC, beam search otherwise.
pub fn decode_best(
    lp: &LogProbMatrix,
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<Option<Hypothesis>, DecodeError> {
    if cfg.is_greedy() {
        let text = ctc::greedy_decode(lp, vocab);
        let target = vocab.encode(&text).expect("decoded text is in vocabulary");
        let acoustic = -ctc::ctc_loss_indices(lp, &target).unwrap_or(f64::INFINITY);
        return Ok(Some(make_hypothesis(text, acoustic, 0.0, cfg)));
    }
    Ok(beam_search(lp, lm, vocab, cfg)?.into_iter().next())
}

/// Runs the acoustic model and beam search over every utterance, in
/// parallel, returning results in manifest order.
pub fn decode_manifest(
    params: &ModelParams,
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    manifest: &Manifest,
    cfg: &DecodeConfig,
) -> Result<Vec<(String, Vec<Hypothesis>)>, DecodeError> {
    manifest
        .utterances
        .par_iter()
        .map(|u| {
            let lp = acoustic::forward(params, &u.features)?;
            let hyps = if cfg.is_greedy() {
                decode_best(&lp, lm, vocab, cfg)?.into_iter().collect()
            } else {
                beam_search(&lp, lm, vocab, cfg)?
            };
            Ok((u.id.clone(), hyps))
        })
        .collect()
}

/// N-best JSON Lines, one record per hypothesis. Non-finite scores are
/// written as `null`.
pub fn nbest_jsonl(results: &[(String, Vec<Hypothesis>)]) -> String {
    let mut out = String::new();
    for (id, hyps) in results {
        for h in hyps {
            let rec = NBestRecord {
                id: id.clone(),
                hypothesis: h.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("n-best record serializes"));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::oracle::all_paths;
    use crate::ctc::collapse_indices;
    use crate::lm::train_lm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_lp(rng: &mut impl Rng, frames: usize, classes: usize) -> LogProbMatrix {
        let mut data = Vec::new();
        for _ in 0..frames {
            let logits: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lse = logits.iter().fold(LOG_ZERO, |a, &b| log_add(a, b));
            data.extend(logits.iter().map(|l| l - lse));
        }
        LogProbMatrix::new(frames, classes, data)
    }

    /// Exhaustive decode: sum path probabilities per collapsed string, then
    /// score every string with the fused objective.
    fn brute_force(
        lp: &LogProbMatrix,
        lm: Option<&NGramModel>,
        vocab: &Vocabulary,
        alpha: f64,
        beta: f64,
    ) -> Vec<(String, f64)> {
        let mut mass: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for path in all_paths(lp.frames(), lp.classes()) {
            let p: f64 = path.iter().enumerate().map(|(t, &v)| lp.get(t, v)).sum();
            let e = mass.entry(collapse_indices(&path)).or_insert(LOG_ZERO);
            *e = log_add(*e, p);
        }
        let mut scored: Vec<(String, f64)> = mass
            .into_iter()
            .map(|(labels, ac)| {
                let text = vocab.decode(&labels);
                let lm_part = lm.map_or(0.0, |m| m.score_sequence(&text) * std::f64::consts::LN_10);
                let words = text.split_whitespace().count() as f64;
                let s = ac + alpha * lm_part + beta * words;
                (text, s)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new("a ".chars()).unwrap()
    }

    #[test]
    fn one_hot_rows_match_greedy() {
        let v = Vocabulary::new(" ab".chars()).unwrap();
        let lm = train_lm(&["ab ba".to_string(), "a b".to_string()], 3, 0.75).unwrap();
        let path = [2, 2, 0, 3, 1, 1, 3, 0, 2];
        let mut probs = vec![0.0; path.len() * 4];
        for (t, &i) in path.iter().enumerate() {
            probs[t * 4 + i] = 1.0;
        }
        let lp = LogProbMatrix::from_probs(path.len(), 4, &probs);
        let greedy = ctc::greedy_decode(&lp, &v);
        for (alpha, beta) in [(0.0, 0.0), (0.7, 4.0), (2.0, -3.0)] {
            let cfg = DecodeConfig { alpha, beta, ..DecodeConfig::default() };
            let hyps = beam_search(&lp, Some(&lm), &v, &cfg).unwrap();
            assert_eq!(hyps[0].text, greedy);
        }
    }

    #[test]
    fn full_beam_matches_enumeration_without_lm() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let frames = rng.gen_range(1..=5);
            let lp = random_lp(&mut rng, frames, 3);
            let cfg = DecodeConfig { beam_width: 64, alpha: 0.0, beta: 0.0, use_lm: false, ..DecodeConfig::default() };
            let best = &beam_search(&lp, None, &v, &cfg).unwrap()[0];
            let oracle = brute_force(&lp, None, &v, 0.0, 0.0);
            assert!((best.fused_score - oracle[0].1).abs() < 1e-9);
            assert_eq!(best.text, oracle[0].0);
        }
    }

    #[test]
    fn fused_scores_match_oracle_recomputation() {
        let v = vocab();
        let lm = train_lm(&["a a".to_string(), "aa a".to_string(), "a".to_string()], 3, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lp = random_lp(&mut rng, 5, 3);
        let cfg = DecodeConfig { beam_width: 64, n_best: 64, ..DecodeConfig::default() };
        let hyps = beam_search(&lp, Some(&lm), &v, &cfg).unwrap();
        let oracle: BTreeMap<String, f64> = brute_force(&lp, Some(&lm), &v, 0.7, 4.0).into_iter().collect();
        assert_eq!(hyps.len(), oracle.len());
        for h in &hyps {
            assert!((h.fused_score - oracle[&h.text]).abs() < 1e-9, "{:?}", h.text);
            let recomputed = h.acoustic_logp + 0.7 * h.lm_logp + 4.0 * h.word_count as f64;
            assert!((h.fused_score - recomputed).abs() <= 1e-12);
            let lm_direct = lm.score_sequence(&h.text) * std::f64::consts::LN_10;
            assert!((h.lm_logp - lm_direct).abs() < 1e-9);
        }
    }

    #[test]
    fn no_lm_means_zero_lm_score_but_beta_applies() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let lp = random_lp(&mut rng, 5, 3);
        let cfg = DecodeConfig { use_lm: false, beam_width: 64, n_best: 10, ..DecodeConfig::default() };
        for h in beam_search(&lp, None, &v, &cfg).unwrap() {
            assert_eq!(h.lm_logp, 0.0);
            assert_eq!(h.fused_score, h.acoustic_logp + 4.0 * h.word_count as f64);
        }
    }

    #[test]
    fn wider_beams_never_lower_the_best_score() {
        let v = Vocabulary::new(" ab".chars()).unwrap();
        let lm = train_lm(&["ab ba".to_string(), "aab b".to_string()], 3, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let lp = random_lp(&mut rng, 6, 4);
            let mut prev = f64::NEG_INFINITY;
            for width in [1, 2, 4, 8, 16, 64, 256] {
                let cfg = DecodeConfig { beam_width: width, ..DecodeConfig::default() };
                let best = beam_search(&lp, Some(&lm), &v, &cfg).unwrap()[0].fused_score;
                assert!(best >= prev - 1e-12, "width {width}: {best} < {prev}");
                prev = best;
            }
        }
    }

    #[test]
    fn word_bonus_counts_completed_and_trailing_words() {
        let v = Vocabulary::new(" ab".chars()).unwrap();
        // " ab  ba " spelled out with one-hot frames
        let text = " ab  ba ";
        let mut path = Vec::new();
        for c in text.chars() {
            path.push(v.index_of(c).unwrap());
            path.push(0);
        }
        let mut probs = vec![0.0; path.len() * 4];
        for (t, &i) in path.iter().enumerate() {
            probs[t * 4 + i] = 1.0;
        }
        let lp = LogProbMatrix::from_probs(path.len(), 4, &probs);
        let cfg = DecodeConfig { use_lm: false, alpha: 0.0, beta: 1.0, ..DecodeConfig::default() };
        let h = &beam_search(&lp, None, &v, &cfg).unwrap()[0];
        assert_eq!(h.text, text);
        assert_eq!(h.word_count, 2);
        assert!((h.fused_score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_nbest() {
        let v = Vocabulary::new(" ab".chars()).unwrap();
        let lm = train_lm(&["ab ba".to_string()], 2, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let lp = random_lp(&mut rng, 7, 4);
        let cfg = DecodeConfig { n_best: 5, beam_width: 8, ..DecodeConfig::default() };
        let a = beam_search(&lp, Some(&lm), &v, &cfg).unwrap();
        let b = beam_search(&lp, Some(&lm), &v, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].fused_score >= w[1].fused_score));
    }

    #[test]
    fn config_errors() {
        let v = vocab();
        let lp = LogProbMatrix::from_probs(1, 3, &[1.0 / 3.0; 3]);
        let narrow = DecodeConfig { beam_width: 2, n_best: 3, use_lm: false, ..DecodeConfig::default() };
        assert!(matches!(beam_search(&lp, None, &v, &narrow), Err(DecodeError::BeamTooNarrow { .. })));
        let wants_lm = DecodeConfig::default();
        assert!(matches!(beam_search(&lp, None, &v, &wants_lm), Err(DecodeError::LmMismatch { .. })));
    }

    #[test]
    fn confidence_examples() {
        let h = Hypothesis {
            text: "ab ba".into(),
            acoustic_logp: -3.0,
            lm_logp: 0.0,
            word_count: 2,
            fused_score: -3.0,
            confidence: 0.0,
        };
        assert_eq!(confidence_of(&h, LengthNorm::Words), -1.5);
        assert_eq!(confidence_of(&h, LengthNorm::Chars), -0.6);
        let empty = Hypothesis { text: String::new(), word_count: 0, ..h.clone() };
        assert_eq!(confidence_of(&empty, LengthNorm::Words), EMPTY_CONFIDENCE);
        for k in [0.5, 2.0, 7.0] {
            let scaled = Hypothesis { fused_score: h.fused_score * k, ..h.clone() };
            assert_eq!(confidence_of(&scaled, LengthNorm::Words), k * confidence_of(&h, LengthNorm::Words));
        }
    }

    #[test]
    fn nbest_records_serialize_flat() {
        let h = make_hypothesis("a".into(), -1.0, -2.0, &DecodeConfig::default());
        let line = nbest_jsonl(&[("u1".into(), vec![h])]);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        for key in ["id", "text", "acoustic_logp", "lm_logp", "word_count", "fused_score", "confidence"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
