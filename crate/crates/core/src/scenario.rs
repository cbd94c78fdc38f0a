//! Seeded toy scenario: a small character alphabet, a Zipf-weighted
//! lexicon, and synthetic labeled, unlabeled and dev corpora drawn from it.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{synthesize_corpus, CorpusError, EmissionModelSpec, Manifest, Source, Split};
use crate::vocab::Vocabulary;

/// Eleven letters and the space.
pub const TOY_ALPHABET: &str = " abcdefghijk";

fn d_n_labeled() -> usize {
    200
}
fn d_n_unlabeled() -> usize {
    2000
}
fn d_n_dev() -> usize {
    200
}
fn d_n_lm_texts() -> usize {
    4000
}
fn d_lexicon_size() -> usize {
    400
}
fn d_word_len() -> (usize, usize) {
    (2, 6)
}
fn d_words_per_utt() -> (usize, usize) {
    (1, 3)
}
fn d_feature_dims() -> usize {
    8
}
fn d_separation() -> f64 {
    1.0
}
fn d_noise_std() -> f64 {
    0.7
}
fn d_frames_per_symbol() -> (usize, usize) {
    (2, 3)
}
fn d_hard_noise_std() -> f64 {
    2.0
}
fn d_hard_fraction() -> f64 {
    0.4
}
fn d_domain_shift() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "d_n_labeled")]
    pub n_labeled: usize,
    #[serde(default = "d_n_unlabeled")]
    pub n_unlabeled: usize,
    #[serde(default = "d_n_dev")]
    pub n_dev: usize,
    #[serde(default = "d_n_lm_texts")]
    pub n_lm_texts: usize,
    #[serde(default = "d_lexicon_size")]
    pub lexicon_size: usize,
    #[serde(default = "d_word_len")]
    pub word_len: (usize, usize),
    #[serde(default = "d_words_per_utt")]
    pub words_per_utt: (usize, usize),
    #[serde(default = "d_feature_dims")]
    pub feature_dims: usize,
    /// Scale of the per-character mean vectors.
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_noise_std")]
    pub noise_std: f64,
    #[serde(default = "d_frames_per_symbol")]
    pub frames_per_symbol: (usize, usize),
    /// Fraction of unlabeled utterances rendered with `hard_noise_std`.
    #[serde(default = "d_hard_fraction")]
    pub hard_fraction: f64,
    #[serde(default = "d_hard_noise_std")]
    pub hard_noise_std: f64,
    /// Scale of the per-character perturbation applied to the means of the
    /// unlabeled and dev corpora; the labeled corpus keeps the base means.
    #[serde(default = "d_domain_shift")]
    pub domain_shift: f64,
    /// Seeds the lexicon and the LM text corpus, independently of the run seed.
    #[serde(default)]
    pub text_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_labeled: d_n_labeled(),
            n_unlabeled: d_n_unlabeled(),
            n_dev: d_n_dev(),
            n_lm_texts: d_n_lm_texts(),
            lexicon_size: d_lexicon_size(),
            word_len: d_word_len(),
            words_per_utt: d_words_per_utt(),
            feature_dims: d_feature_dims(),
            separation: d_separation(),
            noise_std: d_noise_std(),
            frames_per_symbol: d_frames_per_symbol(),
            hard_fraction: d_hard_fraction(),
            hard_noise_std: d_hard_noise_std(),
            domain_shift: d_domain_shift(),
            text_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub vocab: Vocabulary,
    pub lexicon: Vec<String>,
    /// Emission model of the labeled corpus.
    pub emission: EmissionModelSpec,
    /// Emission model of the unlabeled and dev corpora.
    pub target_emission: EmissionModelSpec,
    pub labeled: Manifest,
    pub unlabeled: Manifest,
    /// Reference texts of the unlabeled utterances, never used for training.
    pub unlabeled_texts: Vec<String>,
    /// Which unlabeled utterances were rendered with the hard noise level.
    pub unlabeled_hard: Vec<bool>,
    pub dev: Manifest,
    pub lm_texts: Vec<String>,
}

pub fn toy_vocabulary() -> Vocabulary {
    Vocabulary::new(TOY_ALPHABET.chars()).expect("toy alphabet is valid")
}

/// Distinct words with no letter repeated back to back, so every word has
/// a CTC alignment without separating blanks.
fn make_lexicon(letters: &[char], size: usize, len: (usize, usize), rng: &mut impl Rng) -> Vec<String> {
    let mut words = Vec::with_capacity(size);
    let mut attempts = 0;
    while words.len() < size {
        attempts += 1;
        assert!(attempts < size * 1000, "lexicon parameters admit too few distinct words");
        let n = rng.gen_range(len.0..=len.1);
        let mut w = String::with_capacity(n);
        let mut prev = None;
        while w.len() < n {
            let c = letters[rng.gen_range(0..letters.len())];
            if Some(c) != prev {
                w.push(c);
                prev = Some(c);
            }
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

fn sample_texts(lexicon: &[String], n: usize, words_per_utt: (usize, usize), rng: &mut impl Rng) -> Vec<String> {
    let zipf = WeightedIndex::new((1..=lexicon.len()).map(|r| 1.0 / r as f64)).expect("non-empty lexicon");
    (0..n)
        .map(|_| {
            let k = rng.gen_range(words_per_utt.0..=words_per_utt.1);
            (0..k).map(|_| lexicon[zipf.sample(rng)].as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// The lexicon and LM training texts; these depend only on `text_seed`.
pub fn build_text_material(cfg: &ScenarioConfig) -> (Vec<String>, Vec<String>) {
    let vocab = toy_vocabulary();
    let letters: Vec<char> = vocab.chars().iter().copied().filter(|c| *c != ' ').collect();
    let lexicon = make_lexicon(&letters, cfg.lexicon_size, cfg.word_len, &mut stream(cfg.text_seed, 1));
    let lm_texts = sample_texts(&lexicon, cfg.n_lm_texts, cfg.words_per_utt, &mut stream(cfg.text_seed, 5));
    (lexicon, lm_texts)
}

/// Builds the scenario for `seed`. Every part uses its own ChaCha stream.
pub fn build_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario, CorpusError> {
    let vocab = toy_vocabulary();
    let stream = |k: u64| stream(seed, k);
    let (lexicon, lm_texts) = build_text_material(cfg);
    let labeled_texts = sample_texts(&lexicon, cfg.n_labeled, cfg.words_per_utt, &mut stream(2));
    let unlabeled_texts = sample_texts(&lexicon, cfg.n_unlabeled, cfg.words_per_utt, &mut stream(3));
    let dev_texts = sample_texts(&lexicon, cfg.n_dev, cfg.words_per_utt, &mut stream(4));

    let emission = EmissionModelSpec {
        means: EmissionModelSpec::random_means(&vocab, cfg.feature_dims, cfg.separation, seed.wrapping_mul(16).wrapping_add(1)),
        noise_std: cfg.noise_std,
        frames_per_symbol: cfg.frames_per_symbol,
        rng_seed: seed.wrapping_mul(16).wrapping_add(2),
        frame_rate: crate::corpus::DEFAULT_FRAME_RATE,
    };
    let perturbation = EmissionModelSpec::random_means(&vocab, cfg.feature_dims, cfg.domain_shift, seed.wrapping_mul(16).wrapping_add(5));
    let target_emission = EmissionModelSpec {
        means: emission
            .means
            .iter()
            .map(|(c, m)| (*c, m.iter().zip(&perturbation[c]).map(|(a, b)| a + b).collect()))
            .collect(),
        ..emission.clone()
    };
    let with_seed = |offset: u64| EmissionModelSpec {
        rng_seed: seed.wrapping_mul(16).wrapping_add(offset),
        ..target_emission.clone()
    };
    let relabel = |m: Manifest, split: Split| Manifest::new(m.name, split, m.utterances);
    let labeled = relabel(
        synthesize_corpus("labeled", &labeled_texts, &vocab, &emission, Source::Synthetic)?,
        Split::Train,
    )?;
    let mut pick = stream(6);
    let unlabeled_hard: Vec<bool> = (0..cfg.n_unlabeled).map(|_| pick.gen_bool(cfg.hard_fraction)).collect();
    let easy = synthesize_corpus("unlabeled", &unlabeled_texts, &vocab, &with_seed(3), Source::Unlabeled)?;
    let unlabeled = if unlabeled_hard.iter().any(|&h| h) {
        let hard_spec = EmissionModelSpec {
            noise_std: cfg.hard_noise_std,
            ..with_seed(3)
        };
        let hard = synthesize_corpus("unlabeled", &unlabeled_texts, &vocab, &hard_spec, Source::Unlabeled)?;
        let mixed = easy
            .utterances
            .into_iter()
            .zip(hard.utterances)
            .zip(&unlabeled_hard)
            .map(|((e, h), &is_hard)| if is_hard { h } else { e })
            .collect();
        Manifest::new("unlabeled", Split::Unsplit, mixed)?
    } else {
        relabel(easy, Split::Unsplit)?
    };
    let dev = relabel(
        synthesize_corpus("dev", &dev_texts, &vocab, &with_seed(4), Source::Synthetic)?,
        Split::Valid,
    )?;
    Ok(Scenario {
        vocab,
        lexicon,
        emission,
        target_emission,
        labeled,
        unlabeled,
        unlabeled_texts,
        unlabeled_hard,
        dev,
        lm_texts,
    })
}
