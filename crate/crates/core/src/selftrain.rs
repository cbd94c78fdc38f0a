//! Iterative pseudo-labeling with a relaxing confidence threshold.
//!
//! Each iteration decodes the whole unlabeled set with the best model so
//! far, keeps the pseudo-labels whose confidence clears that iteration's
//! threshold, fine-tunes a new model from the seed checkpoint on labeled
//! plus kept data, and evaluates it on the dev manifests. The loop stops
//! when the schedule is exhausted or after `patience` iterations in a row
//! without a new best mean dev WER.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{self, Checkpoint, ModelError, ModelParams, TrainConfig};
use crate::corpus::{Manifest, Source, Utterance};
use crate::decoder::{beam_search, decode_best, DecodeConfig, DecodeError};
use crate::lm::NGramModel;
use crate::metrics::{evaluate, MetricsError};
use crate::vocab::Vocabulary;

pub const DEFAULT_THRESHOLDS: [f64; 7] = [0.5, 0.0, -0.5, -1.0, -1.5, -2.0, -2.5];

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error("thresholds must be non-empty and strictly decreasing")]
    BadThresholds,
    #[error("patience must be at least 1")]
    BadPatience,
    #[error("no evaluation manifests given")]
    NoEvalManifests,
    #[error("unlabeled utterance {0} carries a transcript")]
    LabeledInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub utterance_id: String,
    pub text: String,
    pub confidence: f64,
    pub iteration: usize,
}

/// Where each iteration's model starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelInit {
    /// The seed checkpoint's trained weights.
    #[default]
    SeedWeights,
    /// The initialization the seed model itself was trained from.
    SeedInit,
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}
fn default_patience() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfTrainConfig {
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub init: ModelInit,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            patience: default_patience(),
            init: ModelInit::default(),
        }
    }
}

impl SelfTrainConfig {
    pub fn max_iterations(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<(), SelfTrainError> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| t.is_nan())
            || self.thresholds.windows(2).any(|w| w[0] <= w[1])
        {
            return Err(SelfTrainError::BadThresholds);
        }
        if self.patience == 0 {
            return Err(SelfTrainError::BadPatience);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// Sorted by utterance id.
    pub labels: Vec<PseudoLabel>,
    pub attempts: usize,
    pub dropped_empty: usize,
}

/// Decodes every unlabeled utterance once; empty decodes are dropped.
pub fn generate_pseudo_labels(
    params: &ModelParams,
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    unlabeled: &Manifest,
    cfg: &DecodeConfig,
    iteration: usize,
) -> Result<PseudoLabelSet, SelfTrainError> {
    if let Some(u) = unlabeled.utterances.iter().find(|u| u.transcript.is_some()) {
        return Err(SelfTrainError::LabeledInput(u.id.clone()));
    }
    let cfg = DecodeConfig {
        n_best: 1,
        ..cfg.clone()
    };
    let decoded: Vec<Option<PseudoLabel>> = unlabeled
        .utterances
        .par_iter()
        .map(|u| {
            let lp = acoustic::forward(params, &u.features)?;
            let best = if cfg.is_greedy() {
                decode_best(&lp, lm, vocab, &cfg)?
            } else {
                beam_search(&lp, lm, vocab, &cfg)?.into_iter().next()
            };
            Ok(best.filter(|h| !h.text.is_empty()).map(|h| PseudoLabel {
                utterance_id: u.id.clone(),
                text: h.text,
                confidence: h.confidence,
                iteration,
            }))
        })
        .collect::<Result<_, SelfTrainError>>()?;
    let attempts = decoded.len();
    let mut labels: Vec<PseudoLabel> = decoded.into_iter().flatten().collect();
    let dropped_empty = attempts - labels.len();
    if dropped_empty > 0 {
        log::info!("iteration {iteration}: dropped {dropped_empty} empty decodes");
    }
    labels.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    Ok(PseudoLabelSet {
        labels,
        attempts,
        dropped_empty,
    })
}

/// Keeps pseudo-labels with `confidence >= threshold`, in order.
pub fn filter_pseudo_labels(pls: &[PseudoLabel], threshold: f64) -> Vec<PseudoLabel> {
    pls.iter().filter(|p| p.confidence >= threshold).cloned().collect()
}

pub fn kept_fraction(n_kept: usize, n_unlabeled: usize) -> f64 {
    if n_unlabeled == 0 {
        0.0
    } else {
        n_kept as f64 / n_unlabeled as f64
    }
}

/// `(threshold, n_kept, kept_fraction)` for each threshold, on a fixed set.
pub fn threshold_sweep(pls: &[PseudoLabel], thresholds: &[f64], n_unlabeled: usize) -> Vec<(f64, usize, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let n = pls.iter().filter(|p| p.confidence >= t).count();
            (t, n, kept_fraction(n, n_unlabeled))
        })
        .collect()
}

/// Labeled utterances followed by the unlabeled utterances named in `pls`,
/// carrying their pseudo-label text.
pub fn training_set(labeled: &[Utterance], unlabeled: &Manifest, pls: &[PseudoLabel]) -> Vec<Utterance> {
    let by_id: std::collections::HashMap<&str, &Utterance> =
        unlabeled.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut data = labeled.to_vec();
    data.extend(pls.iter().map(|p| {
        let u = by_id[p.utterance_id.as_str()];
        Utterance {
            transcript: Some(p.text.clone()),
            source: Source::Pseudo,
            ..u.clone()
        }
    }));
    data
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub threshold: f64,
    pub n_unlabeled: usize,
    pub n_kept: usize,
    pub kept_fraction: f64,
    /// `(dataset name, WER %)` in eval-manifest order.
    pub wers: Vec<(String, f64)>,
    pub mean_dev_wer: f64,
    /// No pseudo-label cleared the threshold; trained on labeled data only.
    pub labeled_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainOutcome {
    pub baseline_wers: Vec<(String, f64)>,
    pub baseline_mean_wer: f64,
    /// 1-based iteration of the best model; `None` if the seed stayed best.
    pub best_iteration: Option<usize>,
    pub best_params: ModelParams,
    pub reports: Vec<IterationReport>,
    /// All non-empty pseudo-labels generated at each iteration.
    pub generated: Vec<PseudoLabelSet>,
    /// Pseudo-labels kept at each iteration.
    pub kept: Vec<Vec<PseudoLabel>>,
    /// Model trained at each iteration.
    pub models: Vec<ModelParams>,
}

pub struct SelfTrainData<'a> {
    pub labeled: &'a [Utterance],
    pub unlabeled: &'a Manifest,
    pub eval: &'a [Manifest],
    pub lm: Option<&'a NGramModel>,
}

/// Per-dataset WERs and their mean.
pub fn evaluate_all(
    params: &ModelParams,
    eval: &[Manifest],
    lm: Option<&NGramModel>,
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<(Vec<(String, f64)>, f64), SelfTrainError> {
    if eval.is_empty() {
        return Err(SelfTrainError::NoEvalManifests);
    }
    let wers = eval
        .iter()
        .map(|m| Ok((m.name.clone(), evaluate(params, m, lm, vocab, cfg)?.wer)))
        .collect::<Result<Vec<_>, SelfTrainError>>()?;
    let mean = wers.iter().map(|(_, w)| w).sum::<f64>() / wers.len() as f64;
    Ok((wers, mean))
}

/// Parameters every iteration starts from.
pub fn iteration_init(seed: &Checkpoint, init: ModelInit) -> ModelParams {
    match init {
        ModelInit::SeedWeights => seed.params.clone(),
        ModelInit::SeedInit => acoustic::initial_params(seed.params.shape.feature_dims, &seed.vocab, &seed.train_cfg),
    }
}

/// Runs the loop with the acoustic trainer: each iteration trains from
/// [`iteration_init`] with `train_cfg`.
pub fn run_self_training(
    seed: &Checkpoint,
    data: &SelfTrainData<'_>,
    cfg: &SelfTrainConfig,
    train_cfg: &TrainConfig,
    decode_cfg: &DecodeConfig,
) -> Result<SelfTrainOutcome, SelfTrainError> {
    let vocab = &seed.vocab;
    let init = iteration_init(seed, cfg.init);
    run_self_training_with(seed, data, cfg, decode_cfg, |train_set| {
        Ok(acoustic::train_from(init.clone(), train_set, vocab, train_cfg)?.params)
    })
}

/// Runs the loop with a caller-supplied trainer mapping a training set to
/// new parameters. The trainer sees only the training set, so every
/// iteration's model depends on nothing but its own data.
pub fn run_self_training_with<F>(
    seed: &Checkpoint,
    data: &SelfTrainData<'_>,
    cfg: &SelfTrainConfig,
    decode_cfg: &DecodeConfig,
    mut trainer: F,
) -> Result<SelfTrainOutcome, SelfTrainError>
where
    F: FnMut(&[Utterance]) -> Result<ModelParams, SelfTrainError>,
{
    cfg.validate()?;
    let vocab = &seed.vocab;
    let (baseline_wers, baseline_mean_wer) = evaluate_all(&seed.params, data.eval, data.lm, vocab, decode_cfg)?;
    log::info!("seed mean dev WER {baseline_mean_wer:.2}");

    let mut best_params = seed.params.clone();
    let mut best_wer = baseline_mean_wer;
    let mut best_iteration = None;
    let mut since_best = 0;
    let mut reports = Vec::new();
    let mut generated = Vec::new();
    let mut kept_sets = Vec::new();
    let mut models = Vec::new();
    let n_unlabeled = data.unlabeled.len();

    for (i, &threshold) in cfg.thresholds.iter().enumerate() {
        let iteration = i + 1;
        let pls = generate_pseudo_labels(&best_params, data.lm, vocab, data.unlabeled, decode_cfg, iteration)?;
        debug_assert_eq!(pls.attempts, n_unlabeled);
        let kept = filter_pseudo_labels(&pls.labels, threshold);
        let labeled_only = kept.is_empty();
        if labeled_only {
            log::warn!("iteration {iteration}: no pseudo-label reached threshold {threshold}; training on labeled data only");
        }
        let train_set = training_set(data.labeled, data.unlabeled, &kept);
        let params = trainer(&train_set)?;
        let (wers, mean_dev_wer) = evaluate_all(&params, data.eval, data.lm, vocab, decode_cfg)?;
        log::info!(
            "iteration {iteration}: threshold {threshold}, kept {}/{n_unlabeled}, mean dev WER {mean_dev_wer:.2}",
            kept.len()
        );
        reports.push(IterationReport {
            iteration,
            threshold,
            n_unlabeled,
            n_kept: kept.len(),
            kept_fraction: kept_fraction(kept.len(), n_unlabeled),
            wers,
            mean_dev_wer,
            labeled_only,
        });
        if mean_dev_wer < best_wer {
            best_wer = mean_dev_wer;
            best_params = params.clone();
            best_iteration = Some(iteration);
            since_best = 0;
        } else {
            since_best += 1;
        }
        generated.push(pls);
        kept_sets.push(kept);
        models.push(params);
        if since_best >= cfg.patience {
            log::info!("stopping after {since_best} iterations without improvement");
            break;
        }
    }

    Ok(SelfTrainOutcome {
        baseline_wers,
        baseline_mean_wer,
        best_iteration,
        best_params,
        reports,
        generated,
        kept: kept_sets,
        models,
    })
}

pub fn pseudo_labels_jsonl(pls: &[PseudoLabel]) -> String {
    let mut out = String::new();
    for p in pls {
        out.push_str(&serde_json::to_string(p).expect("pseudo-label serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_pseudo_labels(text: &str) -> Result<Vec<PseudoLabel>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Iteration report CSV. Dataset columns follow the first report's order.
pub fn report_csv(reports: &[IterationReport]) -> String {
    let mut out = String::from("iteration,threshold,n_unlabeled,n_kept,kept_fraction");
    if let Some(first) = reports.first() {
        for (name, _) in &first.wers {
            write!(out, ",{name}_wer").expect("writing to a String");
        }
    }
    out.push_str(",mean_dev_wer\n");
    for r in reports {
        write!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.threshold, r.n_unlabeled, r.n_kept, r.kept_fraction
        )
        .expect("writing to a String");
        for (_, w) in &r.wers {
            write!(out, ",{w:.2}").expect("writing to a String");
        }
        writeln!(out, ",{:.2}", r.mean_dev_wer).expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, EmissionModelSpec, Split};
    use crate::lm::train_lm;
    use proptest::prelude::*;

    fn pl(id: &str, confidence: f64) -> PseudoLabel {
        PseudoLabel {
            utterance_id: id.into(),
            text: "a".into(),
            confidence,
            iteration: 1,
        }
    }

    #[test]
    fn filter_examples() {
        let pls = vec![pl("a", 0.6), pl("b", -0.2), pl("c", -1.7)];
        let kept = filter_pseudo_labels(&pls, -1.5);
        assert_eq!(kept, pls[..2].to_vec());
        assert_eq!(filter_pseudo_labels(&pls, f64::NEG_INFINITY), pls);
        assert_eq!(filter_pseudo_labels(&pls, -0.2).len(), 2);
        assert_eq!(SelfTrainConfig::default().thresholds[4], -1.5);
    }

    #[test]
    fn config_validation() {
        assert!(SelfTrainConfig::default().validate().is_ok());
        let bad = |thresholds: Vec<f64>, patience| SelfTrainConfig { thresholds, patience, ..SelfTrainConfig::default() }.validate().is_err();
        assert!(bad(vec![], 2));
        assert!(bad(vec![0.0, 0.0], 2));
        assert!(bad(vec![-1.0, 0.0], 2));
        assert!(bad(vec![0.0], 0));
        assert!(!bad(vec![f64::NEG_INFINITY], 1));
    }

    #[test]
    fn report_csv_layout() {
        let r = IterationReport {
            iteration: 1,
            threshold: -0.5,
            n_unlabeled: 4,
            n_kept: 3,
            kept_fraction: 0.75,
            wers: vec![("dev".into(), 12.345), ("other".into(), 1.0)],
            mean_dev_wer: 6.6725,
            labeled_only: false,
        };
        assert_eq!(
            report_csv(&[r]),
            "iteration,threshold,n_unlabeled,n_kept,kept_fraction,dev_wer,other_wer,mean_dev_wer\n1,-0.5,4,3,0.75,12.35,1.00,6.67\n"
        );
    }

    #[test]
    fn pseudo_label_jsonl_round_trip() {
        let pls = vec![pl("x", -0.25), pl("y", 1.5)];
        assert_eq!(parse_pseudo_labels(&pseudo_labels_jsonl(&pls)).unwrap(), pls);
    }

    proptest! {
        #[test]
        fn relaxed_thresholds_keep_supersets(
            conf in prop::collection::vec(-5.0f64..5.0, 0..40),
            t1 in -5.0f64..5.0,
            dt in 0.0f64..5.0,
        ) {
            let pls: Vec<PseudoLabel> = conf.iter().enumerate().map(|(i, &c)| pl(&i.to_string(), c)).collect();
            let strict = filter_pseudo_labels(&pls, t1);
            let relaxed = filter_pseudo_labels(&pls, t1 - dt);
            prop_assert!(strict.iter().all(|p| relaxed.contains(p)));
            let sweep = threshold_sweep(&pls, &DEFAULT_THRESHOLDS, pls.len());
            prop_assert!(sweep.windows(2).all(|w| w[0].2 <= w[1].2));
            for (_, n, f) in sweep {
                prop_assert!(n <= pls.len());
                prop_assert_eq!(f, kept_fraction(n, pls.len()));
            }
        }
    }

    struct Fixture {
        vocab: Vocabulary,
        labeled: Vec<Utterance>,
        unlabeled: Manifest,
        clean_texts: Vec<String>,
        dev: Manifest,
        lm: NGramModel,
        seed: Checkpoint,
    }

    fn fixture() -> Fixture {
        let vocab = Vocabulary::new(" abc".chars()).unwrap();
        let texts: Vec<String> = ["ab c", "ba", "cab ab", "c a", "abc", "ca b", "b c a", "ac"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let spec = EmissionModelSpec {
            means: EmissionModelSpec::random_means(&vocab, 6, 2.0, 5),
            noise_std: 0.3,
            frames_per_symbol: (2, 3),
            rng_seed: 3,
            frame_rate: 100.0,
        };
        let repeated: Vec<String> = texts.iter().cycle().take(texts.len() * 4).cloned().collect();
        let labeled = synthesize_corpus("lab", &repeated, &vocab, &spec, Source::Labeled).unwrap();
        let clean = EmissionModelSpec { noise_std: 0.0, rng_seed: 9, ..spec.clone() };
        let unlabeled = synthesize_corpus("unl", &texts, &vocab, &clean, Source::Unlabeled).unwrap();
        let dev = synthesize_corpus("dev", &texts[..4], &vocab, &EmissionModelSpec { rng_seed: 11, ..spec }, Source::Labeled)
            .unwrap();
        let lm = train_lm(&texts, 3, 0.75).unwrap();
        let train_cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            peak_lr: 0.02,
            hidden: 16,
            context: 1,
            ..TrainConfig::default()
        };
        let params = acoustic::train(&labeled.utterances, &vocab, &train_cfg).unwrap().params;
        Fixture {
            seed: Checkpoint { params, vocab: vocab.clone(), train_cfg },
            vocab,
            labeled: labeled.utterances,
            unlabeled: Manifest::new("unl", Split::Unsplit, unlabeled.utterances).unwrap(),
            clean_texts: texts,
            dev: Manifest::new("dev", Split::Valid, dev.utterances).unwrap(),
            lm,
        }
    }

    #[test]
    fn pseudo_labels_cover_every_utterance_and_recover_clean_texts() {
        let f = fixture();
        let cfg = DecodeConfig { beam_width: 8, ..DecodeConfig::default() };
        let set = generate_pseudo_labels(&f.seed.params, Some(&f.lm), &f.vocab, &f.unlabeled, &cfg, 1).unwrap();
        assert_eq!(set.attempts, f.unlabeled.len());
        assert_eq!(set.labels.len() + set.dropped_empty, set.attempts);
        assert!(set.labels.windows(2).all(|w| w[0].utterance_id < w[1].utterance_id));
        for p in &set.labels {
            let idx: usize = p.utterance_id.rsplit('-').next().unwrap().parse().unwrap();
            assert_eq!(p.text, f.clean_texts[idx], "{}", p.utterance_id);
        }
        let again = generate_pseudo_labels(&f.seed.params, Some(&f.lm), &f.vocab, &f.unlabeled, &cfg, 1).unwrap();
        assert_eq!(pseudo_labels_jsonl(&set.labels), pseudo_labels_jsonl(&again.labels));
    }

    #[test]
    fn frozen_trainer_stops_after_patience() {
        let f = fixture();
        let data = SelfTrainData { labeled: &f.labeled, unlabeled: &f.unlabeled, eval: std::slice::from_ref(&f.dev), lm: Some(&f.lm) };
        let cfg = SelfTrainConfig::default();
        let decode = DecodeConfig { beam_width: 4, ..DecodeConfig::default() };
        let mut calls = 0;
        let out = run_self_training_with(&f.seed, &data, &cfg, &decode, |_| {
            calls += 1;
            Ok(f.seed.params.clone())
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.best_iteration, None);
        assert!(out.reports.iter().all(|r| r.mean_dev_wer == out.baseline_mean_wer));
        for r in &out.reports {
            assert_eq!(r.kept_fraction, r.n_kept as f64 / r.n_unlabeled as f64);
            assert_eq!(r.labeled_only, r.n_kept == 0);
        }
    }

    #[test]
    fn zero_kept_iterations_train_on_labeled_only() {
        let f = fixture();
        let data = SelfTrainData { labeled: &f.labeled, unlabeled: &f.unlabeled, eval: std::slice::from_ref(&f.dev), lm: Some(&f.lm) };
        let cfg = SelfTrainConfig { thresholds: vec![1e9], patience: 1, ..SelfTrainConfig::default() };
        let decode = DecodeConfig { beam_width: 4, ..DecodeConfig::default() };
        let mut sizes = Vec::new();
        let out = run_self_training_with(&f.seed, &data, &cfg, &decode, |set| {
            sizes.push(set.len());
            Ok(f.seed.params.clone())
        })
        .unwrap();
        assert_eq!(sizes, vec![f.labeled.len()]);
        assert!(out.reports[0].labeled_only);
        assert_eq!(out.reports[0].n_kept, 0);
    }

    #[test]
    fn iteration_models_depend_only_on_their_inputs() {
        let f = fixture();
        let data = SelfTrainData { labeled: &f.labeled, unlabeled: &f.unlabeled, eval: std::slice::from_ref(&f.dev), lm: Some(&f.lm) };
        for init in [ModelInit::SeedWeights, ModelInit::SeedInit] {
            let cfg = SelfTrainConfig { thresholds: vec![0.5, -1.0, -2.5], patience: 3, init };
            check_fresh_models(&f, &data, &cfg);
        }
    }

    fn check_fresh_models(f: &Fixture, data: &SelfTrainData<'_>, cfg: &SelfTrainConfig) {
        let decode = DecodeConfig { beam_width: 4, ..DecodeConfig::default() };
        let train_cfg = TrainConfig { epochs: 3, ..f.seed.train_cfg.clone() };
        let out = run_self_training(&f.seed, data, cfg, &train_cfg, &decode).unwrap();
        assert_eq!(out.models.len(), 3);
        let start = match cfg.init {
            ModelInit::SeedWeights => f.seed.params.clone(),
            ModelInit::SeedInit => acoustic::initial_params(6, &f.vocab, &f.seed.train_cfg),
        };
        for (i, kept) in out.kept.iter().enumerate() {
            let set = training_set(&f.labeled, &f.unlabeled, kept);
            let alone = acoustic::train_from(start.clone(), &set, &f.vocab, &train_cfg).unwrap().params;
            let a = Checkpoint { params: alone, vocab: f.vocab.clone(), train_cfg: train_cfg.clone() };
            let b = Checkpoint { params: out.models[i].clone(), vocab: f.vocab.clone(), train_cfg: train_cfg.clone() };
            assert_eq!(a.to_bytes(), b.to_bytes(), "iteration {}", i + 1);
        }
    }
}
