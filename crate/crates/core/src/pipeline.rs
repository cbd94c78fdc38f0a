//! The full toy experiment: build the scenario, train the LM and the seed
//! model, run filtered and unfiltered self-training, and evaluate all four
//! modes. All artifacts are returned as bytes keyed by file name so
//! callers decide where (or whether) to write them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acoustic::{self, Checkpoint, ModelError, ModelParams, TrainConfig};
use crate::corpus::{CorpusError, Manifest};
use crate::decoder::DecodeConfig;
use crate::lm::{export_arpa, train_lm, LmError, NGramModel, DEFAULT_DISCOUNT, DEFAULT_ORDER};
use crate::metrics::{eval_csv, evaluate, EvalRow, MetricsError};
use crate::scenario::{build_scenario, Scenario, ScenarioConfig};
use crate::vocab::Vocabulary;
use crate::selftrain::{
    pseudo_labels_jsonl, report_csv, run_self_training, threshold_sweep, SelfTrainConfig, SelfTrainData,
    SelfTrainError, SelfTrainOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SelfTrain(#[from] SelfTrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn d_order() -> usize {
    DEFAULT_ORDER
}
fn d_discount() -> f64 {
    DEFAULT_DISCOUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    #[serde(default = "d_order")]
    pub order: usize,
    #[serde(default = "d_discount")]
    pub discount: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: d_order(),
            discount: d_discount(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub lm: LmConfig,
    /// Seed model training from scratch.
    #[serde(default)]
    pub train: TrainConfig,
    /// Fine-tuning of each self-training iteration from the seed model.
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub selftrain: SelfTrainConfig,
}

impl PipelineConfig {
    /// Training configs with their RNG seeds offset by the run seed.
    pub fn seeded_train_configs(&self) -> (TrainConfig, TrainConfig) {
        let train = TrainConfig {
            rng_seed: self.train.rng_seed.wrapping_add(self.seed),
            ..self.train.clone()
        };
        let finetune = TrainConfig {
            rng_seed: self.finetune.rng_seed.wrapping_add(self.seed),
            ..self.finetune.clone()
        };
        (train, finetune)
    }
}

/// Settings of the shipped toy experiment. The acoustic model here is far
/// smaller than a pretrained encoder, so it trains longer and faster than
/// the defaults; the narrower beam keeps a full run under a minute.
pub fn toy_config(seed: u64) -> PipelineConfig {
    let train = TrainConfig {
        epochs: 40,
        batch_size: 16,
        peak_lr: 0.005,
        hidden: 64,
        ..TrainConfig::default()
    };
    PipelineConfig {
        seed,
        scenario: ScenarioConfig::default(),
        lm: LmConfig::default(),
        finetune: TrainConfig {
            epochs: 10,
            peak_lr: 0.002,
            ..train.clone()
        },
        train,
        decode: DecodeConfig {
            beam_width: 8,
            ..DecodeConfig::default()
        },
        selftrain: SelfTrainConfig::default(),
    }
}

pub const MODE_SEED_NO_LM: &str = "seed_no_lm";
pub const MODE_SEED_LM: &str = "seed_lm";
pub const MODE_RAW_PL: &str = "raw_pl";
pub const MODE_BEST_PL: &str = "best_pl";

pub struct ToyRun {
    pub scenario: Scenario,
    pub lm: NGramModel,
    pub seed: Checkpoint,
    pub eval_rows: Vec<EvalRow>,
    pub filtered: SelfTrainOutcome,
    pub raw: SelfTrainOutcome,
    /// `(threshold, n_kept, kept_fraction)` over the schedule, applied to
    /// the first iteration's pseudo-labels.
    pub sweep: Vec<(f64, usize, f64)>,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl ToyRun {
    pub fn wer(&self, mode: &str) -> f64 {
        let rows: Vec<f64> = self
            .eval_rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.result.wer)
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    }

    /// Best mean dev WER over the filtered iterations.
    pub fn best_filtered_wer(&self) -> f64 {
        self.filtered
            .reports
            .iter()
            .map(|r| r.mean_dev_wer)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn raw_wer(&self) -> f64 {
        self.raw.reports[0].mean_dev_wer
    }
}

pub fn train_seed(scenario: &Scenario, cfg: &TrainConfig) -> Result<Checkpoint, PipelineError> {
    let out = acoustic::train(&scenario.labeled.utterances, &scenario.vocab, cfg)?;
    Ok(Checkpoint {
        params: out.params,
        vocab: scenario.vocab.clone(),
        train_cfg: cfg.clone(),
    })
}

fn checkpoint_bytes(params: &ModelParams, seed: &Checkpoint, cfg: &TrainConfig) -> Vec<u8> {
    Checkpoint {
        params: params.clone(),
        vocab: seed.vocab.clone(),
        train_cfg: cfg.clone(),
    }
    .to_bytes()
}

/// The unfiltered baseline: one iteration keeping every non-empty decode.
pub fn raw_pl_config(cfg: &SelfTrainConfig) -> SelfTrainConfig {
    SelfTrainConfig {
        thresholds: vec![f64::NEG_INFINITY],
        patience: 1,
        ..cfg.clone()
    }
}

/// Scores the seed (without and with the LM), raw-PL and best-PL models on
/// every eval manifest. `models` is `[seed, raw_pl, best_pl]`.
pub fn evaluate_modes(
    models: [&ModelParams; 3],
    eval: &[Manifest],
    lm: &NGramModel,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<Vec<EvalRow>, PipelineError> {
    let no_lm = decode.without_lm();
    let [seed, raw, best] = models;
    let modes: [(&str, &ModelParams, Option<&NGramModel>, &DecodeConfig); 4] = [
        (MODE_SEED_NO_LM, seed, None, &no_lm),
        (MODE_SEED_LM, seed, Some(lm), decode),
        (MODE_RAW_PL, raw, Some(lm), decode),
        (MODE_BEST_PL, best, Some(lm), decode),
    ];
    let mut rows = Vec::new();
    for m in eval {
        for (mode, params, lm, dcfg) in modes {
            rows.push(EvalRow {
                dataset: m.name.clone(),
                mode: mode.to_string(),
                result: evaluate(params, m, lm, vocab, dcfg)?,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(sweep: &[(f64, usize, f64)]) -> String {
    let mut out = String::from("threshold,n_kept,kept_fraction\n");
    for (t, n, f) in sweep {
        out.push_str(&format!("{t},{n},{f}\n"));
    }
    out
}

pub fn run_toy(cfg: &PipelineConfig) -> Result<ToyRun, PipelineError> {
    let scenario = build_scenario(&cfg.scenario, cfg.seed)?;
    let lm = train_lm(&scenario.lm_texts, cfg.lm.order, cfg.lm.discount)?;
    let (train_cfg, finetune_cfg) = cfg.seeded_train_configs();
    log::info!("training seed model on {} utterances", scenario.labeled.len());
    let seed = train_seed(&scenario, &train_cfg)?;

    let eval = std::slice::from_ref(&scenario.dev);
    let data = SelfTrainData {
        labeled: &scenario.labeled.utterances,
        unlabeled: &scenario.unlabeled,
        eval,
        lm: Some(&lm),
    };
    let filtered = run_self_training(&seed, &data, &cfg.selftrain, &finetune_cfg, &cfg.decode)?;
    let raw = run_self_training(&seed, &data, &raw_pl_config(&cfg.selftrain), &finetune_cfg, &cfg.decode)?;

    let raw_params = &raw.models[0];
    let eval_rows = evaluate_modes(
        [&seed.params, raw_params, &filtered.best_params],
        eval,
        &lm,
        &scenario.vocab,
        &cfg.decode,
    )?;

    let sweep = threshold_sweep(
        &filtered.generated[0].labels,
        &cfg.selftrain.thresholds,
        scenario.unlabeled.len(),
    );

    let mut files = BTreeMap::new();
    files.insert("lm.arpa".to_string(), export_arpa(&lm).into_bytes());
    files.insert("seed.slm".to_string(), seed.to_bytes());
    files.insert(
        "best.slm".to_string(),
        checkpoint_bytes(&filtered.best_params, &seed, &finetune_cfg),
    );
    files.insert("raw_pl.slm".to_string(), checkpoint_bytes(raw_params, &seed, &finetune_cfg));
    for (i, kept) in filtered.kept.iter().enumerate() {
        files.insert(format!("pl_iter{}.jsonl", i + 1), pseudo_labels_jsonl(kept).into_bytes());
    }
    files.insert("pl_raw.jsonl".to_string(), pseudo_labels_jsonl(&raw.kept[0]).into_bytes());
    files.insert("report.csv".to_string(), report_csv(&filtered.reports).into_bytes());
    files.insert("sweep.csv".to_string(), sweep_csv(&sweep).into_bytes());
    files.insert("eval.csv".to_string(), eval_csv(&eval_rows).into_bytes());

    Ok(ToyRun {
        scenario,
        lm,
        seed,
        eval_rows,
        filtered,
        raw,
        sweep,
        files,
    })
}
