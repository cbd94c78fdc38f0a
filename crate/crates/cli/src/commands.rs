//! Subcommand implementations. Every command reads its inputs from the
//! layout and writes its outputs atomically. When an input is missing but
//! lives at a default output location, the stage producing it runs first,
//! so `eval` alone reproduces the whole experiment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use selflabel::acoustic::{self, Checkpoint};
use selflabel::corpus::{load_manifest, write_manifest, Manifest};
use selflabel::decoder::{decode_manifest, nbest_jsonl};
use selflabel::fsutil::write_atomic;
use selflabel::lm::{export_arpa, import_arpa, train_lm, NGramModel};
use selflabel::metrics::eval_csv;
use selflabel::pipeline::{evaluate_modes, raw_pl_config, sweep_csv};
use selflabel::scenario::{build_scenario, toy_vocabulary};
use selflabel::selftrain::{
    filter_pseudo_labels, generate_pseudo_labels, pseudo_labels_jsonl, report_csv, run_self_training,
    threshold_sweep, SelfTrainData,
};

use crate::config::{Config, Layout};

pub struct Ctx {
    pub cfg: Config,
    pub layout: Layout,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

impl Ctx {
    /// Runs `stage` when `path` is a missing default output.
    fn ensure(&self, path: &Path, stage: fn(&Self) -> Result<()>) -> Result<PathBuf> {
        if !path.exists() && self.layout.is_generated(path) {
            stage(self)?;
        }
        Ok(path.to_path_buf())
    }

    fn manifest(&self, path: PathBuf) -> Result<Manifest> {
        let path = self.ensure(&path, Self::synth)?;
        load_manifest(&path).with_context(|| format!("cannot load manifest {}", path.display()))
    }

    fn lm(&self) -> Result<NGramModel> {
        let path = self.ensure(&self.layout.out_file("lm.arpa"), Self::lm_train)?;
        import_arpa(&read_text(&path)?).with_context(|| format!("invalid ARPA file {}", path.display()))
    }

    fn lm_if_used(&self) -> Result<Option<NGramModel>> {
        if self.cfg.decode.use_lm {
            self.lm().map(Some)
        } else {
            Ok(None)
        }
    }

    fn checkpoint(&self, path: PathBuf, stage: fn(&Self) -> Result<()>) -> Result<Checkpoint> {
        let path = self.ensure(&path, stage)?;
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        Checkpoint::from_bytes(&bytes).with_context(|| format!("invalid checkpoint {}", path.display()))
    }

    fn seed_model(&self) -> Result<Checkpoint> {
        self.checkpoint(self.layout.checkpoint(), Self::train)
    }

    fn eval_manifests(&self) -> Result<Vec<Manifest>> {
        self.layout.eval().into_iter().map(|p| self.manifest(p)).collect()
    }

    pub fn synth(&self) -> Result<()> {
        let s = build_scenario(&self.cfg.scenario, self.cfg.seed)?;
        let out = &self.layout.out;
        for (m, name) in [(&s.labeled, "labeled.jsonl"), (&s.unlabeled, "unlabeled.jsonl"), (&s.dev, "dev.jsonl")] {
            let path = out.join(name);
            write_manifest(m, &path).with_context(|| format!("cannot write manifest {}", path.display()))?;
        }
        let mut corpus = s.lm_texts.join("\n");
        corpus.push('\n');
        write(&self.layout.synth_corpus(), corpus.as_bytes())
    }

    pub fn lm_train(&self) -> Result<()> {
        let path = self.ensure(&self.layout.lm_corpus(), Self::synth)?;
        let texts: Vec<String> = read_text(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect();
        let lm = train_lm(&texts, self.cfg.lm.order, self.cfg.lm.discount)
            .with_context(|| format!("cannot train LM on {}", path.display()))?;
        write(&self.layout.out_file("lm.arpa"), export_arpa(&lm).as_bytes())
    }

    pub fn train(&self) -> Result<()> {
        let labeled = self.manifest(self.layout.labeled())?;
        let vocab = toy_vocabulary();
        labeled.check_vocabulary(&vocab)?;
        let (train_cfg, _) = self.cfg.pipeline().seeded_train_configs();
        log::info!("training seed model on {} utterances", labeled.len());
        let out = acoustic::train(&labeled.utterances, &vocab, &train_cfg)?;
        let ckpt = Checkpoint {
            params: out.params,
            vocab,
            train_cfg,
        };
        write(&self.layout.out_file("seed.slm"), &ckpt.to_bytes())
    }

    pub fn decode(&self) -> Result<()> {
        let model = self.seed_model()?;
        let input = self.manifest(self.layout.decode_input())?;
        let lm = self.lm_if_used()?;
        let results = decode_manifest(&model.params, lm.as_ref(), &model.vocab, &input, &self.cfg.decode)?;
        write(&self.layout.out_file("nbest.jsonl"), nbest_jsonl(&results).as_bytes())
    }

    pub fn pl(&self) -> Result<()> {
        let model = self.seed_model()?;
        let unlabeled = self.manifest(self.layout.unlabeled())?;
        let lm = self.lm_if_used()?;
        let set = generate_pseudo_labels(&model.params, lm.as_ref(), &model.vocab, &unlabeled, &self.cfg.decode, 1)?;
        let kept = filter_pseudo_labels(&set.labels, self.cfg.pl.threshold);
        log::info!("kept {} of {} pseudo-labels", kept.len(), unlabeled.len());
        write(&self.layout.out_file("pl.jsonl"), pseudo_labels_jsonl(&kept).as_bytes())
    }

    pub fn selftrain(&self) -> Result<()> {
        let seed = self.seed_model()?;
        let labeled = self.manifest(self.layout.labeled())?;
        let unlabeled = self.manifest(self.layout.unlabeled())?.into_unlabeled();
        let eval = self.eval_manifests()?;
        let lm = self.lm_if_used()?;
        let data = SelfTrainData {
            labeled: &labeled.utterances,
            unlabeled: &unlabeled,
            eval: &eval,
            lm: lm.as_ref(),
        };
        let (_, finetune) = self.cfg.pipeline().seeded_train_configs();
        let outcome = run_self_training(&seed, &data, &self.cfg.selftrain, &finetune, &self.cfg.decode)?;
        for (i, kept) in outcome.kept.iter().enumerate() {
            write(
                &self.layout.out_file(&format!("pl_iter{}.jsonl", i + 1)),
                pseudo_labels_jsonl(kept).as_bytes(),
            )?;
        }
        let sweep = threshold_sweep(&outcome.generated[0].labels, &self.cfg.selftrain.thresholds, unlabeled.len());
        write(&self.layout.out_file("sweep.csv"), sweep_csv(&sweep).as_bytes())?;
        write(&self.layout.out_file("report.csv"), report_csv(&outcome.reports).as_bytes())?;
        let best = Checkpoint {
            params: outcome.best_params,
            vocab: seed.vocab,
            train_cfg: finetune,
        };
        write(&self.layout.out_file("best.slm"), &best.to_bytes())
    }

    /// One fine-tuning round on every non-empty pseudo-label.
    fn raw_pl(&self) -> Result<()> {
        let seed = self.seed_model()?;
        let labeled = self.manifest(self.layout.labeled())?;
        let unlabeled = self.manifest(self.layout.unlabeled())?.into_unlabeled();
        let eval = self.eval_manifests()?;
        let lm = self.lm_if_used()?;
        let data = SelfTrainData {
            labeled: &labeled.utterances,
            unlabeled: &unlabeled,
            eval: &eval,
            lm: lm.as_ref(),
        };
        let (_, finetune) = self.cfg.pipeline().seeded_train_configs();
        let raw_cfg = raw_pl_config(&self.cfg.selftrain);
        let outcome = run_self_training(&seed, &data, &raw_cfg, &finetune, &self.cfg.decode)?;
        write(&self.layout.out_file("pl_raw.jsonl"), pseudo_labels_jsonl(&outcome.kept[0]).as_bytes())?;
        let raw = Checkpoint {
            params: outcome.models.into_iter().next().expect("one iteration ran"),
            vocab: seed.vocab,
            train_cfg: finetune,
        };
        write(&self.layout.out_file("raw_pl.slm"), &raw.to_bytes())
    }

    pub fn eval(&self) -> Result<()> {
        if !self.cfg.decode.use_lm {
            bail!("eval compares decoding with and without the LM; set decode.use_lm = true");
        }
        let seed = self.seed_model()?;
        let raw = self.checkpoint(self.layout.out_file("raw_pl.slm"), Self::raw_pl)?;
        let best = self.checkpoint(self.layout.out_file("best.slm"), Self::selftrain)?;
        let eval = self.eval_manifests()?;
        let lm = self.lm()?;
        let rows = evaluate_modes(
            [&seed.params, &raw.params, &best.params],
            &eval,
            &lm,
            &seed.vocab,
            &self.cfg.decode,
        )?;
        let csv = eval_csv(&rows);
        write(&self.layout.out_file("eval.csv"), csv.as_bytes())?;
        print!("{csv}");
        Ok(())
    }
}
