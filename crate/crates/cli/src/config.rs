use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use selflabel::acoustic::TrainConfig;
use selflabel::decoder::DecodeConfig;
use selflabel::pipeline::{LmConfig, PipelineConfig};
use selflabel::scenario::ScenarioConfig;
use selflabel::selftrain::SelfTrainConfig;

/// Input and output locations. Relative paths resolve against the config
/// file's directory. Unset inputs default to the files `synth` writes into
/// the output directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub lm_corpus: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    #[serde(default)]
    pub eval: Vec<PathBuf>,
    /// Manifest read by `decode`.
    pub decode_input: Option<PathBuf>,
    /// Checkpoint read by `decode` and `pl`.
    pub checkpoint: Option<PathBuf>,
}

fn default_pl_threshold() -> f64 {
    -1.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlConfig {
    #[serde(default = "default_pl_threshold")]
    pub threshold: f64,
}

impl Default for PlConfig {
    fn default() -> Self {
        Self {
            threshold: default_pl_threshold(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub selftrain: SelfTrainConfig,
    #[serde(default)]
    pub pl: PlConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .map_or(String::new(), |l| format!(" line {l}:"));
            anyhow::anyhow!("invalid config {}:{} {}", path.display(), line, e.message().trim())
        })?;
        cfg.train.validate().context("invalid [train] section")?;
        cfg.finetune.validate().context("invalid [finetune] section")?;
        cfg.selftrain.validate().context("invalid [selftrain] section")?;
        Ok(cfg)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            scenario: self.scenario.clone(),
            lm: self.lm.clone(),
            train: self.train.clone(),
            finetune: self.finetune.clone(),
            decode: self.decode.clone(),
            selftrain: self.selftrain.clone(),
        }
    }
}

/// Resolved file locations for one invocation.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    base: PathBuf,
    paths: PathsConfig,
}

impl Layout {
    pub fn new(config_path: &Path, paths: &PathsConfig, out_override: Option<&Path>) -> Self {
        let base = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let out = match (out_override, &paths.out_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(o)) => base.join(o),
            (None, None) => base.join("out"),
        };
        Self {
            out,
            base,
            paths: paths.clone(),
        }
    }

    fn pick(&self, configured: &Option<PathBuf>, default: &str) -> PathBuf {
        match configured {
            Some(p) => self.base.join(p),
            None => self.out.join(default),
        }
    }

    /// True when `path` is a default output location rather than a
    /// configured input, so a missing file may be produced on demand.
    pub fn is_generated(&self, path: &Path) -> bool {
        path.starts_with(&self.out)
    }

    pub fn lm_corpus(&self) -> PathBuf {
        self.pick(&self.paths.lm_corpus, "lm_corpus.txt")
    }
    pub fn synth_corpus(&self) -> PathBuf {
        self.out.join("lm_corpus.txt")
    }
    pub fn labeled(&self) -> PathBuf {
        self.pick(&self.paths.labeled, "labeled.jsonl")
    }
    pub fn unlabeled(&self) -> PathBuf {
        self.pick(&self.paths.unlabeled, "unlabeled.jsonl")
    }
    pub fn eval(&self) -> Vec<PathBuf> {
        if self.paths.eval.is_empty() {
            vec![self.out.join("dev.jsonl")]
        } else {
            self.paths.eval.iter().map(|p| self.base.join(p)).collect()
        }
    }
    pub fn decode_input(&self) -> PathBuf {
        self.pick(&self.paths.decode_input, "dev.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.pick(&self.paths.checkpoint, "seed.slm")
    }
    pub fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use selflabel::pipeline::toy_config;
    use selflabel::scenario::build_text_material;

    fn toy_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../toy")
    }

    #[test]
    fn shipped_toy_config_matches_library_settings() {
        let cfg = Config::load(&toy_dir().join("toy.cfg")).unwrap();
        assert_eq!(cfg.pipeline(), toy_config(1));
        assert_eq!(cfg.paths.lm_corpus.as_deref(), Some(Path::new("corpus.txt")));
    }

    #[test]
    fn shipped_corpus_is_the_scenario_lm_text() {
        let text = std::fs::read_to_string(toy_dir().join("corpus.txt")).unwrap();
        let (_, lm_texts) = build_text_material(&toy_config(1).scenario);
        assert_eq!(text.lines().collect::<Vec<_>>(), lm_texts);
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[decode]\nbeam_widht = 3\n").unwrap();
        let err = format!("{:#}", Config::load(&p).unwrap_err());
        assert!(err.contains("beam_widht"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn layout_resolves_relative_to_config() {
        let paths = PathsConfig {
            labeled: Some("data/l.jsonl".into()),
            ..Default::default()
        };
        let l = Layout::new(Path::new("/x/y/c.toml"), &paths, None);
        assert_eq!(l.labeled(), Path::new("/x/y/data/l.jsonl"));
        assert_eq!(l.unlabeled(), Path::new("/x/y/out/unlabeled.jsonl"));
        assert!(l.is_generated(&l.unlabeled()));
        assert!(!l.is_generated(&l.labeled()));
        let l = Layout::new(Path::new("c.toml"), &paths, Some(Path::new("/tmp/o")));
        assert_eq!(l.checkpoint(), Path::new("/tmp/o/seed.slm"));
    }
}
