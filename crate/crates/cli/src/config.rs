use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tristage_core::data::{CorpusConfig, TokenizerConfig};
use tristage_core::model::Arch;
use tristage_core::sample::SamplerConfig;
use tristage_core::train::TrainConfig;

/// The only environment override: where outputs go.
pub const OUT_DIR_ENV: &str = "TRISTAGE_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// The last `heldout` kept pairs are excluded from training.
    pub heldout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { heldout: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: f64,
    pub num_buckets: usize,
    /// Defaults to each stage's training sequence length.
    pub max_distance: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 2,
            ff_mult: 4.0,
            num_buckets: 32,
            max_distance: None,
        }
    }
}

impl ModelSection {
    pub fn arch(&self) -> Arch {
        Arch {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            ff_mult: self.ff_mult,
            num_buckets: self.num_buckets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// A parsed configuration plus the exact text it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub text: String,
}

impl LoadedConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let run: RunConfig = toml::from_str(text).context("parsing configuration")?;
        run.validate()?;
        Ok(Self {
            run,
            text: text.to_string(),
        })
    }

    /// Read a config file; `TRISTAGE_OUT_DIR`, when set, replaces `paths.out_dir`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.run.paths.out_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.text.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus.pairs == 0 || !(self.corpus.duration_s > 0.0) {
            bail!("corpus.pairs and corpus.duration_s must be positive");
        }
        self.corpus.synth.validate()?;
        self.tokenizer.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.tokenizer.semantic_k > 1024 || self.tokenizer.acoustic_k > 1024 {
            bail!("codebook sizes above 1024 are not supported");
        }
        let m = &self.model;
        let probe = tristage_core::model::ModelConfig {
            layers: m.layers,
            d_model: m.d_model,
            heads: m.heads,
            ff_mult: m.ff_mult,
            num_buckets: m.num_buckets,
            max_distance: m.max_distance.unwrap_or(128),
            cond: vec![tristage_core::model::CondSpec { vocab: 1, q: 1 }],
            pred_vocab: 1,
            q_pred: 1,
        };
        probe.validate().context("[model]")?;
        Ok(())
    }
}
