//! Experiment configuration (TOML) and run manifests (JSON).
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [dataset]
//! num_classes = 10
//! train_per_class = 100
//! test_per_class = 30
//! seq_len = 4
//! input_dim = 6144
//! noise_sigma = 8.0
//! seed = 11
//!
//! [model]
//! num_blocks = 4
//! model_dim = 24
//! num_heads = 4
//! ffn_hidden_dim = 24
//!
//! [pretrain]
//! lr = 3e-3
//! epochs = 12
//! batch_size = 32
//! dropout = 0.1
//!
//! [objective]
//! bnd = 4.605170185988092
//!
//! [lora]
//! rank = 8
//! grouping = "block"
//!
//! [forget]
//! lr = 1e-2
//! epochs = 100
//!
//! [[tasks]]
//! forget = [0, 1]
//! data_ratio = 0.1
//!
//! [output]
//! dir = "runs/demo"
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticDatasetConfig;
use crate::engine::{EngineConfig, ForgettingTask};
use crate::error::{Error, Result};
use crate::lora::{Grouping, DEFAULT_ZERO_EPS};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::optim::OptimizerConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub lr: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_min_lr() -> f64 {
    1e-5
}

fn default_weight_decay() -> f64 {
    0.05
}

fn default_pretrain_batch() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.1
}

impl PretrainSection {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    #[serde(default)]
    pub grouping: Grouping,
    #[serde(default = "default_zero_eps")]
    pub zero_eps: f64,
}

fn default_zero_eps() -> f64 {
    DEFAULT_ZERO_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: SyntheticDatasetConfig,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub objective: ObjectiveConfig,
    pub lora: LoraSection,
    pub forget: OptimizerConfig,
    #[serde(default)]
    pub tasks: Vec<ForgettingTask>,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_blocks: self.model.num_blocks,
            model_dim: self.model.model_dim,
            num_heads: self.model.num_heads,
            ffn_hidden_dim: self.model.ffn_hidden_dim,
            seq_len: self.dataset.seq_len,
            input_dim: self.dataset.input_dim,
            num_classes: self.dataset.num_classes,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            objective: self.objective.clone(),
            rank: self.lora.rank,
            grouping: self.lora.grouping,
            optimizer: self.forget.clone(),
            zero_eps: self.lora.zero_eps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| Error::Config(format!("[{name}] {}", strip_prefix(&e))))
        };
        section("dataset", self.dataset.validate())?;
        section("model", self.model_config().validate())?;
        section("pretrain", self.pretrain.optimizer().validate())?;
        if !(0.0..1.0).contains(&self.pretrain.dropout) {
            return Err(Error::Config("[pretrain] dropout must lie in [0, 1)".into()));
        }
        section("objective", self.objective.validate())?;
        section("forget", self.forget.validate())?;
        if self.lora.rank == 0 {
            return Err(Error::Config("[lora] rank must be at least 1".into()));
        }
        let min_dim = self.model.model_dim.min(self.model.ffn_hidden_dim);
        if self.lora.rank >= min_dim {
            return Err(Error::Config(format!(
                "[lora] rank {} must be below min(model_dim, ffn_hidden_dim) = {min_dim}",
                self.lora.rank
            )));
        }
        if self.lora.zero_eps < 0.0 {
            return Err(Error::Config("[lora] zero_eps must be non-negative".into()));
        }
        let c = self.dataset.num_classes;
        let mut seen = std::collections::BTreeSet::new();
        let pretrain_size = c * self.dataset.train_per_class;
        for (i, t) in self.tasks.iter().enumerate() {
            let ctx = |msg: String| Error::Config(format!("[[tasks]] #{}: {msg}", i + 1));
            if t.forget.is_empty() {
                return Err(ctx("forget list is empty".into()));
            }
            for &k in t.forget.iter().chain(&t.exclude_replay) {
                if k >= c {
                    return Err(ctx(format!("class {k} out of range for {c} classes")));
                }
            }
            for &k in &t.forget {
                if !seen.insert(k) {
                    return Err(ctx(format!("class {k} is forgotten more than once")));
                }
            }
            if !(t.data_ratio > 0.0 && t.data_ratio <= 1.0) {
                return Err(ctx(format!("data_ratio {} must lie in (0, 1]", t.data_ratio)));
            }
            let per_class = ((t.data_ratio * self.dataset.train_per_class as f64).round() as usize)
                .clamp(1, self.dataset.train_per_class);
            let used = per_class * (c - seen.len() + t.forget.len());
            if 2 * used >= pretrain_size {
                return Err(ctx(format!(
                    "replay plus forget data ({used} samples) must stay below half of the {pretrain_size} pretraining samples"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Validation(m) | Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub checkpoint_format_version: u32,
    pub config: ExperimentConfig,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, outputs: Vec<PathBuf>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_hash: config.hash()?,
            seed: config.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format_version: crate::checkpoint::VERSION,
            config: config.clone(),
            outputs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.config.validate()?;
        if m.config.hash()? != m.config_hash {
            return Err(Error::Config("manifest hash does not match its config".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_json()?.as_bytes())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
version = 1
seed = 7

[dataset]
num_classes = 4
train_per_class = 20
test_per_class = 5
seq_len = 2
input_dim = 3
noise_sigma = 0.2
seed = 1

[model]
num_blocks = 2
model_dim = 8
num_heads = 2
ffn_hidden_dim = 8

[pretrain]
lr = 1e-2
epochs = 5

[objective]
bnd = 2.772588722239781

[lora]
rank = 2

[forget]
lr = 1e-2
epochs = 3
batch_size = 4

[[tasks]]
forget = [1]

[output]
dir = "out"
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(c.lora.grouping, Grouping::Block);
        assert_eq!(c.objective.beta, 0.15);
        assert_eq!(c.tasks[0].data_ratio, 0.1);
        assert_eq!(c.pretrain.dropout, 0.1);
        assert_eq!(c.model_config().input_dim, 3);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let text = EXAMPLE.replace("rank = 2", "rank = 2\nscale = 4");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("scale"), "{err}");
    }

    #[test]
    fn missing_required_field_is_named() {
        let text = EXAMPLE.replace("bnd = 2.772588722239781", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bnd"), "{err}");
    }

    #[test]
    fn semantic_checks() {
        let bad_rank = EXAMPLE.replace("rank = 2", "rank = 8");
        assert!(ExperimentConfig::from_toml(&bad_rank).is_err());
        let dup = EXAMPLE.replace("forget = [1]", "forget = [1]\n[[tasks]]\nforget = [1]");
        assert!(ExperimentConfig::from_toml(&dup).is_err());
        let greedy = EXAMPLE.replace("forget = [1]", "forget = [1]\ndata_ratio = 0.9");
        assert!(ExperimentConfig::from_toml(&greedy).is_err());
        let v2 = EXAMPLE.replace("version = 1", "version = 2");
        assert!(ExperimentConfig::from_toml(&v2).is_err());
    }

    #[test]
    fn manifest_hash_fixpoint() {
        let c = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        let m = Manifest::new("forget", &c, vec![]).unwrap();
        let back = Manifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.config, c);
        assert_eq!(back.config_hash, c.hash().unwrap());
        let again = ExperimentConfig::from_toml(&back.config.to_toml().unwrap()).unwrap();
        assert_eq!(again.hash().unwrap(), m.config_hash);
    }
}
