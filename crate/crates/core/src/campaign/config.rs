//! Campaign configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{faults, DatasetConfig};
use crate::graph::Model;
use crate::legality::LegalityThresholds;
use crate::oracles::OracleThresholds;
use crate::scheduler::{Hyperparams, Strategy};
use crate::seeds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("seed model `{path}`: {message}")]
    Seed { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// A DSL file path, or `builtin:<name>` for a bundled seed.
    pub seed_model_path: String,
    pub rounds: usize,
    pub top_k: usize,
    pub strategy: Strategy,
    pub master_seed: u64,
    pub pool_capacity: usize,
    /// Training steps per backend during deep execution of the top-k.
    pub train_steps: usize,
    /// Reward assigned to failed or illegal mutations.
    pub penalty: f64,
    pub arm_faults: Vec<String>,
    pub output_dir: String,
    pub hyperparams: Hyperparams,
    pub legality: LegalityThresholds,
    pub oracles: OracleThresholds,
    pub dataset: DatasetConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed_model_path: "builtin:vgg_small".into(),
            rounds: 100,
            top_k: 8,
            strategy: Strategy::DoubleQ,
            master_seed: 1,
            pool_capacity: 256,
            train_steps: 20,
            penalty: -1.0,
            arm_faults: Vec::new(),
            output_dir: "campaign-out".into(),
            hyperparams: Hyperparams::default(),
            legality: LegalityThresholds::default(),
            oracles: OracleThresholds::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file; a relative seed path resolves against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if !cfg.seed_model_path.starts_with("builtin:") {
            let seed = PathBuf::from(&cfg.seed_model_path);
            if seed.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.seed_model_path = dir.join(seed).display().to_string();
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.pool_capacity < 1 || self.top_k < 1 || self.top_k > self.pool_capacity {
            return bad(format!(
                "top_k must lie in [1, pool_capacity = {}], got {}",
                self.pool_capacity, self.top_k
            ));
        }
        if self.train_steps < 1 {
            return bad("train_steps must be at least 1".into());
        }
        if !self.penalty.is_finite() {
            return bad("penalty must be finite".into());
        }
        if self.dataset.train_samples < 1 || self.dataset.eval_samples < 1 {
            return bad("dataset sample counts must be positive".into());
        }
        self.hyperparams.validate().map_err(ConfigError::Invalid)?;
        self.oracles.validate().map_err(ConfigError::Invalid)?;
        let l = &self.legality;
        let positive = [l.time_ratio, l.grad_high, l.grad_low, l.f16_bound, l.f32_bound, l.f64_bound];
        if positive.iter().any(|v| !(*v > 0.0)) || l.grad_low >= l.grad_high {
            return bad("legality thresholds must be positive with grad_low < grad_high".into());
        }
        if let Some(f) = self.arm_faults.iter().find(|f| faults::lookup(f).is_none()) {
            return bad(format!("unknown fault id `{f}`"));
        }
        Ok(())
    }

    pub fn load_seed(&self) -> Result<Model, ConfigError> {
        let err = |message: String| ConfigError::Seed {
            path: self.seed_model_path.clone(),
            message,
        };
        if let Some(name) = self.seed_model_path.strip_prefix("builtin:") {
            return seeds::builtin(name).ok_or_else(|| err("no such bundled seed".into()));
        }
        let text = std::fs::read_to_string(&self.seed_model_path).map_err(|e| err(e.to_string()))?;
        let id = Path::new(&self.seed_model_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        seeds::load_seed(&id, &text).map_err(|e| err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = CampaignConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, CampaignConfig::default());
        assert!(cfg.load_seed().is_ok());
    }

    #[test]
    fn overrides_and_nested_tables() {
        let cfg = CampaignConfig::from_toml_str(
            "rounds = 5\nstrategy = \"mcmc\"\narm_faults = [\"quadratic-slowdown\"]\n[hyperparams]\nepsilon = 0.5\n[oracles]\nout_dist = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.rounds, 5);
        assert_eq!(cfg.strategy, Strategy::Mcmc);
        assert_eq!(cfg.hyperparams.epsilon, 0.5);
        assert_eq!(cfg.hyperparams.alpha, 0.1);
        assert_eq!(cfg.oracles.out_dist, 0.01);
    }

    #[test]
    fn invalid_configs_are_refused() {
        for text in [
            "rounds = 0",
            "top_k = 0",
            "top_k = 300",
            "arm_faults = [\"no-such-fault\"]",
            "[hyperparams]\nepsilon = 1.5",
            "[oracles]\nmem_cos = -1.0",
            "unknown_key = 3",
            "strategy = \"greedy\"",
        ] {
            assert!(CampaignConfig::from_toml_str(text).is_err(), "{text}");
        }
        let missing = CampaignConfig {
            seed_model_path: "builtin:nope".into(),
            ..CampaignConfig::default()
        };
        assert!(missing.load_seed().is_err());
    }
}
