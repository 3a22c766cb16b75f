//! TOML configuration files for the CLI.
//!
//! Every section and key is optional; missing values take the desk defaults.
//!
//! ```toml
//! k = 4                    # adapted layers for Fisher-selected and random arms
//!
//! [model]                  # n_layers, d_model, n_heads, d_ff, vocab, seq_len
//! [task]                   # k_planted, perturb_rank, perturb_scale, head_scale,
//!                          # residual_scale, batch_size, seq_len,
//!                          # n_train_batches, n_calib_batches, n_eval_batches
//! [fisher]                 # n_batches, variant = "empirical" | "true_fisher"
//! [adapter]                # r, alpha_lora, b_init = "orthonormal" | "zero"
//! [train]                  # lr_a, lr_b, weight_decay, n_c, t_qr, steps
//!
//! [protocol]
//! n_seeds = 3              # protocols use seeds seed, seed+1, ...
//! k_values = [2, 4, 6, 8]  # K sweep grid
//!
//! [output]
//! svg = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ForaError, Result};
use crate::harness::{AdapterConfig, ExperimentConfig, FisherConfig, TaskConfig};
use crate::model::ModelConfig;
use crate::optim::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub n_seeds: usize,
    pub k_values: Vec<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_seeds: 3,
            k_values: vec![2, 4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { svg: true }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub k: usize,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub fisher: FisherConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub output: OutputConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self::from_experiment(ExperimentConfig::default())
    }
}

impl FileConfig {
    pub fn from_experiment(e: ExperimentConfig) -> Self {
        Self {
            k: e.k,
            model: e.model,
            task: e.task,
            fisher: e.fisher,
            adapter: e.adapter,
            train: e.train,
            protocol: ProtocolConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model,
            task: self.task,
            fisher: self.fisher,
            adapter: self.adapter,
            train: self.train,
            k: self.k,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| ForaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ForaError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        if self.protocol.n_seeds == 0 {
            return Err(ForaError::Config("protocol.n_seeds must be >= 1".into()));
        }
        let l = self.model.n_layers;
        if let Some(&k) = self.protocol.k_values.iter().find(|&&k| k == 0 || k > l) {
            return Err(ForaError::KOutOfRange { k, n_layers: l });
        }
        Ok(())
    }

    /// Seeds used by multi-seed protocols.
    pub fn seeds(&self, first: u64) -> Vec<u64> {
        (0..self.protocol.n_seeds as u64).map(|i| first + i).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::BInit;
    use crate::fisher::FisherVariant;

    #[test]
    fn empty_file_gives_defaults() {
        let c = FileConfig::parse("").unwrap();
        assert_eq!(c, FileConfig::default());
        assert_eq!(c.k, 4);
        assert_eq!(c.seeds(10), vec![10, 11, 12]);
    }

    #[test]
    fn partial_sections_override_single_fields() {
        let c = FileConfig::parse(
            "k = 2\n[train]\nsteps = 7\n[adapter]\nb_init = \"zero\"\n[fisher]\nvariant = \"true_fisher\"\n",
        )
        .unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.n_c, 5);
        assert_eq!(c.adapter.b_init, BInit::Zero);
        assert_eq!(c.fisher.variant, FisherVariant::TrueFisher);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "bogus = 1",
            "[train]\nlr = 0.1",
            "k = 0",
            "k = 9",
            "[train]\nn_c = 0",
            "[protocol]\nk_values = [0]",
            "[model]\nn_heads = 3",
            "[fisher]\nn_batches = 64",
        ] {
            let e = FileConfig::parse(text).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = FileConfig::default();
        c.train.steps = 11;
        c.protocol.k_values = vec![1, 8];
        assert_eq!(FileConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
