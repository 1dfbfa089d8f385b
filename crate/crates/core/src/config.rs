//! Experiment configuration file.
//!
//! A JSON document with sections `task`, `policy`, `oracle`, `training` and
//! `output`. Unknown keys anywhere are rejected, and every error names the
//! offending key path (for example `training.optimizer.lr`).

use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Task, TaskKind, TaskSpec};
use crate::oracle::{ExactOracle, ExternalOracle, NoisyOracle, Oracle};
use crate::policy::Policy;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ConfigError {
    fn at(path: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    /// Tokens of history each next-token row conditions on.
    pub context_order: usize,
    /// Adds a learned per-prompt logit offset.
    pub prompt_embedding: bool,
    /// Standard deviation of the Gaussian initial logits; 0 is uniform.
    pub init_scale: f64,
    pub init_seed: u64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            context_order: 2,
            prompt_embedding: true,
            init_scale: 0.0,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleSpec {
    #[default]
    Exact,
    Noisy {
        swap_prob: f64,
        #[serde(default)]
        seed: u64,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// Also write `summary.csv` next to the metrics stream.
    pub csv: bool,
    /// Sampled responses per prompt class in the final evaluation.
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            csv: true,
            eval_samples: 200,
            eval_seed: 0,
        }
    }
}

fn default_task() -> TaskSpec {
    TaskSpec {
        kind: TaskKind::TargetMatch,
        ..TaskSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_task")]
    pub task: TaskSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: default_task(),
            policy: PolicySpec::default(),
            oracle: OracleSpec::default(),
            training: TrainConfig::default(),
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(if path.is_empty() { "<root>" } else { &path }, e.into_inner().to_string())
        })?;
        let cfg = cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Materializes defaults that depend on other fields.
    pub fn resolve(mut self) -> Self {
        self.training = self.training.resolve();
        self
    }

    /// Replaces every run seed (policy init, sampling, oracle noise). The
    /// task seed is left alone so the task itself stays fixed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.policy.init_seed = seed;
        self.training.sampling_seed = seed;
        if let OracleSpec::Noisy { seed: s, .. } = &mut self.oracle {
            *s = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        Task::new(self.task.clone()).map_err(|e| ConfigError::at("task", e.to_string()))?;
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return Err(ConfigError::at("policy.init_scale", "must be finite and >= 0"));
        }
        self.build_policy().map_err(|e| ConfigError::at("policy.context_order", e))?;
        match &self.oracle {
            OracleSpec::Exact => {}
            OracleSpec::Noisy { swap_prob, .. } => {
                if !(0.0..=1.0).contains(swap_prob) {
                    return Err(ConfigError::at("oracle.swap_prob", "must lie in [0, 1]"));
                }
            }
            OracleSpec::External { command, timeout_ms } => {
                if command.is_empty() {
                    return Err(ConfigError::at("oracle.command", "must not be empty"));
                }
                if *timeout_ms == 0 {
                    return Err(ConfigError::at("oracle.timeout_ms", "must be > 0"));
                }
            }
        }
        if self.output.eval_samples == 0 {
            return Err(ConfigError::at("output.eval_samples", "must be >= 1"));
        }
        self.training.validate().map_err(|e| {
            let msg = e.to_string();
            // training messages already start with their key
            let key = msg
                .split_whitespace()
                .find(|w| w.starts_with("training."))
                .unwrap_or("training")
                .to_string();
            ConfigError::at(&key, msg)
        })
    }

    pub fn build_task(&self) -> Result<Task, ConfigError> {
        Task::new(self.task.clone()).map_err(|e| ConfigError::at("task", e.to_string()))
    }

    /// The initial policy described by the `policy` section.
    pub fn build_policy(&self) -> Result<Policy, String> {
        let task = Task::new(self.task.clone()).map_err(|e| e.to_string())?;
        let mut p = Policy::new(
            *task.vocab(),
            self.policy.context_order,
            task.prompt_count(),
            self.policy.prompt_embedding,
        )
        .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.policy.init_seed);
        p.randomize(self.policy.init_scale, &mut rng).map_err(|e| e.to_string())?;
        Ok(p)
    }

    /// Instantiates the configured oracle over `task`.
    pub fn build_oracle<'a>(&self, task: &'a Task) -> std::io::Result<Box<dyn Oracle + 'a>> {
        Ok(match &self.oracle {
            OracleSpec::Exact => Box::new(ExactOracle::new(task)),
            OracleSpec::Noisy { swap_prob, seed } => Box::new(
                NoisyOracle::new(ExactOracle::new(task), *swap_prob, *seed)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?,
            ),
            OracleSpec::External { command, timeout_ms } => Box::new(ExternalOracle::spawn(
                command,
                Duration::from_millis(*timeout_ms),
            )?),
        })
    }
}
