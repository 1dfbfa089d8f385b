//! Rank-based group relative policy optimization on small tabular
//! sequence policies.
//!
//! A policy samples a group of responses per prompt, an [`oracle::Oracle`]
//! orders them, and each response's advantage comes from how far the
//! policy's own log-probability order disagrees with the oracle's, scored
//! with an nDCG-style penalty. PPO and scalar-reward GRPO are included as
//! baselines over the same rollout machinery.

pub mod advantage;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod rank;
pub mod table;
pub mod trainer;

pub use advantage::{expected_penalty, normalized_reward_advantages, rank_advantages, AdvantageVector};
pub use config::{ConfigError, ExperimentConfig};
pub use env::{Prompt, Scorer, Task, TaskKind, TaskSpec};
pub use error::{Error, Result};
pub use objective::{grpo_loss, grpo_rank_loss, ppo_loss, GroupBatch, KlMode, LossBreakdown, SurrogateConfig};
pub use oracle::{ExactOracle, ExternalOracle, NoisyOracle, Oracle, OracleError, OracleRequest, OracleVerdict};
pub use policy::{Policy, RankBy, TokenSequence, Vocab};
pub use rank::{dcg, ndcg_pair, penalty, PenaltyMode, PenaltyVector, RankPermutation};
pub use trainer::{evaluate, train, train_baseline, Algorithm, EvalReport, StepMetrics, TrainConfig};
