//! Rollout, ranking and update loop.
//!
//! Every epoch starts by freezing a reference copy of the policy. Every
//! step then samples a batch of prompts, generates a group of responses per
//! prompt from the *current* policy, turns feedback into per-response
//! advantages and applies one optimizer update from the batch-averaged
//! objective gradient.
//!
//! For [`Algorithm::GrpoRank`] the feedback is the oracle's ranking compared
//! against the ranking implied by the policy's own log-probabilities. The
//! baselines score responses with the task's hidden quality function
//! directly.
//!
//! Randomness is split into independent streams: prompt choice and each
//! group's sampling derive from `sampling_seed`, so the oracle's own noise
//! never perturbs what gets sampled, and parallel rollouts reproduce the
//! single-threaded run bit for bit.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{normalized_reward_advantages, rank_advantages, AdvantageVector};
use crate::env::{Prompt, Scorer, Task};
use crate::error::Error;
use crate::objective::{
    grpo_loss, grpo_rank_loss, ppo_loss, GroupBatch, KlMode, LossBreakdown, Objective,
    SurrogateConfig, ValueParams,
};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::oracle::{Oracle, OracleError, OracleRequest};
use crate::policy::{predicted_ranks, Gradient, Policy, RankBy, TokenSequence};
use crate::rank::{group_penalties, spearman, spearman_scores, PenaltyMode, RankPermutation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    GrpoRank,
    Grpo,
    Ppo,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::GrpoRank => "grpo_rank",
            Algorithm::Grpo => "grpo",
            Algorithm::Ppo => "ppo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Responses per prompt. Defaults to 5, or 2 for PPO.
    pub group_size: Option<usize>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Prompts per step.
    pub batch_size: usize,
    pub eps: f64,
    pub beta: f64,
    pub c_entropy: f64,
    pub kl_mode: KlMode,
    pub optimizer: OptimizerConfig,
    pub penalty_mode: PenaltyMode,
    pub rank_by: RankBy,
    pub sampling_seed: u64,
    /// SGD step size for the PPO value baselines.
    pub value_lr: f64,
    /// Baselines see `reward_scale * score + reward_shift`.
    pub reward_scale: f64,
    pub reward_shift: f64,
    /// Control runs: force every advantage to zero, leaving only the KL
    /// and entropy terms.
    pub zero_advantage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::GrpoRank,
            group_size: None,
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 4,
            eps: 0.2,
            beta: 0.04,
            c_entropy: 0.01,
            kl_mode: KlMode::Sampled,
            optimizer: OptimizerConfig::default(),
            penalty_mode: PenaltyMode::TableConsistent,
            rank_by: RankBy::Sum,
            sampling_seed: 1,
            value_lr: 0.1,
            reward_scale: 1.0,
            reward_shift: 0.0,
            zero_advantage: false,
        }
    }
}

impl TrainConfig {
    pub fn resolved_group_size(&self) -> usize {
        self.group_size.unwrap_or(match self.algorithm {
            Algorithm::Ppo => 2,
            Algorithm::GrpoRank | Algorithm::Grpo => 5,
        })
    }

    /// Fills defaults that depend on other fields.
    pub fn resolve(mut self) -> Self {
        self.group_size = Some(self.resolved_group_size());
        self
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            eps: self.eps,
            beta: self.beta,
            c_entropy: self.c_entropy,
            kl_mode: self.kl_mode,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let g = self.resolved_group_size();
        if self.algorithm != Algorithm::Ppo && g < 2 {
            return bad(format!("training.group_size must be >= 2, got {g}"));
        }
        if g < 1 {
            return bad("training.group_size must be >= 1".into());
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("training.eps must be > 0, got {}", self.eps));
        }
        if !(self.beta >= 0.0 && self.c_entropy >= 0.0) {
            return bad("training.beta and training.c_entropy must be >= 0".into());
        }
        if !(self.optimizer.lr() >= 0.0 && self.optimizer.lr().is_finite()) {
            return bad(format!("training.optimizer.lr must be >= 0, got {}", self.optimizer.lr()));
        }
        if !(self.value_lr >= 0.0 && self.value_lr.is_finite()) {
            return bad(format!("training.value_lr must be >= 0, got {}", self.value_lr));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite() && self.reward_shift.is_finite()) {
            return bad("training.reward_scale must be > 0 and reward_shift finite".into());
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return bad("training.batch_size and training.steps_per_epoch must be >= 1".into());
        }
        Ok(())
    }
}

/// One training step's observables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub objective: LossBreakdown,
    /// Mean hidden quality of every response sampled this step.
    pub mean_true_score: f64,
    /// Group-mean Spearman correlation between the policy's log-probability
    /// order and the feedback order (oracle verdict, or true scores for the
    /// baselines).
    pub rank_agreement: f64,
    pub mean_abs_advantage: f64,
    pub kept_groups: usize,
    pub dropped_groups: usize,
    /// PPO value-baseline loss; zero for the group methods.
    pub value_loss: f64,
}

pub trait MetricsSink {
    fn record(&mut self, metrics: &StepMetrics) -> io::Result<()>;
}

impl MetricsSink for Vec<StepMetrics> {
    fn record(&mut self, metrics: &StepMetrics) -> io::Result<()> {
        self.push(metrics.clone());
        Ok(())
    }
}

/// JSON Lines writer: a header record followed by one record per step.
pub struct JsonlSink<W: Write> {
    out: W,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    record: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

impl<W: Write> JsonlSink<W> {
    pub fn new<H: Serialize>(mut out: W, header: &H) -> io::Result<Self> {
        serde_json::to_writer(&mut out, &Tagged { record: "header", body: header })?;
        out.write_all(b"\n")?;
        Ok(JsonlSink { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn record(&mut self, metrics: &StepMetrics) -> io::Result<()> {
        serde_json::to_writer(&mut self.out, &Tagged { record: "step", body: metrics })?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// State dumped when a run aborts on a non-finite gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    /// `"gradient"` or `"parameters"`.
    pub quantity: &'static str,
    pub step: usize,
    pub epoch: usize,
    pub parameter_index: Option<usize>,
    pub group_objectives: Vec<LossBreakdown>,
    pub max_abs_parameter: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(#[from] Error),
    #[error("step {step}: {source}")]
    Numeric { step: usize, source: Error },
    #[error("non-finite {} at step {}", .0.quantity, .0.step)]
    NonFiniteGradient(Box<Diagnostic>),
    #[error("oracle failed permanently at step {step}: {source}")]
    Oracle { step: usize, source: OracleError },
    #[error("writing metrics: {0}")]
    Io(#[from] io::Error),
}

/// Whether rollouts and per-group objectives fan out over threads. Both
/// modes produce identical results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    SingleThread,
    Parallel,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    /// PPO value baselines; `None` for the group methods.
    pub values: Option<ValueParams>,
    pub steps: usize,
    pub dropped_groups: usize,
}

struct Rollout {
    prompt: Prompt,
    responses: Vec<TokenSequence>,
    scores: Vec<f64>,
}

struct GroupResult {
    objective: Objective,
    agreement: f64,
    mean_abs_advantage: f64,
    value_gradient: Option<Vec<f64>>,
    value_loss: f64,
}

/// Seeds a group's sampling stream from the run seed and the group's
/// global index. Stream 0 is reserved for prompt selection.
fn group_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

fn map_groups<T, U, F>(items: Vec<T>, exec: Execution, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    match exec {
        Execution::SingleThread => items.into_iter().map(f).collect(),
        Execution::Parallel => items.into_par_iter().map(f).collect(),
    }
}

/// Runs a full training job. `oracle` is consulted only by
/// [`Algorithm::GrpoRank`].
pub fn train(
    config: &TrainConfig,
    task: &Task,
    init: Policy,
    oracle: &mut dyn Oracle,
    sink: &mut dyn MetricsSink,
    exec: Execution,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if init.vocab() != task.vocab() || init.prompt_count() != task.prompt_count() {
        return Err(TrainError::Config(Error::InvalidArgument(
            "policy vocab or prompt count does not match the task".into(),
        )));
    }
    if init.params().iter().any(|p| !p.is_finite()) {
        return Err(TrainError::Config(Error::NonFinite("initial policy parameters")));
    }
    let g = config.resolved_group_size();
    let cfg = config.surrogate();
    let max_len = task.max_len();
    let mut policy = init;
    let mut reference = policy.clone();
    let mut optimizer = Optimizer::new(&config.optimizer, policy.num_params());
    let mut values = ValueParams::zeros(task.prompt_count());
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(config.sampling_seed);
    let mut dropped_total = 0usize;
    let mut request_id = 0u64;

    for step in 0..config.total_steps() {
        let epoch = step / config.steps_per_epoch;
        if step % config.steps_per_epoch == 0 {
            reference = policy.clone();
        }

        let prompts: Vec<(usize, Prompt)> = (0..config.batch_size)
            .map(|b| (b, task.sample_prompt(&mut prompt_rng)))
            .collect();
        let rollouts: Vec<Rollout> = {
            let policy = &policy;
            map_groups(prompts, exec, |(b, prompt)| {
                let mut rng = group_rng(config.sampling_seed, (step * config.batch_size + b) as u64);
                let responses: Vec<TokenSequence> =
                    (0..g).map(|_| policy.sample_response(prompt, max_len, &mut rng)).collect();
                let scores = responses.iter().map(|r| task.true_score(prompt, r)).collect();
                Rollout { prompt, responses, scores }
            })
        };

        // oracle calls are serialized; verdicts keep rollout order
        let mut feedback: Vec<Option<RankPermutation>> = Vec::with_capacity(rollouts.len());
        let mut dropped = 0usize;
        for rollout in &rollouts {
            let truth = match config.algorithm {
                Algorithm::GrpoRank => {
                    let request =
                        OracleRequest::new(request_id, rollout.prompt, rollout.responses.clone())
                            .map_err(|source| TrainError::Oracle { step, source })?;
                    request_id += 1;
                    match oracle.rank(&request) {
                        Ok(v) => Some(v.ranking),
                        Err(OracleError::InvalidRequest(msg)) => {
                            return Err(TrainError::Oracle {
                                step,
                                source: OracleError::InvalidRequest(msg),
                            })
                        }
                        Err(source) => {
                            if !oracle.is_alive() {
                                return Err(TrainError::Oracle { step, source });
                            }
                            None
                        }
                    }
                }
                Algorithm::Grpo | Algorithm::Ppo => {
                    if g >= 2 {
                        Some(
                            RankPermutation::from_scores_desc(&rollout.scores)
                                .map_err(|source| TrainError::Numeric { step, source })?,
                        )
                    } else {
                        None
                    }
                }
            };
            if truth.is_none() && config.algorithm == Algorithm::GrpoRank {
                dropped += 1;
            }
            feedback.push(truth);
        }
        dropped_total += dropped;

        let kept: Vec<(&Rollout, Option<RankPermutation>)> = rollouts
            .iter()
            .zip(feedback)
            .filter(|(_, f)| config.algorithm != Algorithm::GrpoRank || f.is_some())
            .collect();
        let results: Vec<Result<GroupResult, Error>> = {
            let (policy, reference, values) = (&policy, &reference, &values);
            map_groups(kept, exec, |(rollout, truth)| {
                group_update(config, &cfg, policy, reference, values, rollout, truth.as_ref())
            })
        };
        let results: Vec<GroupResult> = results
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(|source| TrainError::Numeric { step, source })?;

        let n_kept = results.len();
        let mut breakdown = LossBreakdown::default();
        let mut gradient = Gradient::zeros(policy.num_params());
        let mut value_gradient = vec![0.0; values.0.len()];
        let (mut agreement, mut mean_abs_adv, mut value_loss) = (0.0, 0.0, 0.0);
        if n_kept > 0 {
            let w = 1.0 / n_kept as f64;
            for r in &results {
                let b = &r.objective.breakdown;
                breakdown.surrogate += w * b.surrogate;
                breakdown.kl_term += w * b.kl_term;
                breakdown.entropy_term += w * b.entropy_term;
                breakdown.total += w * b.total;
                breakdown.clip_fraction += w * b.clip_fraction;
                gradient.add_scaled(&r.objective.gradient, w);
                agreement += w * r.agreement;
                mean_abs_adv += w * r.mean_abs_advantage;
                value_loss += w * r.value_loss;
                if let Some(vg) = &r.value_gradient {
                    for (acc, x) in value_gradient.iter_mut().zip(vg) {
                        *acc += w * x;
                    }
                }
            }
            if let Some(index) = gradient.first_non_finite() {
                return Err(TrainError::NonFiniteGradient(Box::new(Diagnostic {
                    quantity: "gradient",
                    step,
                    epoch,
                    parameter_index: Some(index),
                    group_objectives: results.iter().map(|r| r.objective.breakdown).collect(),
                    max_abs_parameter: policy.params().iter().fold(0.0, |m, p| m.max(p.abs())),
                })));
            }
            let before = policy.params().iter().fold(0.0f64, |m, p| m.max(p.abs()));
            optimizer.step(policy.params_mut(), gradient.as_slice());
            if let Some(index) = policy.params().iter().position(|p| !p.is_finite()) {
                return Err(TrainError::NonFiniteGradient(Box::new(Diagnostic {
                    quantity: "parameters",
                    step,
                    epoch,
                    parameter_index: Some(index),
                    group_objectives: results.iter().map(|r| r.objective.breakdown).collect(),
                    max_abs_parameter: before,
                })));
            }
            if config.algorithm == Algorithm::Ppo {
                for (v, dv) in values.0.iter_mut().zip(&value_gradient) {
                    *v -= config.value_lr * dv;
                }
            }
        }

        let all_scores: Vec<f64> = rollouts.iter().flat_map(|r| r.scores.iter().copied()).collect();
        let metrics = StepMetrics {
            step,
            epoch,
            objective: breakdown,
            mean_true_score: all_scores.iter().sum::<f64>() / all_scores.len() as f64,
            rank_agreement: agreement,
            mean_abs_advantage: mean_abs_adv,
            kept_groups: n_kept,
            dropped_groups: dropped,
            value_loss,
        };
        sink.record(&metrics)?;
    }

    Ok(TrainOutcome {
        policy,
        values: (config.algorithm == Algorithm::Ppo).then_some(values),
        steps: config.total_steps(),
        dropped_groups: dropped_total,
    })
}

/// Baseline entry point: same contract as [`train`], for PPO or scalar
/// GRPO configs. Baselines never consult an oracle.
pub fn train_baseline(
    config: &TrainConfig,
    task: &Task,
    init: Policy,
    sink: &mut dyn MetricsSink,
    exec: Execution,
) -> Result<TrainOutcome, TrainError> {
    if config.algorithm == Algorithm::GrpoRank {
        return Err(TrainError::Config(Error::InvalidArgument(
            "train_baseline needs algorithm ppo or grpo".into(),
        )));
    }
    struct NoOracle;
    impl Oracle for NoOracle {
        fn rank(
            &mut self,
            _: &OracleRequest,
        ) -> Result<crate::oracle::OracleVerdict, OracleError> {
            Err(OracleError::Unavailable { reason: "baselines do not use an oracle".into() })
        }
    }
    train(config, task, init, &mut NoOracle, sink, exec)
}

fn group_update(
    config: &TrainConfig,
    cfg: &SurrogateConfig,
    policy: &Policy,
    reference: &Policy,
    values: &ValueParams,
    rollout: &Rollout,
    truth: Option<&RankPermutation>,
) -> Result<GroupResult, Error> {
    let prompt = rollout.prompt;
    let k = rollout.responses.len();
    let rewards: Vec<f64> = rollout
        .scores
        .iter()
        .map(|s| config.reward_scale * s + config.reward_shift)
        .collect();
    let predicted = if k >= 2 {
        let summaries: Vec<f64> = rollout
            .responses
            .iter()
            .map(|r| config.rank_by.score(&policy.sequence_log_prob(prompt, r)))
            .collect();
        Some(predicted_ranks(&summaries)?)
    } else {
        None
    };
    let agreement = match (&predicted, truth) {
        (Some(p), Some(t)) => spearman(p, t)?,
        _ => 0.0,
    };

    if config.zero_advantage {
        let batch = GroupBatch::new(reference, prompt, rollout.responses.clone(), AdvantageVector::zeros(k))?;
        let objective = if k >= 2 {
            grpo_rank_loss(policy, reference, &batch, cfg)?
        } else {
            ppo_loss(policy, reference, &batch, &[values.get(prompt)], values, cfg)?.objective
        };
        return Ok(GroupResult {
            objective,
            agreement,
            mean_abs_advantage: 0.0,
            value_gradient: None,
            value_loss: 0.0,
        });
    }

    match config.algorithm {
        Algorithm::GrpoRank => {
            let (predicted, truth) = match (predicted, truth) {
                (Some(p), Some(t)) => (p, t),
                _ => return Err(Error::DegenerateGroup(k)),
            };
            let deltas = group_penalties(&predicted, truth, config.penalty_mode)?;
            let advantages = rank_advantages(&deltas)?;
            let mean_abs_advantage = advantages.mean_abs();
            let batch = GroupBatch::new(reference, prompt, rollout.responses.clone(), advantages)?;
            Ok(GroupResult {
                objective: grpo_rank_loss(policy, reference, &batch, cfg)?,
                agreement,
                mean_abs_advantage,
                value_gradient: None,
                value_loss: 0.0,
            })
        }
        Algorithm::Grpo => {
            let advantages = normalized_reward_advantages(&rewards)?;
            let mean_abs_advantage = advantages.mean_abs();
            let batch = GroupBatch::new(reference, prompt, rollout.responses.clone(), advantages)?;
            Ok(GroupResult {
                objective: grpo_loss(policy, reference, &batch, &rewards, cfg)?,
                agreement,
                mean_abs_advantage,
                value_gradient: None,
                value_loss: 0.0,
            })
        }
        Algorithm::Ppo => {
            let baseline = values.get(prompt);
            let advantages = AdvantageVector(rewards.iter().map(|r| r - baseline).collect());
            let mean_abs_advantage = advantages.mean_abs();
            let batch = GroupBatch::new(reference, prompt, rollout.responses.clone(), advantages)?;
            let out = ppo_loss(policy, reference, &batch, &rewards, values, cfg)?;
            Ok(GroupResult {
                objective: out.objective,
                agreement,
                mean_abs_advantage,
                value_gradient: Some(out.value_gradient),
                value_loss: out.value_loss,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub prompt: Prompt,
    pub greedy_response: Vec<usize>,
    pub greedy_score: f64,
    pub sampled_mean_score: f64,
    pub rank_agreement: f64,
    /// Groups whose log-probabilities and scores were not all tied; only
    /// these enter `rank_agreement`.
    pub informative_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_per_class: usize,
    pub group_size: usize,
    pub sampled_mean_score: f64,
    pub greedy_mean_score: f64,
    /// Group-mean tie-aware Spearman correlation between the policy's
    /// log-probability order and the exact oracle's order.
    pub rank_agreement: f64,
    pub per_class: Vec<ClassEval>,
}

/// Greedy and sampled decoding for every prompt class. Sampled responses
/// are also grouped `group_size` at a time to measure rank agreement
/// against the exact oracle.
pub fn evaluate(
    policy: &Policy,
    task: &Task,
    n_samples: usize,
    group_size: usize,
    rank_by: RankBy,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport, Error> {
    if group_size < 2 {
        return Err(Error::DegenerateGroup(group_size));
    }
    let n_samples = n_samples.max(group_size);
    let mut per_class = Vec::with_capacity(task.prompt_count());
    for p in 0..task.prompt_count() {
        let prompt = Prompt(p);
        let greedy = policy.greedy_response(prompt, task.max_len());
        let greedy_score = task.true_score(prompt, &greedy);
        let samples: Vec<TokenSequence> =
            (0..n_samples).map(|_| policy.sample_response(prompt, task.max_len(), rng)).collect();
        let scores: Vec<f64> = samples.iter().map(|s| task.true_score(prompt, s)).collect();
        let summaries: Vec<f64> = samples
            .iter()
            .map(|s| rank_by.score(&policy.sequence_log_prob(prompt, s)))
            .collect();
        let mut agreements = Vec::new();
        for gi in 0..n_samples / group_size {
            let range = gi * group_size..(gi + 1) * group_size;
            if let Some(rho) = spearman_scores(&summaries[range.clone()], &scores[range])? {
                agreements.push(rho);
            }
        }
        let informative_groups = agreements.len();
        let agreement = if agreements.is_empty() {
            0.0
        } else {
            agreements.iter().sum::<f64>() / agreements.len() as f64
        };
        per_class.push(ClassEval {
            prompt,
            greedy_response: greedy.tokens,
            greedy_score,
            sampled_mean_score: scores.iter().sum::<f64>() / n_samples as f64,
            rank_agreement: agreement,
            informative_groups,
        });
    }
    let c = per_class.len() as f64;
    Ok(EvalReport {
        samples_per_class: n_samples,
        group_size,
        sampled_mean_score: per_class.iter().map(|e| e.sampled_mean_score).sum::<f64>() / c,
        greedy_mean_score: per_class.iter().map(|e| e.greedy_score).sum::<f64>() / c,
        rank_agreement: per_class.iter().map(|e| e.rank_agreement).sum::<f64>() / c,
        per_class,
    })
}
