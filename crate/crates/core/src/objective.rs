//! Clipped surrogate objectives with KL and entropy regularization.
//!
//! All three objectives are returned as quantities to MAXIMIZE together
//! with their exact gradient with respect to the current policy's
//! parameters. The reference policy's traces are constants.
//!
//! The group objectives (rank and scalar GRPO) normalize per response:
//!
//! ```text
//! J = 1/G sum_i 1/|o_i| sum_t min(r_t A_i, clip(r_t, 1-eps, 1+eps) A_i)
//!     - beta * KL + c_entropy * H
//! ```
//!
//! PPO averages the same clipped term over every token of the batch and
//! carries no entropy bonus.

use serde::{Deserialize, Serialize};

use crate::advantage::{normalized_reward_advantages, AdvantageVector};
use crate::env::Prompt;
use crate::error::{Error, Result};
use crate::policy::{Gradient, LogProbTrace, Policy, TokenSequence};

/// How the KL penalty is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `exp(ref - cur) - (ref - cur) - 1` on the generated tokens.
    #[default]
    Sampled,
    /// `KL(pi_ref(.|ctx) || pi(.|ctx))` over the full vocabulary at every
    /// visited context.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub eps: f64,
    pub beta: f64,
    pub c_entropy: f64,
    pub kl_mode: KlMode,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            eps: 0.2,
            beta: 0.04,
            c_entropy: 0.01,
            kl_mode: KlMode::Sampled,
        }
    }
}

impl SurrogateConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.beta >= 0.0 && self.c_entropy >= 0.0) {
            return Err(Error::InvalidArgument("beta and c_entropy must be >= 0".into()));
        }
        Ok(())
    }
}

/// One prompt's sampled group with reference-policy traces and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub prompt: Prompt,
    pub responses: Vec<TokenSequence>,
    pub reference_traces: Vec<LogProbTrace>,
    pub advantages: AdvantageVector,
}

impl GroupBatch {
    pub fn new(
        reference: &Policy,
        prompt: Prompt,
        responses: Vec<TokenSequence>,
        advantages: AdvantageVector,
    ) -> Result<Self> {
        if advantages.len() != responses.len() {
            return Err(Error::LengthMismatch {
                expected: responses.len(),
                actual: advantages.len(),
            });
        }
        let reference_traces = responses
            .iter()
            .map(|r| reference.sequence_log_prob(prompt, r))
            .collect();
        Ok(GroupBatch {
            prompt,
            responses,
            reference_traces,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub surrogate: f64,
    pub kl_term: f64,
    pub entropy_term: f64,
    pub total: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub gradient: Gradient,
}

/// Per-prompt-class scalar baselines for PPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams(pub Vec<f64>);

impl ValueParams {
    pub fn zeros(prompt_count: usize) -> Self {
        ValueParams(vec![0.0; prompt_count])
    }

    pub fn get(&self, prompt: Prompt) -> f64 {
        self.0[prompt.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoObjective {
    pub objective: Objective,
    /// Gradient of `1/2 mean_i (V - R_i)^2` with respect to each baseline.
    pub value_gradient: Vec<f64>,
    pub value_loss: f64,
}

pub fn importance_ratios(current: &LogProbTrace, reference: &LogProbTrace) -> Result<Vec<f64>> {
    check_lengths(current, reference)?;
    Ok(current
        .per_token
        .iter()
        .zip(&reference.per_token)
        .map(|(c, r)| (c - r).exp())
        .collect())
}

pub fn clip_ratio(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

/// Mean over tokens of `exp(ref - cur) - (ref - cur) - 1`.
pub fn kl_estimate(current: &LogProbTrace, reference: &LogProbTrace) -> Result<f64> {
    check_lengths(current, reference)?;
    if current.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = current
        .per_token
        .iter()
        .zip(&reference.per_token)
        .map(|(c, r)| sampled_kl(r - c))
        .sum();
    Ok(sum / current.len() as f64)
}

fn sampled_kl(d: f64) -> f64 {
    // exp_m1 keeps precision for tiny log-ratio differences
    (d.exp_m1() - d).max(0.0)
}

/// Value and derivative with respect to the current log-probability of
/// `min(r A, clip(r) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = clip_ratio(ratio, eps) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

fn check_lengths(current: &LogProbTrace, reference: &LogProbTrace) -> Result<()> {
    if current.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: current.len(),
        });
    }
    Ok(())
}

/// Token weighting across a batch.
#[derive(Clone, Copy)]
enum Normalization {
    /// `1 / (G |o_i|)`: each response counts equally.
    PerResponse,
    /// `1 / sum_i |o_i|`: each token counts equally.
    PerToken,
}

fn surrogate_objective(
    policy: &Policy,
    reference: &Policy,
    batch: &GroupBatch,
    advantages: &[f64],
    cfg: &SurrogateConfig,
    norm: Normalization,
) -> Result<Objective> {
    cfg.validate()?;
    let g = batch.responses.len();
    if g != advantages.len() || g != batch.reference_traces.len() {
        return Err(Error::LengthMismatch {
            expected: g,
            actual: advantages.len().min(batch.reference_traces.len()),
        });
    }
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("advantages"));
    }
    let total_tokens: usize = batch.responses.iter().map(TokenSequence::len).sum();
    let v = policy.vocab().size();
    let mut grad = Gradient::zeros(policy.num_params());
    let (mut surrogate, mut kl, mut entropy) = (0.0, 0.0, 0.0);
    let mut clipped = 0usize;
    let mut dlogits = vec![0.0; v];

    for (i, response) in batch.responses.iter().enumerate() {
        let reference_trace = &batch.reference_traces[i];
        if reference_trace.len() != response.len() {
            return Err(Error::LengthMismatch {
                expected: response.len(),
                actual: reference_trace.len(),
            });
        }
        if reference_trace.per_token.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("reference trace"));
        }
        let weight = match norm {
            Normalization::PerResponse => 1.0 / (g as f64 * response.len() as f64),
            Normalization::PerToken => 1.0 / total_tokens as f64,
        };
        let adv = advantages[i];
        let steps = policy.steps(batch.prompt, response);
        let reference_steps = match cfg.kl_mode {
            KlMode::Exact => Some(reference.steps(batch.prompt, response)),
            KlMode::Sampled => None,
        };

        for (t, step) in steps.iter().enumerate() {
            let cur = step.log_prob();
            let old = reference_trace.per_token[t];
            let ratio = (cur - old).exp();
            if !ratio.is_finite() {
                return Err(Error::NonFinite("importance ratio"));
            }
            let (term, dterm) = clipped_term(ratio, adv, cfg.eps);
            surrogate += weight * term;
            if (ratio - 1.0).abs() > cfg.eps {
                clipped += 1;
            }

            // coefficient on d(cur)/d(logits) = onehot - p
            let mut on_token = weight * dterm;
            dlogits.iter_mut().for_each(|d| *d = 0.0);

            match &reference_steps {
                None => {
                    let d = old - cur;
                    kl += weight * sampled_kl(d);
                    // d/dcur of exp(d) - d - 1 is 1 - exp(d)
                    on_token -= cfg.beta * weight * (-d.exp_m1());
                }
                Some(ref_steps) => {
                    let r = &ref_steps[t];
                    let step_kl: f64 = r
                        .probs
                        .iter()
                        .zip(&r.log_probs)
                        .zip(&step.log_probs)
                        .map(|((p, lp), lq)| if *p == 0.0 { 0.0 } else { p * (lp - lq) })
                        .sum();
                    kl += weight * step_kl.max(0.0);
                    for (k, d) in dlogits.iter_mut().enumerate() {
                        *d -= cfg.beta * weight * (step.probs[k] - r.probs[k]);
                    }
                }
            }

            let h = step.entropy();
            entropy += weight * h;
            let ent_scale = cfg.c_entropy * weight;
            for (k, d) in dlogits.iter_mut().enumerate() {
                let p = step.probs[k];
                let onehot = if k == step.token { 1.0 } else { 0.0 };
                *d += on_token * (onehot - p);
                if p != 0.0 {
                    *d -= ent_scale * p * (step.log_probs[k] + h);
                }
            }
            policy.accumulate(&mut grad, batch.prompt, step.row, &dlogits, 1.0);
        }
    }

    let breakdown = LossBreakdown {
        surrogate,
        kl_term: kl,
        entropy_term: entropy,
        total: surrogate - cfg.beta * kl + cfg.c_entropy * entropy,
        clip_fraction: clipped as f64 / total_tokens.max(1) as f64,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("objective"));
    }
    Ok(Objective { breakdown, gradient: grad })
}

/// Rank-advantage objective. `batch.advantages` must come from
/// [`crate::advantage::rank_advantages`].
pub fn grpo_rank_loss(
    policy: &Policy,
    reference: &Policy,
    batch: &GroupBatch,
    cfg: &SurrogateConfig,
) -> Result<Objective> {
    if batch.len() < 2 {
        return Err(Error::DegenerateGroup(batch.len()));
    }
    surrogate_objective(
        policy,
        reference,
        batch,
        batch.advantages.as_slice(),
        cfg,
        Normalization::PerResponse,
    )
}

/// Scalar-reward GRPO: advantages are the group-normalized rewards and
/// `batch.advantages` is ignored.
pub fn grpo_loss(
    policy: &Policy,
    reference: &Policy,
    batch: &GroupBatch,
    rewards: &[f64],
    cfg: &SurrogateConfig,
) -> Result<Objective> {
    if batch.len() < 2 {
        return Err(Error::DegenerateGroup(batch.len()));
    }
    if rewards.len() != batch.len() {
        return Err(Error::LengthMismatch {
            expected: batch.len(),
            actual: rewards.len(),
        });
    }
    let adv = normalized_reward_advantages(rewards)?;
    surrogate_objective(policy, reference, batch, adv.as_slice(), cfg, Normalization::PerResponse)
}

/// PPO with advantage `R_i - V(prompt)` broadcast over every token of
/// response `i`. `cfg.c_entropy` is ignored.
pub fn ppo_loss(
    policy: &Policy,
    reference: &Policy,
    batch: &GroupBatch,
    returns: &[f64],
    values: &ValueParams,
    cfg: &SurrogateConfig,
) -> Result<PpoObjective> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup);
    }
    if returns.len() != batch.len() {
        return Err(Error::LengthMismatch {
            expected: batch.len(),
            actual: returns.len(),
        });
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("returns"));
    }
    let baseline = *values
        .0
        .get(batch.prompt.0)
        .ok_or_else(|| Error::InvalidArgument(format!("no value for {}", batch.prompt)))?;
    if !baseline.is_finite() {
        return Err(Error::NonFinite("value baseline"));
    }
    let adv: Vec<f64> = returns.iter().map(|r| r - baseline).collect();
    let ppo_cfg = SurrogateConfig { c_entropy: 0.0, ..*cfg };
    let objective =
        surrogate_objective(policy, reference, batch, &adv, &ppo_cfg, Normalization::PerToken)?;
    let k = returns.len() as f64;
    let mut value_gradient = vec![0.0; values.0.len()];
    value_gradient[batch.prompt.0] = returns.iter().map(|r| baseline - r).sum::<f64>() / k;
    let value_loss = returns.iter().map(|r| 0.5 * (baseline - r).powi(2)).sum::<f64>() / k;
    Ok(PpoObjective {
        objective,
        value_gradient,
        value_loss,
    })
}
