//! Analytic-versus-finite-difference gradient checks on random small
//! instances of every objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::advantage::AdvantageVector;
use crate::env::Prompt;
use crate::error::{Error, Result};
use crate::objective::{
    grpo_loss, grpo_rank_loss, importance_ratios, ppo_loss, GroupBatch, KlMode, SurrogateConfig,
    ValueParams,
};
use crate::policy::{predicted_ranks, Policy, RankBy, TokenSequence, Vocab};
use crate::rank::{group_penalties, PenaltyMode, RankPermutation};
use crate::advantage::rank_advantages;

/// Central-difference step on each logit.
pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so parameters whose true
/// derivative is (near) zero are judged on absolute error.
pub const ERROR_FLOOR: f64 = 1e-4;

/// Instances with any importance ratio this close to a clip edge are
/// redrawn: the objective is not differentiable there.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub max_vocab: usize,
    pub max_order: usize,
    pub max_group: usize,
    pub max_len: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            instances: 120,
            max_vocab: 5,
            max_order: 2,
            max_group: 4,
            max_len: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    GrpoRank,
    Grpo,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub index: usize,
    pub loss: LossKind,
    pub kl_mode: KlMode,
    pub vocab: usize,
    pub context_order: usize,
    pub group_size: usize,
    pub params_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Largest relative error of the PPO value-baseline gradient.
    pub value_max_rel_error: f64,
    pub redrawn: usize,
    pub instances: Vec<InstanceResult>,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance && self.value_max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

struct Instance {
    policy: Policy,
    reference: Policy,
    batch: GroupBatch,
    rewards: Vec<f64>,
    values: ValueParams,
    cfg: SurrogateConfig,
}

fn near_kink(inst: &Instance) -> Result<bool> {
    for (r, old) in inst.batch.responses.iter().zip(&inst.batch.reference_traces) {
        let cur = inst.policy.sequence_log_prob(inst.batch.prompt, r);
        for ratio in importance_ratios(&cur, old)? {
            let eps = inst.cfg.eps;
            if (ratio - (1.0 - eps)).abs() < KINK_MARGIN || (ratio - (1.0 + eps)).abs() < KINK_MARGIN {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

fn draw(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, loss: LossKind, kl_mode: KlMode) -> Result<Instance> {
    let v = rng.random_range(2..=cfg.max_vocab.max(2));
    let vocab = Vocab::new(v, rng.random_range(0..v))?;
    let order = rng.random_range(0..=cfg.max_order);
    let prompts = rng.random_range(1..=3);
    let embed = rng.random_bool(0.5);
    let k = rng.random_range(2..=cfg.max_group.max(2));
    let max_len = rng.random_range(1..=cfg.max_len.max(1));

    let mut reference = Policy::new(vocab, order, prompts, embed)?;
    reference.randomize(1.0, rng)?;
    let mut policy = reference.clone();
    // a quarter of instances sit exactly at the snapshot
    if rng.random_bool(0.75) {
        let scale = rng.random_range(0.05..0.4);
        let mut noise = Policy::new(vocab, order, prompts, embed)?;
        noise.randomize(scale, rng)?;
        for (p, n) in policy.params_mut().iter_mut().zip(noise.params()) {
            *p += n;
        }
    }

    let prompt = Prompt(rng.random_range(0..prompts));
    let responses: Vec<TokenSequence> =
        (0..k).map(|_| policy.sample_response(prompt, max_len, rng)).collect();
    let rewards: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let values = ValueParams((0..prompts).map(|_| rng.random_range(-1.0..1.0)).collect());

    let advantages = match loss {
        LossKind::GrpoRank => {
            let totals: Vec<f64> = responses
                .iter()
                .map(|r| RankBy::Sum.score(&policy.sequence_log_prob(prompt, r)))
                .collect();
            let predicted = predicted_ranks(&totals)?;
            let mut order: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let truth = RankPermutation::from_order(&order)?;
            let mode = if rng.random_bool(0.5) { PenaltyMode::TableConsistent } else { PenaltyMode::AsWritten };
            rank_advantages(&group_penalties(&predicted, &truth, mode)?)?
        }
        _ => AdvantageVector::zeros(k),
    };
    let batch = GroupBatch::new(&reference, prompt, responses, advantages)?;
    let cfg = SurrogateConfig {
        eps: rng.random_range(0.1..0.3),
        beta: rng.random_range(0.0..0.2),
        c_entropy: rng.random_range(0.0..0.1),
        kl_mode,
    };
    Ok(Instance { policy, reference, batch, rewards, values, cfg })
}

fn objective_value(inst: &Instance, policy: &Policy, loss: LossKind) -> Result<(f64, Vec<f64>)> {
    Ok(match loss {
        LossKind::GrpoRank => {
            let o = grpo_rank_loss(policy, &inst.reference, &inst.batch, &inst.cfg)?;
            (o.breakdown.total, o.gradient.0)
        }
        LossKind::Grpo => {
            let o = grpo_loss(policy, &inst.reference, &inst.batch, &inst.rewards, &inst.cfg)?;
            (o.breakdown.total, o.gradient.0)
        }
        LossKind::Ppo => {
            let o = ppo_loss(policy, &inst.reference, &inst.batch, &inst.rewards, &inst.values, &inst.cfg)?;
            (o.objective.breakdown.total, o.objective.gradient.0)
        }
    })
}

fn check_instance(inst: &Instance, loss: LossKind) -> Result<(usize, f64)> {
    let (_, analytic) = objective_value(inst, &inst.policy, loss)?;
    let mut probe = inst.policy.clone();
    let mut worst = 0.0f64;
    for (j, &a) in analytic.iter().enumerate() {
        let x = probe.params()[j];
        probe.params_mut()[j] = x + STEP;
        let (up, _) = objective_value(inst, &probe, loss)?;
        probe.params_mut()[j] = x - STEP;
        let (down, _) = objective_value(inst, &probe, loss)?;
        probe.params_mut()[j] = x;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok((analytic.len(), worst))
}

/// `V` enters only the PPO value loss `1/2 mean (V - R)^2`.
fn check_value_gradient(inst: &Instance) -> Result<f64> {
    let out = ppo_loss(&inst.policy, &inst.reference, &inst.batch, &inst.rewards, &inst.values, &inst.cfg)?;
    let mut worst = 0.0f64;
    for j in 0..inst.values.0.len() {
        let mut shifted = inst.values.clone();
        shifted.0[j] += STEP;
        let up = ppo_loss(&inst.policy, &inst.reference, &inst.batch, &inst.rewards, &shifted, &inst.cfg)?.value_loss;
        shifted.0[j] -= 2.0 * STEP;
        let down = ppo_loss(&inst.policy, &inst.reference, &inst.batch, &inst.rewards, &shifted, &inst.cfg)?.value_loss;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(out.value_gradient[j], numeric));
    }
    Ok(worst)
}

/// Cycles through every (loss, KL mode) pair across `config.instances`
/// random instances.
pub fn run(config: &GradcheckConfig, tolerance: f64) -> Result<GradcheckReport> {
    if config.max_vocab < 2 || config.max_group < 2 || config.max_len == 0 {
        return Err(Error::InvalidArgument(
            "gradcheck needs max_vocab >= 2, max_group >= 2 and max_len >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let kinds = [LossKind::GrpoRank, LossKind::Grpo, LossKind::Ppo];
    let modes = [KlMode::Sampled, KlMode::Exact];
    let mut results = Vec::with_capacity(config.instances);
    let mut redrawn = 0;
    let mut value_worst = 0.0f64;
    for index in 0..config.instances {
        let loss = kinds[index % 3];
        let kl_mode = modes[(index / 3) % 2];
        let inst = loop {
            let inst = draw(&mut rng, config, loss, kl_mode)?;
            if !near_kink(&inst)? {
                break inst;
            }
            redrawn += 1;
        };
        let (params_checked, max_rel_error) = check_instance(&inst, loss)?;
        if loss == LossKind::Ppo {
            value_worst = value_worst.max(check_value_gradient(&inst)?);
        }
        results.push(InstanceResult {
            index,
            loss,
            kl_mode,
            vocab: inst.policy.vocab().size(),
            context_order: inst.policy.context_order(),
            group_size: inst.batch.len(),
            params_checked,
            max_rel_error,
        });
    }
    Ok(GradcheckReport {
        config: *config,
        tolerance,
        max_rel_error: results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        value_max_rel_error: value_worst,
        redrawn,
        instances: results,
    })
}
