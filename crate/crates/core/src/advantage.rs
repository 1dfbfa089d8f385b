//! Per-response advantages from rank penalties or scalar rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank::PenaltyVector;

/// One advantage per response. Every token of a response shares its
/// response's advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdvantageVector(pub Vec<f64>);

impl AdvantageVector {
    pub fn zeros(k: usize) -> Self {
        AdvantageVector(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean_abs(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|a| a.abs()).sum::<f64>() / self.0.len() as f64
    }
}

/// Mean penalty over the group, including every response.
pub fn expected_penalty(deltas: &PenaltyVector) -> Result<f64> {
    let d = deltas.as_slice();
    if d.is_empty() {
        return Err(Error::EmptyGroup);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `mean(delta) - delta_i`: responses the policy already places where the
/// oracle does get positive advantage.
pub fn rank_advantages(deltas: &PenaltyVector) -> Result<AdvantageVector> {
    let mean = expected_penalty(deltas)?;
    if deltas.len() < 2 {
        return Err(Error::DegenerateGroup(deltas.len()));
    }
    if !mean.is_finite() {
        return Err(Error::NonFinite("penalties"));
    }
    Ok(AdvantageVector(deltas.as_slice().iter().map(|d| mean - d).collect()))
}

/// Group-normalized rewards `(r - mean) / std` with the population standard
/// deviation. A zero-variance group yields all zeros.
pub fn normalized_reward_advantages(rewards: &[f64]) -> Result<AdvantageVector> {
    if rewards.len() < 2 {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards"));
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
    let std = var.sqrt();
    // spread below this is rounding noise from the mean subtraction
    if std == 0.0 || std <= 4.0 * f64::EPSILON * mean.abs() {
        return Ok(AdvantageVector::zeros(rewards.len()));
    }
    Ok(AdvantageVector(rewards.iter().map(|r| (r - mean) / std).collect()))
}
