//! Objective machinery for divergence-weighted RLVR training signals:
//! group-normalized advantages, clipped per-token surrogate terms, the
//! k3 KL estimator, and sigmoid divergence weights.
//!
//! These are verification-oriented pure functions, not a training loop.
//! Divergence inputs are caller-supplied scalars (typically k3 estimates
//! on sampled-token ratios) and are treated as detached constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accum::csum;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("reward group needs at least two samples, got {0}")]
    GroupTooSmall(usize),
    #[error("degenerate reward group: standard deviation is {0} (all rewards equal)")]
    GroupDegenerate(f64),
    #[error("probability ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("advantage and divergence lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid schedule: end_step {end_step} must exceed start_step {start_step}")]
    ScheduleInvalid { start_step: u64, end_step: u64 },
    #[error("empty batch: no tokens to average over")]
    EmptyBatch,
    #[error("invalid clip parameters: {0}")]
    ClipInvalid(String),
}

/// Sigmoid weighting parameters: `w = 1 + s * (sigmoid(alpha * kl) - 1/2)`.
/// `alpha > 0` emphasizes high-divergence tokens, `alpha < 0`
/// low-divergence ones; `s` bounds the weight in `[1 - s/2, 1 + s/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingParams {
    pub s: f64,
    pub alpha: f64,
}

/// Asymmetric clipping bounds for the per-token surrogate:
/// ratios clip to `[1 - eps_low, 1 + eps_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipParams {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, RlError> {
        if !(eps_low > 0.0 && eps_high > 0.0) {
            return Err(RlError::ClipInvalid(format!(
                "eps_low and eps_high must be positive, got {eps_low} and {eps_high}"
            )));
        }
        Ok(Self { eps_low, eps_high })
    }
}

/// Group-normalized advantages `(R_i - mean) / std` with the population
/// standard deviation. All-equal reward groups are rejected rather than
/// floored: dynamic sampling excludes them anyway.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = csum(rewards.iter().copied()) / n;
    let var = csum(rewards.iter().map(|r| (r - mean) * (r - mean))) / n;
    let std = var.sqrt();
    if std <= 1e-12 {
        return Err(RlError::GroupDegenerate(std));
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Dynamic-sampling admissibility: a prompt group is kept only when its
/// completions are neither all correct nor all incorrect.
pub fn dynamic_sampling_admissible(correct_count: usize, group_size: usize) -> bool {
    debug_assert!(correct_count <= group_size);
    correct_count > 0 && correct_count < group_size
}

/// Single-sample k3 KL estimate `r - log r - 1` on a probability ratio.
/// Non-negative, zero exactly at `r = 1`.
pub fn k3_kl_estimate(ratio: f64) -> Result<f64, RlError> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(RlError::NonPositiveRatio(ratio));
    }
    Ok((ratio - ratio.ln() - 1.0).max(0.0))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid divergence weight `1 + s * (sigmoid(alpha * kl) - 1/2)`.
/// Equals 1 at `kl = 0` or `alpha = 0`.
pub fn sigmoid_weight(kl: f64, params: &WeightingParams) -> f64 {
    debug_assert!(kl >= 0.0);
    1.0 + params.s * (sigmoid(params.alpha * kl) - 0.5)
}

/// Divergence-weighted advantages `A~_t = w_t * A^_t`, with the weights
/// computed from detached per-token divergences.
pub fn divergence_weighted_advantage(
    advantages: &[f64],
    kls: &[f64],
    params: &WeightingParams,
) -> Result<Vec<f64>, RlError> {
    if advantages.len() != kls.len() {
        return Err(RlError::LengthMismatch(advantages.len(), kls.len()));
    }
    Ok(advantages
        .iter()
        .zip(kls.iter())
        .map(|(&a, &kl)| sigmoid_weight(kl, params) * a)
        .collect())
}

/// Per-token clipped surrogate
/// `min(r * A, clip(r, 1 - eps_low, 1 + eps_high) * A)`.
pub fn dapo_token_objective(ratio: f64, advantage: f64, clip: &ClipParams) -> f64 {
    debug_assert!(ratio > 0.0);
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Token-level group average: the sum of per-token surrogate terms over
/// all sequences divided by the total token count.
pub fn dapo_batch_objective(token_terms: &[Vec<f64>]) -> Result<f64, RlError> {
    let total_tokens: usize = token_terms.iter().map(Vec::len).sum();
    if total_tokens == 0 {
        return Err(RlError::EmptyBatch);
    }
    let sum = csum(token_terms.iter().flatten().copied());
    Ok(sum / total_tokens as f64)
}

/// Piecewise-linear ramp for the weighting steepness `alpha`: zero
/// before `start_step`, linear to `end_value` at `end_step`, constant
/// after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub start_step: u64,
    pub end_step: u64,
    pub end_value: f64,
}

pub fn alpha_schedule(step: u64, schedule: &AlphaSchedule) -> Result<f64, RlError> {
    if schedule.end_step <= schedule.start_step {
        return Err(RlError::ScheduleInvalid {
            start_step: schedule.start_step,
            end_step: schedule.end_step,
        });
    }
    if step <= schedule.start_step {
        return Ok(0.0);
    }
    if step >= schedule.end_step {
        return Ok(schedule.end_value);
    }
    let frac =
        (step - schedule.start_step) as f64 / (schedule.end_step - schedule.start_step) as f64;
    Ok(schedule.end_value * frac)
}
