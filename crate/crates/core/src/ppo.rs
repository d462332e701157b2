//! Loss-side mathematics for chunked PPO.
//!
//! Everything here is scalar and pure: GAE at chunk granularity, the clipped
//! surrogate on the chunk likelihood ratio, the clipped value loss, the tanh
//! warm-up weight and the combined online objective. The trainer turns the
//! per-sample derivatives exposed here into parameter gradients.

use thiserror::Error;

use crate::policy::{ActionChunk, Observation};

#[derive(Debug, Error, PartialEq)]
pub enum PpoError {
    #[error("non-finite reward {reward} at transition {index}")]
    NonFiniteReward { index: usize, reward: f64 },
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
}

/// One chunk-level decision record.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroTransition {
    pub obs: Observation,
    pub chunk: ActionChunk,
    pub old_log_prob: f64,
    /// `sum_i gamma^i r_{t+i}` over the executed steps of the chunk.
    pub reward_agg: f64,
    pub value_old: f64,
    pub next_value_old: f64,
    /// Task success ended the episode inside this chunk.
    pub done: bool,
    /// The time limit ended the episode inside this chunk.
    pub truncated: bool,
    /// Environment steps actually executed (`<= h`).
    pub executed_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageEstimate {
    pub advantage: f64,
    pub return_target: f64,
}

/// Generalized advantage estimation over one rollout segment.
///
/// `done` zeroes the bootstrap; `truncated` keeps the bootstrap through
/// `next_value_old` but cuts the recursion. The final transition of the
/// segment always cuts the recursion.
pub fn compute_gae(
    transitions: &[MacroTransition],
    gamma_macro: f64,
    lambda: f64,
) -> Result<Vec<AdvantageEstimate>, PpoError> {
    if !(gamma_macro > 0.0 && gamma_macro <= 1.0) {
        return Err(PpoError::Gamma(gamma_macro));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PpoError::Lambda(lambda));
    }
    if let Some((index, t)) = transitions.iter().enumerate().find(|(_, t)| !t.reward_agg.is_finite()) {
        return Err(PpoError::NonFiniteReward {
            index,
            reward: t.reward_agg,
        });
    }
    let mut out = vec![
        AdvantageEstimate {
            advantage: 0.0,
            return_target: 0.0
        };
        transitions.len()
    ];
    let mut next_adv = 0.0;
    for (i, t) in transitions.iter().enumerate().rev() {
        let bootstrap = if t.done { 0.0 } else { gamma_macro * t.next_value_old };
        let delta = t.reward_agg + bootstrap - t.value_old;
        let carry = if t.done || t.truncated {
            0.0
        } else {
            gamma_macro * lambda * next_adv
        };
        let advantage = delta + carry;
        out[i] = AdvantageEstimate {
            advantage,
            return_target: advantage + t.value_old,
        };
        next_adv = advantage;
    }
    Ok(out)
}

/// Subtracts the mean and divides by `std + 1e-8` (population std).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / denom);
}

/// Per-transition clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn ppo_surrogate(new_log_prob: f64, old_log_prob: f64, advantage: f64, epsilon: f64) -> f64 {
    surrogate_with_grad(new_log_prob, old_log_prob, advantage, epsilon).0
}

/// Surrogate value and its derivative with respect to `new_log_prob`.
///
/// Inside the clip dead-zone the derivative is exactly zero.
pub fn surrogate_with_grad(new_log_prob: f64, old_log_prob: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let ratio = (new_log_prob - old_log_prob).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// `max((target - v)^2, (target - clip(v, v_old - eps, v_old + eps))^2)`.
pub fn clipped_value_loss(v_new: f64, v_old: f64, target: f64, epsilon: f64) -> f64 {
    value_loss_with_grad(v_new, v_old, target, epsilon).0
}

/// Value loss and its derivative with respect to `v_new`.
pub fn value_loss_with_grad(v_new: f64, v_old: f64, target: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = (target - v_new).powi(2);
    let v_clip = v_new.clamp(v_old - epsilon, v_old + epsilon);
    let clipped = (target - v_clip).powi(2);
    if unclipped >= clipped {
        (unclipped, -2.0 * (target - v_new))
    } else if v_clip == v_new {
        (clipped, -2.0 * (target - v_new))
    } else {
        (clipped, 0.0)
    }
}

/// Warm-up weight `tanh(t / T_warmup)` on the PPO term.
pub fn beta_schedule(t: u64, warmup: u64) -> f64 {
    assert!(warmup > 0, "warm-up length must be positive");
    (t as f64 / warmup as f64).tanh()
}

/// How the PPO weight evolves over optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Tanh { warmup: u64 },
    Constant(f64),
}

impl Schedule {
    pub fn beta(&self, t: u64) -> f64 {
        match *self {
            Schedule::Tanh { warmup } => beta_schedule(t, warmup),
            Schedule::Constant(b) => b,
        }
    }
}

/// Weights applied in [`combined_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub value: f64,
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            value: 0.5,
            entropy: 0.0,
        }
    }
}

/// `beta * (-surrogate) + bc + w_v * value - w_e * entropy`.
///
/// The critic term is not scaled by `beta`.
pub fn combined_loss(
    actor_surrogate_mean: f64,
    bc_loss: f64,
    value_loss: f64,
    entropy: f64,
    beta_t: f64,
    weights: LossWeights,
) -> f64 {
    beta_t * (-actor_surrogate_mean) + bc_loss + weights.value * value_loss - weights.entropy * entropy
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(reward: f64, value: f64, next: f64, done: bool, truncated: bool) -> MacroTransition {
        MacroTransition {
            obs: Observation::new(vec![0.0], 0),
            chunk: ActionChunk::new(vec![0.0], 1, 1),
            old_log_prob: 0.0,
            reward_agg: reward,
            value_old: value,
            next_value_old: next,
            done,
            truncated,
            executed_steps: 1,
        }
    }

    #[test]
    fn single_terminal_transition() {
        let out = compute_gae(&[tr(1.0, 0.5, 123.0, true, false)], 0.99, 0.95).unwrap();
        assert_eq!(out[0].advantage, 0.5);
        assert_eq!(out[0].return_target, 1.0);
    }

    #[test]
    fn lambda_zero_is_td_residual() {
        let ts = vec![
            tr(0.0, 0.1, 0.2, false, false),
            tr(0.5, 0.2, 0.3, false, false),
            tr(0.0, 0.3, 0.4, false, true),
            tr(1.0, 0.4, 0.0, true, false),
        ];
        let out = compute_gae(&ts, 0.9, 0.0).unwrap();
        for (t, a) in ts.iter().zip(&out) {
            let boot = if t.done { 0.0 } else { 0.9 * t.next_value_old };
            assert!((a.advantage - (t.reward_agg + boot - t.value_old)).abs() < 1e-15);
        }
    }

    #[test]
    fn truncation_bootstraps_but_cuts() {
        let ts = vec![tr(0.0, 0.0, 1.0, false, true), tr(5.0, 0.0, 0.0, true, false)];
        let out = compute_gae(&ts, 0.5, 1.0).unwrap();
        assert_eq!(out[0].advantage, 0.5);
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(compute_gae(&[], 0.99, 0.95).unwrap().is_empty());
        assert!(matches!(
            compute_gae(&[tr(f64::NAN, 0.0, 0.0, false, false)], 0.99, 0.95),
            Err(PpoError::NonFiniteReward { index: 0, .. })
        ));
    }

    #[test]
    fn surrogate_cases() {
        assert_eq!(ppo_surrogate(-1.3, -1.3, 0.7, 0.2), 0.7);
        let r15 = 1.5f64.ln();
        assert!((ppo_surrogate(r15, 0.0, 2.0, 0.2) - 2.4).abs() < 1e-12);
        let r05 = 0.5f64.ln();
        assert!((ppo_surrogate(r05, 0.0, -1.0, 0.2) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn value_loss_cases() {
        assert_eq!(clipped_value_loss(0.3, 0.3, 0.3, 0.2), 0.0);
        assert!((clipped_value_loss(0.5, 0.0, 1.0, 0.2) - 0.64).abs() < 1e-12);
        assert!((clipped_value_loss(0.1, 0.0, 1.0, 0.2) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta_schedule(0, 40_000), 0.0);
        assert!((beta_schedule(2000, 2000) - 0.761_594_155_955_764_9).abs() < 1e-12);
        assert!((beta_schedule(20_000, 2000) - 1.0).abs() < 1e-8);
        assert_eq!(Schedule::Constant(1.0).beta(0), 1.0);
    }

    #[test]
    fn combined_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(combined_loss(3.0, 0.7, 0.4, 1.0, 0.0, w), 0.7 + 0.2);
        assert_eq!(combined_loss(2.0, 0.0, 0.0, 5.0, 1.0, w), -2.0);
        assert!((combined_loss(1.0, 0.7, 0.4, 0.0, 0.5, w) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn normalization_moments() {
        let mut a = vec![1.0, 2.0, 3.0, 10.0, -4.0];
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }
}
