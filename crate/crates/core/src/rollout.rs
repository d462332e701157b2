//! Chunked interaction loop.
//!
//! The policy is queried once per chunk; the chunk runs open-loop for up to
//! `h` environment steps and stops early when the episode ends. Intra-chunk
//! rewards are discounted into a single macro reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::demobuffer::{Source, StepRecord, Trajectory};
use crate::envs::{scripted_expert_noisy, EnvError, EnvState, StepResult, Task};
use crate::policy::{ChunkPolicy, PolicyError, ValueHead};
use crate::ppo::MacroTransition;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("rollout needs at least one macro step")]
    NoMacroSteps,
    #[error("episode has not ended; cannot finalize")]
    EpisodeInProgress,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Output of [`Collector::collect`].
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub transitions: Vec<MacroTransition>,
    pub trajectories: Vec<Trajectory>,
    pub env_steps: usize,
}

/// Turns the per-step records of a finished episode into a [`Trajectory`].
pub fn finalize_trajectory(
    task: Task,
    source: Source,
    steps: Vec<StepRecord>,
    last: &StepResult,
    horizon: usize,
) -> Result<Trajectory, RolloutError> {
    if !(last.done || last.truncated) || steps.is_empty() {
        return Err(RolloutError::EpisodeInProgress);
    }
    Ok(Trajectory::new(task, source, last.success, steps, horizon))
}

/// Owns one environment instance and the partially recorded episode in it.
#[derive(Debug, Clone)]
pub struct Collector {
    task: Task,
    horizon: usize,
    gamma: f64,
    env: EnvState,
    episode: Vec<StepRecord>,
}

impl Collector {
    pub fn new<R: Rng + ?Sized>(task: Task, horizon: usize, gamma: f64, rng: &mut R) -> Self {
        Self {
            task,
            horizon,
            gamma,
            env: EnvState::reset(task, rng.random()),
            episode: Vec::new(),
        }
    }

    /// Starts from a given environment state instead of a fresh reset.
    pub fn with_env(horizon: usize, gamma: f64, env: EnvState) -> Self {
        Self {
            task: env.task,
            horizon,
            gamma,
            env,
            episode: Vec::new(),
        }
    }

    pub fn env(&self) -> &EnvState {
        &self.env
    }

    pub fn collect<R: Rng + ?Sized>(
        &mut self,
        policy: &ChunkPolicy,
        critic: &ValueHead,
        n_macro: usize,
        rng: &mut R,
    ) -> Result<Rollout, RolloutError> {
        if n_macro == 0 {
            return Err(RolloutError::NoMacroSteps);
        }
        let mut out = Rollout::default();
        for _ in 0..n_macro {
            let obs = self.env.observation();
            let (chunk, old_log_prob) = policy.sample_chunk(&obs, rng)?;
            let value_old = critic.value(&obs)?;
            let mut reward_agg = 0.0;
            let mut discount = 1.0;
            let mut executed = 0;
            let mut last = None;
            for i in 0..self.horizon {
                let action: Vec<f64> = chunk.action(i).iter().map(|a| a.clamp(-1.0, 1.0)).collect();
                let step_obs = self.env.observation();
                let res = self.env.step(&action)?;
                self.episode.push(StepRecord {
                    obs: step_obs,
                    action,
                    reward: res.reward,
                    done: res.done,
                });
                reward_agg += discount * res.reward;
                discount *= self.gamma;
                executed += 1;
                let ended = res.done || res.truncated;
                last = Some(res);
                if ended {
                    break;
                }
            }
            let last = last.expect("horizon >= 1");
            out.env_steps += executed;
            let next_value_old = if last.done { 0.0 } else { critic.value(&last.obs)? };
            out.transitions.push(MacroTransition {
                obs,
                chunk,
                old_log_prob,
                reward_agg,
                value_old,
                next_value_old,
                done: last.done,
                truncated: last.truncated,
                executed_steps: executed,
            });
            if last.done || last.truncated {
                let steps = std::mem::take(&mut self.episode);
                out.trajectories.push(finalize_trajectory(
                    self.task,
                    Source::SelfGenerated,
                    steps,
                    &last,
                    self.horizon,
                )?);
                self.env = EnvState::reset(self.task, rng.random());
            }
        }
        Ok(out)
    }
}

pub fn collect_rollout<R: Rng + ?Sized>(
    collector: &mut Collector,
    policy: &ChunkPolicy,
    critic: &ValueHead,
    n_macro: usize,
    rng: &mut R,
) -> Result<Rollout, RolloutError> {
    collector.collect(policy, critic, n_macro, rng)
}

/// Runs the scripted expert for `n` episodes. Episode seeds and action noise
/// both derive from `seed`.
pub fn collect_expert_demos(
    task: Task,
    n: usize,
    seed: u64,
    noise: f64,
    horizon: usize,
) -> Result<Vec<Trajectory>, RolloutError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut env = EnvState::reset(task, rng.random());
        let mut steps = Vec::new();
        loop {
            let obs = env.observation();
            let action = scripted_expert_noisy(&env, noise, &mut rng);
            let res = env.step(&action)?;
            steps.push(StepRecord {
                obs,
                action,
                reward: res.reward,
                done: res.done,
            });
            if res.done || res.truncated {
                out.push(finalize_trajectory(task, Source::Expert, steps, &res, horizon)?);
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ACTION_DIM, NUM_TASKS, STATE_DIM};
    use crate::policy::PolicyShape;

    fn nets(h: usize, seed: u64) -> (ChunkPolicy, ValueHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = PolicyShape {
            state_dim: STATE_DIM,
            num_tasks: NUM_TASKS,
            horizon: h,
            action_dim: ACTION_DIM,
        };
        (
            ChunkPolicy::new(shape, &[16], -0.5, &mut rng),
            ValueHead::new(STATE_DIM, NUM_TASKS, &[16], &mut rng),
        )
    }

    #[test]
    fn early_termination_truncates_chunk() {
        let (mut policy, critic) = nets(4, 0);
        // Near-zero actions keep the agent on the goal.
        let last = policy.net.layers_mut().last_mut().unwrap();
        last.weights.iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        policy.log_std.iter_mut().for_each(|s| *s = -5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Collector::new(Task::SparseReach, 4, 0.99, &mut rng);
        // Place the agent on the goal so the first executed step succeeds.
        c.env = EnvState::new(Task::SparseReach, [0.3, 0.3], [0.0, 0.0], [0.32, 0.3]);
        let r = c
            .collect(&policy, &critic, 1, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let t = &r.transitions[0];
        assert!(t.done);
        assert_eq!(t.executed_steps, 1);
        assert_eq!(t.reward_agg, 1.0);
        assert_eq!(t.next_value_old, 0.0);
        assert_eq!(r.trajectories.len(), 1);
        assert_eq!(r.trajectories[0].len(), 1);
    }

    #[test]
    fn deterministic_given_seed() {
        let (policy, critic) = nets(4, 2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut c = Collector::new(Task::SparsePush, 4, 0.99, &mut rng);
            c.collect(&policy, &critic, 80, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.transitions, b.transitions);
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn finalize_rejects_open_episode() {
        let res = StepResult {
            obs: EnvState::reset(Task::SparseReach, 0).observation(),
            reward: 0.0,
            done: false,
            truncated: false,
            success: false,
        };
        assert!(matches!(
            finalize_trajectory(Task::SparseReach, Source::SelfGenerated, vec![], &res, 4),
            Err(RolloutError::EpisodeInProgress)
        ));
    }

    #[test]
    fn expert_demos_succeed() {
        let demos = collect_expert_demos(Task::SparseLatch, 10, 3, 0.05, 4).unwrap();
        assert_eq!(demos.len(), 10);
        assert!(demos.iter().all(|t| t.success && t.source == Source::Expert));
    }
}
