//! Online post-training loop and evaluation metrics.
//!
//! Each update collects a rollout with the current policy, offers the finished
//! episodes to the demonstration buffer, computes chunk-level GAE and then
//! runs `epochs_per_update` passes of minibatch AdamW steps on
//! `beta_t * L_ppo + L_bc` (actor) and the clipped value loss (critic).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Method, TrainConfig};
use crate::demobuffer::{accumulate_bc_grad, Admission, BufferError, DemoBuffer, Trajectory};
use crate::envs::{EnvError, EnvState, Task, ACTION_DIM, NUM_TASKS, STATE_DIM};
use crate::numcore::{adamw_step, AdamWConfig, AdamWState, GradBundle, NumError};
use crate::policy::{ChunkPolicy, PolicyError, PolicyGrad, PolicyOptimizer, PolicyShape, ValueHead};
use crate::ppo::{compute_gae, normalize_advantages, surrogate_with_grad, value_loss_with_grad, PpoError, Schedule};
use crate::rollout::{collect_expert_demos, Collector, RolloutError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at optimizer step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 10th percentile by the nearest-rank rule: `sorted[ceil(n/10) - 1]`.
pub fn metric_len_p10(lengths: &[usize]) -> Option<f64> {
    if lengths.is_empty() {
        return None;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = sorted.len().div_ceil(10);
    Some(sorted[rank - 1] as f64)
}

/// Mean of the `max(1, ceil(n/10))` smallest lengths.
pub fn metric_avg_shortest10(lengths: &[usize]) -> Option<f64> {
    if lengths.is_empty() {
        return None;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let k = sorted.len().div_ceil(10).max(1);
    Some(sorted[..k].iter().sum::<usize>() as f64 / k as f64)
}

/// Success rate plus length statistics over successful episodes.
///
/// Length metrics are `None` when no episode succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub seed: u64,
    pub n_episodes: usize,
    pub acc: f64,
    pub len_p10: Option<f64>,
    pub avg_shortest10: Option<f64>,
    pub lengths: Vec<usize>,
    pub successes: Vec<bool>,
}

impl EvalReport {
    pub fn from_episodes(task: Task, seed: u64, lengths: Vec<usize>, successes: Vec<bool>) -> Self {
        let n = lengths.len();
        let ok: Vec<usize> = lengths
            .iter()
            .zip(&successes)
            .filter(|(_, &s)| s)
            .map(|(&l, _)| l)
            .collect();
        Self {
            task,
            seed,
            n_episodes: n,
            acc: ok.len() as f64 / n as f64,
            len_p10: metric_len_p10(&ok),
            avg_shortest10: metric_avg_shortest10(&ok),
            lengths,
            successes,
        }
    }
}

/// Runs the mean (noise-free) policy on episodes seeded `seed..seed + n`.
pub fn evaluate(policy: &ChunkPolicy, task: Task, n_episodes: usize, seed: u64) -> Result<EvalReport, TrainError> {
    let mut lengths = Vec::with_capacity(n_episodes);
    let mut successes = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes as u64 {
        let mut env = EnvState::reset(task, seed + k);
        let success = 'episode: loop {
            let chunk = policy.mean_chunk(&env.observation())?;
            for i in 0..chunk.horizon {
                let r = env.step(chunk.action(i))?;
                if r.done || r.truncated {
                    break 'episode r.success;
                }
            }
        };
        lengths.push(env.step_count);
        successes.push(success);
    }
    Ok(EvalReport::from_episodes(task, seed, lengths, successes))
}

/// One logged update.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update_idx: usize,
    pub env_steps: usize,
    pub opt_steps: u64,
    pub beta: f64,
    pub ppo_loss: f64,
    pub bc_loss: f64,
    pub value_loss: f64,
    pub buffer_size: usize,
    pub buffer_min_len: Option<usize>,
    pub admitted: usize,
    pub rejected: usize,
    pub excluded_ratios: usize,
    pub eval: Option<EvalReport>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "update_idx",
    "env_steps",
    "beta",
    "ppo_loss",
    "bc_loss",
    "value_loss",
    "buffer_size",
    "eval_acc",
    "eval_len_p10",
    "eval_avg10",
];

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Writes the metrics CSV. Rows without an evaluation leave the eval cells
/// empty; `-` marks an evaluation with no successful episode.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| TrainError::Io(std::io::Error::other(e));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        let (acc, p10, avg) = match &r.eval {
            Some(e) => (e.acc.to_string(), opt_cell(e.len_p10), opt_cell(e.avg_shortest10)),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([
            r.update_idx.to_string(),
            r.env_steps.to_string(),
            r.beta.to_string(),
            r.ppo_loss.to_string(),
            r.bc_loss.to_string(),
            r.value_loss.to_string(),
            r.buffer_size.to_string(),
            acc,
            p10,
            avg,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ChunkPolicy,
    pub critic: ValueHead,
    pub metrics: Vec<MetricsRow>,
    pub final_eval: EvalReport,
    pub buffer: Option<DemoBuffer>,
    pub expert_mean_len: Option<f64>,
}

/// Owns policy, critic, optimizers, buffer and the rollout collector.
pub struct Trainer {
    cfg: TrainConfig,
    horizon: usize,
    policy: ChunkPolicy,
    critic: ValueHead,
    policy_opt: PolicyOptimizer,
    critic_opt: AdamWState,
    adam: AdamWConfig,
    schedule: Schedule,
    buffer: Option<DemoBuffer>,
    collector: Collector,
    rng: ChaCha8Rng,
    opt_steps: u64,
    env_steps: usize,
    metrics: Vec<MetricsRow>,
    expert_mean_len: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        let demos = if cfg.method == Method::Ppo {
            Vec::new()
        } else {
            collect_expert_demos(
                cfg.task,
                cfg.n_demos,
                cfg.demo_seed,
                cfg.demo_noise,
                cfg.effective_horizon(),
            )?
        };
        Self::with_demos(cfg, demos)
    }

    /// Starts from caller-provided expert trajectories (e.g. loaded from disk).
    pub fn with_demos(cfg: TrainConfig, demos: Vec<Trajectory>) -> Result<Self, TrainError> {
        cfg.validate().map_err(|p| TrainError::Config(p.join("; ")))?;
        let horizon = cfg.effective_horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = PolicyShape {
            state_dim: STATE_DIM,
            num_tasks: NUM_TASKS,
            horizon,
            action_dim: ACTION_DIM,
        };
        let policy = ChunkPolicy::new(shape, &cfg.hidden, cfg.init_log_std, &mut rng);
        let critic = ValueHead::new(STATE_DIM, NUM_TASKS, &cfg.hidden, &mut rng);
        let policy_opt = PolicyOptimizer::new(&policy);
        let critic_opt = AdamWState::for_mlp(&critic.net);
        let adam = AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        };
        let schedule = match cfg.method {
            Method::Ppo => Schedule::Constant(1.0),
            Method::BcOnly => Schedule::Constant(0.0),
            Method::Full if cfg.fixed_beta_1to1 => Schedule::Constant(1.0),
            Method::Full => Schedule::Tanh {
                warmup: cfg.warmup_steps,
            },
        };
        let expert_mean_len =
            (!demos.is_empty()).then(|| demos.iter().map(Trajectory::len).sum::<usize>() as f64 / demos.len() as f64);
        let buffer = if cfg.method == Method::Ppo {
            None
        } else {
            let demos = demos
                .into_iter()
                .map(|t| {
                    if t.horizon == horizon {
                        t
                    } else {
                        t.with_horizon(horizon)
                    }
                })
                .collect::<Vec<_>>();
            let capacity = cfg.buffer_capacity.max(demos.len());
            let admission = if cfg.buffer_frozen || cfg.method == Method::BcOnly {
                Admission::Frozen
            } else if cfg.buffer_unfiltered {
                Admission::Unfiltered
            } else {
                Admission::Filtered
            };
            Some(
                DemoBuffer::init(demos, capacity)?
                    .with_admission(admission)
                    .with_adaptive_limit(cfg.adaptive_limit),
            )
        };
        let collector = Collector::new(cfg.task, horizon, cfg.gamma, &mut rng);
        Ok(Self {
            horizon,
            policy,
            critic,
            policy_opt,
            critic_opt,
            adam,
            schedule,
            buffer,
            collector,
            rng,
            opt_steps: 0,
            env_steps: 0,
            metrics: Vec::new(),
            expert_mean_len,
            cfg,
        })
    }

    pub fn policy(&self) -> &ChunkPolicy {
        &self.policy
    }

    pub fn critic(&self) -> &ValueHead {
        &self.critic
    }

    pub fn buffer(&self) -> Option<&DemoBuffer> {
        self.buffer.as_ref()
    }

    pub fn opt_steps(&self) -> u64 {
        self.opt_steps
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn is_finished(&self) -> bool {
        self.opt_steps >= self.cfg.total_steps
    }

    /// One rollout + optimization round. Returns the logged row.
    pub fn update(&mut self) -> Result<&MetricsRow, TrainError> {
        let cfg = self.cfg.clone();
        let update_idx = self.metrics.len();
        let beta_at_start = self.schedule.beta(self.opt_steps);
        let mut transitions = Vec::new();
        let mut advantages = Vec::new();
        let mut targets = Vec::new();
        if cfg.method != Method::BcOnly {
            let rollout = self
                .collector
                .collect(&self.policy, &self.critic, cfg.rollout_macro_steps, &mut self.rng)?;
            self.env_steps += rollout.env_steps;
            if let Some(buffer) = self.buffer.as_mut() {
                for traj in rollout.trajectories {
                    buffer.try_admit(traj);
                }
            }
            let gamma_macro = cfg.gamma.powi(self.horizon as i32);
            let est = compute_gae(&rollout.transitions, gamma_macro, cfg.lambda)?;
            advantages = est.iter().map(|e| e.advantage).collect();
            targets = est.iter().map(|e| e.return_target).collect();
            if cfg.normalize_advantages {
                normalize_advantages(&mut advantages);
            }
            transitions = rollout.transitions;
        }

        let n = cfg.rollout_macro_steps;
        let mut order: Vec<usize> = (0..n).collect();
        let mut pgrad = PolicyGrad::zeros_like(&self.policy);
        let mut cgrad = GradBundle::zeros_like(&self.critic.net);
        let (mut ppo_sum, mut bc_sum, mut v_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut excluded = 0usize;
        'epochs: for _ in 0..cfg.epochs_per_update {
            order.shuffle(&mut self.rng);
            for mb in order.chunks(cfg.batch_size) {
                if self.is_finished() {
                    break 'epochs;
                }
                let beta = self.schedule.beta(self.opt_steps);
                pgrad.zero();
                cgrad.zero();
                let mut ppo_loss = 0.0;
                let mut value_loss = 0.0;
                if !transitions.is_empty() {
                    let inv = 1.0 / mb.len() as f64;
                    for &i in mb {
                        let t = &transitions[i];
                        let adv = advantages[i];
                        let mut surrogate = 0.0;
                        let mut finite = true;
                        self.policy
                            .accumulate_log_prob_grad_with(&t.obs, &t.chunk, &mut pgrad, |lp| {
                                let (s, ds) = surrogate_with_grad(lp, t.old_log_prob, adv, cfg.epsilon);
                                if !s.is_finite() || !ds.is_finite() {
                                    finite = false;
                                    return 0.0;
                                }
                                surrogate = s;
                                -beta * inv * ds
                            })?;
                        if !finite {
                            excluded += 1;
                            continue;
                        }
                        ppo_loss -= surrogate * inv;
                        let target = targets[i];
                        let v_old = t.value_old;
                        let mut vl = 0.0;
                        self.critic.accumulate_grad_with(&t.obs, &mut cgrad, |v| {
                            let (l, dl) = value_loss_with_grad(v, v_old, target, cfg.value_clip);
                            vl = l;
                            cfg.value_weight * inv * dl
                        })?;
                        value_loss += vl * inv;
                    }
                }
                let mut bc = 0.0;
                if let Some(buffer) = &self.buffer {
                    let batch = buffer.sample_bc_batch(cfg.batch_size, &mut self.rng)?;
                    bc = accumulate_bc_grad(&self.policy, &batch, 1.0, &mut pgrad)?;
                }
                if cfg.entropy_weight != 0.0 {
                    self.policy.accumulate_entropy_grad(-cfg.entropy_weight, &mut pgrad);
                }
                let total = beta * ppo_loss + bc + cfg.value_weight * value_loss;
                if !total.is_finite() {
                    return Err(self.diverged(format!("non-finite loss {total}")));
                }
                self.policy_opt
                    .step(&mut self.policy, &pgrad, &self.adam)
                    .map_err(|e| self.diverged(e.to_string()))?;
                if !transitions.is_empty() {
                    adamw_step(&mut self.critic.net, &cgrad, &mut self.critic_opt, &self.adam)
                        .map_err(|e: NumError| self.diverged(e.to_string()))?;
                }
                self.opt_steps += 1;
                ppo_sum += ppo_loss;
                bc_sum += bc;
                v_sum += value_loss;
                batches += 1;
            }
        }

        let eval = if self.is_finished() {
            Some(evaluate(&self.policy, cfg.task, cfg.eval_episodes, cfg.eval_seed)?)
        } else if cfg.eval_interval > 0 && (update_idx + 1).is_multiple_of(cfg.eval_interval) {
            Some(evaluate(
                &self.policy,
                cfg.task,
                cfg.eval_interval_episodes.max(1),
                cfg.eval_seed,
            )?)
        } else {
            None
        };
        let denom = batches.max(1) as f64;
        let row = MetricsRow {
            update_idx,
            env_steps: self.env_steps,
            opt_steps: self.opt_steps,
            beta: beta_at_start,
            ppo_loss: ppo_sum / denom,
            bc_loss: bc_sum / denom,
            value_loss: v_sum / denom,
            buffer_size: self.buffer.as_ref().map_or(0, DemoBuffer::len),
            buffer_min_len: self.buffer.as_ref().and_then(DemoBuffer::min_len),
            admitted: self.buffer.as_ref().map_or(0, |b| b.admitted_count),
            rejected: self.buffer.as_ref().map_or(0, |b| b.rejected_count),
            excluded_ratios: excluded,
            eval,
        };
        log::debug!(
            "update {} steps {} beta {:.4} ppo {:.4} bc {:.4} value {:.4} buffer {}{}",
            row.update_idx,
            row.opt_steps,
            row.beta,
            row.ppo_loss,
            row.bc_loss,
            row.value_loss,
            row.buffer_size,
            row.eval
                .as_ref()
                .map_or(String::new(), |e| format!(" acc {:.3}", e.acc))
        );
        self.metrics.push(row);
        Ok(self.metrics.last().expect("just pushed"))
    }

    fn diverged(&self, reason: String) -> TrainError {
        TrainError::Diverged {
            step: self.opt_steps,
            reason,
        }
    }

    pub fn run(mut self) -> Result<TrainOutcome, TrainError> {
        while !self.is_finished() {
            self.update()?;
        }
        let final_eval = self
            .metrics
            .last()
            .and_then(|r| r.eval.clone())
            .expect("final update evaluates");
        Ok(TrainOutcome {
            policy: self.policy,
            critic: self.critic,
            metrics: self.metrics,
            final_eval,
            buffer: self.buffer,
            expert_mean_len: self.expert_mean_len,
        })
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    Trainer::new(cfg.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        assert_eq!(metric_len_p10(&[10]), Some(10.0));
        assert_eq!(metric_len_p10(&(1..=100).collect::<Vec<_>>()), Some(10.0));
        assert_eq!(metric_len_p10(&[42; 17]), Some(42.0));
        assert_eq!(metric_len_p10(&[]), None);
    }

    #[test]
    fn shortest_tenth_examples() {
        let mut v = vec![100; 9];
        v.insert(3, 5);
        assert_eq!(metric_avg_shortest10(&v), Some(5.0));
        assert_eq!(metric_avg_shortest10(&(1..=20).collect::<Vec<_>>()), Some(1.5));
        assert_eq!(metric_avg_shortest10(&[7]), Some(7.0));
        assert_eq!(metric_avg_shortest10(&[]), None);
    }

    #[test]
    fn report_over_128_lengths() {
        let lengths: Vec<usize> = (1..=128).collect();
        let r = EvalReport::from_episodes(Task::SparseReach, 0, lengths, vec![true; 128]);
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.len_p10, Some(13.0));
        assert_eq!(r.avg_shortest10, Some(7.0));
    }

    #[test]
    fn all_failures_have_no_length_metrics() {
        let r = EvalReport::from_episodes(Task::SparsePush, 0, vec![200; 4], vec![false; 4]);
        assert_eq!(r.acc, 0.0);
        assert_eq!((r.len_p10, r.avg_shortest10), (None, None));
    }

    #[test]
    fn constant_length_report() {
        let r = EvalReport::from_episodes(Task::SparseReach, 0, vec![40; 10], vec![true; 10]);
        assert_eq!((r.acc, r.len_p10, r.avg_shortest10), (1.0, Some(40.0), Some(40.0)));
    }

    fn tiny(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            total_steps: 64,
            rollout_macro_steps: 32,
            epochs_per_update: 2,
            hidden: vec![16],
            eval_episodes: 4,
            eval_interval: 1,
            eval_interval_episodes: 2,
            n_demos: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_is_pure_behavior_cloning() {
        let mut t = Trainer::new(tiny(Method::Full)).unwrap();
        assert_eq!(t.schedule.beta(0), 0.0);
        t.update().unwrap();
        assert_eq!(t.metrics()[0].beta, 0.0);
        t.update().unwrap();
        assert!(t.metrics()[1].beta > 0.0);
    }

    #[test]
    fn fixed_ratio_ablation_holds_beta_at_one() {
        let mut cfg = tiny(Method::Full);
        cfg.fixed_beta_1to1 = true;
        let out = train(&cfg).unwrap();
        assert!(out.metrics.iter().all(|r| r.beta == 1.0));
    }

    #[test]
    fn chunking_off_uses_single_step_chunks() {
        let mut cfg = tiny(Method::Full);
        cfg.chunking_off = true;
        let t = Trainer::new(cfg).unwrap();
        assert_eq!(t.policy().shape.horizon, 1);
        assert!(t.buffer().unwrap().trajectories().all(|tr| tr.horizon == 1));
    }

    #[test]
    fn methods_run_and_log() {
        for m in [Method::Full, Method::Ppo, Method::BcOnly] {
            let out = train(&tiny(m)).unwrap();
            assert_eq!(out.metrics.last().unwrap().opt_steps, 64);
            assert_eq!(out.final_eval.n_episodes, 4);
            assert_eq!(out.buffer.is_some(), m != Method::Ppo);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let t = Trainer::new(tiny(Method::Full)).unwrap();
        let a = evaluate(t.policy(), Task::SparseReach, 5, 33).unwrap();
        let b = evaluate(t.policy(), Task::SparseReach, 5, 33).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_marks_undefined_lengths() {
        let row = MetricsRow {
            update_idx: 0,
            env_steps: 10,
            opt_steps: 1,
            beta: 0.5,
            ppo_loss: 0.0,
            bc_loss: 1.0,
            value_loss: 0.25,
            buffer_size: 3,
            buffer_min_len: Some(4),
            admitted: 0,
            rejected: 0,
            excluded_ratios: 0,
            eval: Some(EvalReport::from_episodes(Task::SparsePush, 0, vec![200], vec![false])),
        };
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "0,10,0.5,0,1,0.25,3,0,-,-");
    }
}
