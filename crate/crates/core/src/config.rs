//! Training configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and unparsable
//! values are all collected and reported together.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::envs::Task;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Chunked PPO + self behavior cloning with the warm-up schedule.
    Full,
    /// PPO alone: no demonstrations, constant PPO weight 1.
    Ppo,
    /// Behavior cloning on the seed demonstrations only (the SFT baseline).
    BcOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Ppo => "ppo",
            Method::BcOnly => "bc_only",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Method::Full),
            "ppo" => Ok(Method::Ppo),
            "bc_only" => Ok(Method::BcOnly),
            other => Err(format!("unknown method `{other}` (full, ppo, bc_only)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    ChunkingOff,
    BufferFrozen,
    BufferUnfiltered,
    FixedBeta1to1,
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chunking_off" => Ok(Ablation::ChunkingOff),
            "buffer_frozen" => Ok(Ablation::BufferFrozen),
            "buffer_unfiltered" => Ok(Ablation::BufferUnfiltered),
            "fixed_beta_1to1" => Ok(Ablation::FixedBeta1to1),
            other => Err(format!(
                "unknown ablation `{other}` (chunking_off, buffer_frozen, buffer_unfiltered, fixed_beta_1to1)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub method: Method,
    pub seed: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub value_clip: f64,
    pub value_weight: f64,
    pub entropy_weight: f64,
    pub horizon: usize,
    /// Optimizer steps.
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Optimizer steps.
    pub total_steps: u64,
    pub epochs_per_update: usize,
    pub rollout_macro_steps: usize,
    pub normalize_advantages: bool,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub n_demos: usize,
    pub demo_seed: u64,
    pub demo_noise: f64,
    pub buffer_capacity: usize,
    pub adaptive_limit: bool,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// Updates (rollout iterations) between periodic evaluations; 0 disables.
    pub eval_interval: usize,
    pub eval_interval_episodes: usize,
    pub chunking_off: bool,
    pub buffer_frozen: bool,
    pub buffer_unfiltered: bool,
    pub fixed_beta_1to1: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::SparseReach,
            method: Method::Full,
            seed: 0,
            lr: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            gamma: 0.99,
            lambda: 0.95,
            epsilon: 0.2,
            value_clip: 0.2,
            value_weight: 0.5,
            entropy_weight: 0.0,
            horizon: 4,
            warmup_steps: 2000,
            batch_size: 64,
            total_steps: 10_000,
            epochs_per_update: 4,
            rollout_macro_steps: 256,
            normalize_advantages: true,
            hidden: vec![64, 64],
            init_log_std: -0.5,
            n_demos: 10,
            demo_seed: 7,
            demo_noise: 0.05,
            buffer_capacity: 64,
            adaptive_limit: false,
            eval_episodes: 128,
            eval_seed: 1_000_000,
            eval_interval: 10,
            eval_interval_episodes: 32,
            chunking_off: false,
            buffer_frozen: false,
            buffer_unfiltered: false,
            fixed_beta_1to1: false,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    let out = v
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err("expected comma-separated positive widths".into());
    }
    Ok(out)
}

impl TrainConfig {
    /// Hyperparameters as published for the full-scale run.
    pub fn paper() -> Self {
        Self {
            lr: 1e-5,
            warmup_steps: 40_000,
            total_steps: 500_000,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::Invalid(vec![format!(
                "preset: unknown preset `{other}` (desk, paper)"
            )])),
        }
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::ChunkingOff => self.chunking_off = true,
            Ablation::BufferFrozen => self.buffer_frozen = true,
            Ablation::BufferUnfiltered => self.buffer_unfiltered = true,
            Ablation::FixedBeta1to1 => self.fixed_beta_1to1 = true,
        }
    }

    /// Chunk length actually used; `chunking_off` forces single-step chunks.
    pub fn effective_horizon(&self) -> usize {
        if self.chunking_off {
            1
        } else {
            self.horizon
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "task" => self.task = parse(v)?,
            "method" => self.method = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "lr" => self.lr = parse(v)?,
            "adam_beta1" => self.adam_beta1 = parse(v)?,
            "adam_beta2" => self.adam_beta2 = parse(v)?,
            "adam_eps" => self.adam_eps = parse(v)?,
            "weight_decay" => self.weight_decay = parse(v)?,
            "gamma" => self.gamma = parse(v)?,
            "lambda" => self.lambda = parse(v)?,
            "epsilon" => self.epsilon = parse(v)?,
            "value_clip" => self.value_clip = parse(v)?,
            "value_weight" => self.value_weight = parse(v)?,
            "entropy_weight" => self.entropy_weight = parse(v)?,
            "horizon" => self.horizon = parse(v)?,
            "warmup_steps" => self.warmup_steps = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "total_steps" => self.total_steps = parse(v)?,
            "epochs_per_update" => self.epochs_per_update = parse(v)?,
            "rollout_macro_steps" => self.rollout_macro_steps = parse(v)?,
            "normalize_advantages" => self.normalize_advantages = parse(v)?,
            "hidden" => self.hidden = parse_list(v)?,
            "init_log_std" => self.init_log_std = parse(v)?,
            "n_demos" => self.n_demos = parse(v)?,
            "demo_seed" => self.demo_seed = parse(v)?,
            "demo_noise" => self.demo_noise = parse(v)?,
            "buffer_capacity" => self.buffer_capacity = parse(v)?,
            "adaptive_limit" => self.adaptive_limit = parse(v)?,
            "eval_episodes" => self.eval_episodes = parse(v)?,
            "eval_seed" => self.eval_seed = parse(v)?,
            "eval_interval" => self.eval_interval = parse(v)?,
            "eval_interval_episodes" => self.eval_interval_episodes = parse(v)?,
            "chunking_off" => self.chunking_off = parse(v)?,
            "buffer_frozen" => self.buffer_frozen = parse(v)?,
            "buffer_unfiltered" => self.buffer_unfiltered = parse(v)?,
            "fixed_beta_1to1" => self.fixed_beta_1to1 = parse(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key in canonical order with its serialized value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden = self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("task", self.task.to_string()),
            ("method", self.method.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda", self.lambda.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("value_clip", self.value_clip.to_string()),
            ("value_weight", self.value_weight.to_string()),
            ("entropy_weight", self.entropy_weight.to_string()),
            ("horizon", self.horizon.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("epochs_per_update", self.epochs_per_update.to_string()),
            ("rollout_macro_steps", self.rollout_macro_steps.to_string()),
            ("normalize_advantages", self.normalize_advantages.to_string()),
            ("hidden", hidden),
            ("init_log_std", self.init_log_std.to_string()),
            ("n_demos", self.n_demos.to_string()),
            ("demo_seed", self.demo_seed.to_string()),
            ("demo_noise", self.demo_noise.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("adaptive_limit", self.adaptive_limit.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_interval_episodes", self.eval_interval_episodes.to_string()),
            ("chunking_off", self.chunking_off.to_string()),
            ("buffer_frozen", self.buffer_frozen.to_string()),
            ("buffer_unfiltered", self.buffer_unfiltered.to_string()),
            ("fixed_beta_1to1", self.fixed_beta_1to1.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected `key = value`, got `{line}`", n + 1));
                continue;
            };
            let key = key.trim();
            if let Err(e) = self.set(key, value) {
                problems.push(format!("{key}: {e}"));
            }
        }
        if let Err(mut more) = self.validate() {
            problems.append(&mut more);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut p = Vec::new();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                p.push(format!("{key}: {msg}"));
            }
        };
        check(self.lr > 0.0, "lr", "must be positive");
        check(self.gamma > 0.0 && self.gamma <= 1.0, "gamma", "must lie in (0, 1]");
        check((0.0..=1.0).contains(&self.lambda), "lambda", "must lie in [0, 1]");
        check(
            self.epsilon > 0.0 && self.epsilon < 1.0,
            "epsilon",
            "must lie in (0, 1)",
        );
        check(self.value_clip > 0.0, "value_clip", "must be positive");
        check(self.value_weight >= 0.0, "value_weight", "must be non-negative");
        check(self.entropy_weight >= 0.0, "entropy_weight", "must be non-negative");
        check(self.horizon >= 1, "horizon", "must be at least 1");
        check(self.warmup_steps > 0, "warmup_steps", "must be positive");
        check(self.batch_size > 0, "batch_size", "must be positive");
        check(self.total_steps > 0, "total_steps", "must be positive");
        check(self.epochs_per_update > 0, "epochs_per_update", "must be positive");
        check(self.rollout_macro_steps > 0, "rollout_macro_steps", "must be positive");
        check(self.buffer_capacity > 0, "buffer_capacity", "must be positive");
        check(self.eval_episodes > 0, "eval_episodes", "must be positive");
        check(self.demo_noise >= 0.0, "demo_noise", "must be non-negative");
        check(
            self.method == Method::Ppo || self.n_demos > 0,
            "n_demos",
            "behavior cloning needs at least one demonstration",
        );
        if p.is_empty() {
            Ok(())
        } else {
            Err(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_full_scale_preset() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.gamma, c.lambda, c.epsilon, c.value_weight, c.entropy_weight),
            (0.99, 0.95, 0.2, 0.5, 0.0)
        );
        assert_eq!((c.horizon, c.batch_size, c.n_demos, c.eval_episodes), (4, 64, 10, 128));
        let p = TrainConfig::paper();
        assert_eq!(
            (p.lr, p.warmup_steps, p.total_steps, p.batch_size),
            (1e-5, 40_000, 500_000, 16)
        );
    }

    #[test]
    fn round_trip() {
        let mut c = TrainConfig::paper();
        c.task = Task::SparseLatch;
        c.hidden = vec![32, 16, 8];
        c.apply_ablation(Ablation::BufferUnfiltered);
        let text = c.to_text();
        let back = TrainConfig::parse_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn every_offending_key_is_listed() {
        let err = TrainConfig::parse_text("lr = fast\nbogus = 1\n# fine\nhorizon = 2\nalso_bad = x\nepsilon = 3")
            .unwrap_err();
        let ConfigError::Invalid(list) = err;
        let keys: Vec<&str> = list.iter().map(|s| s.split(':').next().unwrap()).collect();
        assert_eq!(keys, vec!["lr", "bogus", "also_bad", "epsilon"]);
    }

    #[test]
    fn chunking_off_forces_single_step() {
        let mut c = TrainConfig::default();
        c.apply_ablation(Ablation::ChunkingOff);
        assert_eq!(c.effective_horizon(), 1);
    }
}
