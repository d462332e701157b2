//! Sparse-reward planar manipulation tasks with rule-based experts.
//!
//! All tasks share a point agent in the workspace `[-1, 1]^2` driven by a
//! velocity command in `[-1, 1]^2` integrated with `dt = 0.1`. Reward is `1.0`
//! on the step that achieves the task predicate and `0.0` otherwise; episodes
//! end on success or are truncated at [`MAX_STEPS`].
//!
//! | task           | reset ranges                                                      | success                         |
//! |----------------|-------------------------------------------------------------------|---------------------------------|
//! | `sparse-reach` | agent, goal in `[-0.8, 0.8]^2`, separation >= 0.4                 | `|agent - goal| < 0.05`         |
//! | `sparse-push`  | agent x in `[-0.8, 0.8]`, y in `[-0.9, -0.6]`; box in `[-0.3, 0.3] x [-0.2, 0.2]`; goal 0.3..0.6 from box at 45..135 deg | `|box - goal| < 0.05` |
//! | `sparse-latch` | agent x in `[-0.8, 0.8]`, y in `[-0.9, -0.5]`; handle in `[-0.5, 0.1] x [0.0, 0.5]` | handle slid `>= 0.3` along +x |
//!
//! Observations are padded to [`STATE_DIM`] components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Observation;

pub const STATE_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;
pub const NUM_TASKS: usize = 3;
pub const MAX_STEPS: usize = 200;
pub const DT: f64 = 0.1;
pub const SUCCESS_TOL: f64 = 0.05;
/// Agent-box contact distance for pushing.
pub const CONTACT_RADIUS: f64 = 0.1;
/// Handle travel needed to count the latch as open.
pub const LATCH_OPEN: f64 = 0.3;
pub const LATCH_TRAVEL: f64 = 0.4;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown task `{0}` (expected sparse-reach, sparse-push or sparse-latch)")]
    UnknownTask(String),
    #[error("episode already finished; reset before stepping")]
    EpisodeOver,
    #[error("action has {got} components, expected {ACTION_DIM}")]
    ActionDim { got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SparseReach,
    SparsePush,
    SparseLatch,
}

impl Task {
    pub const ALL: [Task; NUM_TASKS] = [Task::SparseReach, Task::SparsePush, Task::SparseLatch];

    pub fn id(self) -> usize {
        match self {
            Task::SparseReach => 0,
            Task::SparsePush => 1,
            Task::SparseLatch => 2,
        }
    }

    pub fn from_id(id: usize) -> Result<Self, EnvError> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| EnvError::UnknownTask(id.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::SparseReach => "sparse-reach",
            Task::SparsePush => "sparse-push",
            Task::SparseLatch => "sparse-latch",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| EnvError::UnknownTask(s.to_string()))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

type Vec2 = [f64; 2];

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn clamp_box(a: Vec2) -> Vec2 {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

fn clamp_action(a: Vec2) -> Vec2 {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

/// Full simulator state. `object` is the box (push) or the handle (latch);
/// `goal` is the box target (push) or the handle's closed position (latch).
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub task: Task,
    pub agent: Vec2,
    pub object: Vec2,
    pub goal: Vec2,
    pub grasped: bool,
    pub step_count: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    pub success: bool,
}

impl EnvState {
    pub fn reset(task: Task, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task.id() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match task {
            Task::SparseReach => {
                let agent = [u(-0.8, 0.8), u(-0.8, 0.8)];
                let goal = loop {
                    let g = [u(-0.8, 0.8), u(-0.8, 0.8)];
                    if norm(sub(g, agent)) >= 0.4 {
                        break g;
                    }
                };
                Self::new(task, agent, [0.0, 0.0], goal)
            }
            Task::SparsePush => {
                let agent = [u(-0.8, 0.8), u(-0.9, -0.6)];
                let object = [u(-0.3, 0.3), u(-0.2, 0.2)];
                let angle = u(45.0, 135.0).to_radians();
                let dist = u(0.3, 0.6);
                let goal = [object[0] + dist * angle.cos(), object[1] + dist * angle.sin()];
                Self::new(task, agent, object, goal)
            }
            Task::SparseLatch => {
                let agent = [u(-0.8, 0.8), u(-0.9, -0.5)];
                let object = [u(-0.5, 0.1), u(0.0, 0.5)];
                Self::new(task, agent, object, object)
            }
        }
    }

    pub fn new(task: Task, agent: Vec2, object: Vec2, goal: Vec2) -> Self {
        Self {
            task,
            agent,
            object,
            goal,
            grasped: false,
            step_count: 0,
            finished: false,
        }
    }

    pub fn observation(&self) -> Observation {
        let (a, o, g) = (self.agent, self.object, self.goal);
        let state = match self.task {
            Task::SparseReach => vec![a[0], a[1], g[0], g[1], g[0] - a[0], g[1] - a[1], 0.0, 0.0],
            Task::SparsePush => vec![a[0], a[1], o[0], o[1], g[0], g[1], g[0] - o[0], g[1] - o[1]],
            Task::SparseLatch => vec![
                a[0],
                a[1],
                o[0],
                o[1],
                o[0] - a[0],
                o[1] - a[1],
                o[0] - g[0],
                if self.grasped { 1.0 } else { 0.0 },
            ],
        };
        Observation::new(state, self.task.id())
    }

    pub fn is_success(&self) -> bool {
        match self.task {
            Task::SparseReach => norm(sub(self.agent, self.goal)) < SUCCESS_TOL,
            Task::SparsePush => norm(sub(self.object, self.goal)) < SUCCESS_TOL,
            Task::SparseLatch => self.object[0] - self.goal[0] >= LATCH_OPEN,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != ACTION_DIM {
            return Err(EnvError::ActionDim { got: action.len() });
        }
        let a = clamp_action([action[0], action[1]]);
        let prev = self.agent;
        self.agent = clamp_box([prev[0] + DT * a[0], prev[1] + DT * a[1]]);
        match self.task {
            Task::SparseReach => {}
            Task::SparsePush => self.push_box(sub(self.agent, prev)),
            Task::SparseLatch => self.drag_handle(),
        }
        self.step_count += 1;
        let success = self.is_success();
        let truncated = !success && self.step_count >= MAX_STEPS;
        self.finished = success || truncated;
        Ok(StepResult {
            obs: self.observation(),
            reward: if success { 1.0 } else { 0.0 },
            done: success,
            truncated,
            success,
        })
    }

    fn push_box(&mut self, motion: Vec2) {
        let rel = sub(self.object, self.agent);
        let d = norm(rel);
        if d >= CONTACT_RADIUS {
            return;
        }
        let dir = if d > 1e-9 {
            [rel[0] / d, rel[1] / d]
        } else {
            let m = norm(motion);
            if m < 1e-12 {
                return;
            }
            [motion[0] / m, motion[1] / m]
        };
        self.object = clamp_box([
            self.agent[0] + CONTACT_RADIUS * dir[0],
            self.agent[1] + CONTACT_RADIUS * dir[1],
        ]);
    }

    fn drag_handle(&mut self) {
        if !self.grasped && norm(sub(self.agent, self.object)) < SUCCESS_TOL {
            self.grasped = true;
        }
        if self.grasped {
            if (self.agent[1] - self.object[1]).abs() > 2.0 * SUCCESS_TOL {
                self.grasped = false;
                return;
            }
            self.object[0] = self.agent[0].clamp(self.goal[0], self.goal[0] + LATCH_TRAVEL);
            if (self.agent[0] - self.object[0]).abs() > 2.0 * SUCCESS_TOL {
                self.grasped = false;
            }
        }
    }
}

/// Reset helper returning the initial observation alongside the state.
pub fn env_reset(task_id: usize, seed: u64) -> Result<(EnvState, Observation), EnvError> {
    let state = EnvState::reset(Task::from_id(task_id)?, seed);
    let obs = state.observation();
    Ok((state, obs))
}

pub fn env_step(state: &mut EnvState, action: &[f64]) -> Result<StepResult, EnvError> {
    state.step(action)
}

fn toward(from: Vec2, to: Vec2, gain: f64) -> Vec2 {
    clamp_action([gain * (to[0] - from[0]), gain * (to[1] - from[1])])
}

/// Noiseless rule-based controller.
///
/// Reach is a proportional controller on the goal. Push first parks the agent
/// at a staging point behind the box, then pushes along the box-goal line.
/// Latch approaches from below the handle, grasps it, then slides it open.
pub fn scripted_expert(state: &EnvState) -> Vec<f64> {
    let a = match state.task {
        Task::SparseReach => toward(state.agent, state.goal, 1.0),
        Task::SparsePush => push_expert(state),
        Task::SparseLatch => latch_expert(state),
    };
    a.to_vec()
}

/// Expert action with uniform `+-amplitude` noise per component.
pub fn scripted_expert_noisy<R: Rng + ?Sized>(state: &EnvState, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let mut a = scripted_expert(state);
    if amplitude > 0.0 {
        for x in &mut a {
            *x = (*x + rng.random_range(-amplitude..=amplitude)).clamp(-1.0, 1.0);
        }
    }
    a
}

const PUSH_STAGING: f64 = 0.25;

fn push_expert(s: &EnvState) -> Vec2 {
    let to_goal = sub(s.goal, s.object);
    let dist = norm(to_goal);
    let u = [to_goal[0] / dist, to_goal[1] / dist];
    let p = sub(s.agent, s.object);
    let along = dot(p, u);
    let lateral = [p[0] - along * u[0], p[1] - along * u[1]];
    let lat = norm(lateral);
    if along < -0.05 && lat < 0.04 {
        let speed = (2.0 * dist).clamp(0.3, 1.0);
        return clamp_action([speed * u[0] - 5.0 * lateral[0], speed * u[1] - 5.0 * lateral[1]]);
    }
    if along > -0.15 && lat < 0.2 {
        // In front of or beside the box: swing around it.
        let side = if lat > 1e-6 {
            [lateral[0] / lat, lateral[1] / lat]
        } else {
            [-u[1], u[0]]
        };
        let waypoint = [
            s.object[0] + 0.22 * side[0] - 0.2 * u[0],
            s.object[1] + 0.22 * side[1] - 0.2 * u[1],
        ];
        return toward(s.agent, waypoint, 3.0);
    }
    let staging = [s.object[0] - PUSH_STAGING * u[0], s.object[1] - PUSH_STAGING * u[1]];
    toward(s.agent, staging, 3.0)
}

fn latch_expert(s: &EnvState) -> Vec2 {
    if s.grasped {
        let target = [s.goal[0] + LATCH_TRAVEL, s.object[1]];
        return toward(s.agent, target, 2.0);
    }
    let below = [s.object[0], s.object[1] - 0.15];
    let p = sub(s.agent, s.object);
    if p[0].abs() < 0.02 && p[1] < 0.0 && p[1] > -0.2 {
        return toward(s.agent, s.object, 1.5);
    }
    toward(s.agent, below, 2.0)
}
