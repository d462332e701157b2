//! Dynamic demonstration buffer and the self behavior cloning loss.
//!
//! The buffer is seeded with expert trajectories; its admission threshold
//! `ell_limit` is the longest seed. Later trajectories enter only when they
//! succeed and are no longer than the threshold. When full, the longest stored
//! trajectory (oldest among ties) is evicted.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Task;
use crate::policy::{ActionChunk, ChunkPolicy, Observation, PolicyError, PolicyGrad};

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("demonstration set is empty")]
    NoDemonstrations,
    #[error("expert trajectory {index} is not successful")]
    FailedExpert { index: usize },
    #[error("{count} expert trajectories exceed buffer capacity {capacity}")]
    OverCapacity { count: usize, capacity: usize },
    #[error("buffer capacity must be positive")]
    ZeroCapacity,
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("malformed trajectory on line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert,
    #[serde(rename = "self")]
    SelfGenerated,
}

/// One executed environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs: Observation,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: Task,
    pub source: Source,
    pub success: bool,
    pub steps: Vec<StepRecord>,
    pub horizon: usize,
    /// `(obs, chunk)` at steps `0, h, 2h, ...`; the last chunk is padded by
    /// repeating the final action.
    pub chunks: Vec<(Observation, ActionChunk)>,
}

impl Trajectory {
    pub fn new(task: Task, source: Source, success: bool, steps: Vec<StepRecord>, horizon: usize) -> Self {
        assert!(horizon >= 1);
        let chunks = slice_chunks(&steps, horizon);
        Self {
            task,
            source,
            success,
            steps,
            horizon,
            chunks,
        }
    }

    /// Episode length in environment steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self::new(self.task, self.source, self.success, self.steps.clone(), horizon)
    }
}

fn slice_chunks(steps: &[StepRecord], horizon: usize) -> Vec<(Observation, ActionChunk)> {
    steps
        .chunks(horizon)
        .map(|window| {
            let actions: Vec<Vec<f64>> = window.iter().map(|s| s.action.clone()).collect();
            let d = actions[0].len();
            (window[0].obs.clone(), ActionChunk::from_steps(&actions, horizon, d))
        })
        .collect()
}

/// How [`DemoBuffer::try_admit`] screens candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Admission {
    /// Success and `L <= ell_limit`.
    #[default]
    Filtered,
    /// Success only.
    Unfiltered,
    /// Nothing enters after initialization.
    Frozen,
}

#[derive(Debug, Clone)]
struct Entry {
    seq: u64,
    traj: Trajectory,
}

#[derive(Debug, Clone)]
pub struct DemoBuffer {
    entries: Vec<Entry>,
    ell_limit: usize,
    capacity: usize,
    admission: Admission,
    adaptive_limit: bool,
    next_seq: u64,
    pub admitted_count: usize,
    pub rejected_count: usize,
}

impl DemoBuffer {
    /// Seeds the buffer; `ell_limit` becomes the longest expert episode.
    pub fn init(experts: Vec<Trajectory>, capacity: usize) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::ZeroCapacity);
        }
        if experts.is_empty() {
            return Err(BufferError::NoDemonstrations);
        }
        if let Some(index) = experts.iter().position(|t| !t.success) {
            return Err(BufferError::FailedExpert { index });
        }
        if experts.len() > capacity {
            return Err(BufferError::OverCapacity {
                count: experts.len(),
                capacity,
            });
        }
        let ell_limit = experts.iter().map(Trajectory::len).max().expect("non-empty");
        let entries: Vec<Entry> = experts
            .into_iter()
            .enumerate()
            .map(|(i, traj)| Entry { seq: i as u64, traj })
            .collect();
        Ok(Self {
            next_seq: entries.len() as u64,
            entries,
            ell_limit,
            capacity,
            admission: Admission::Filtered,
            adaptive_limit: false,
            admitted_count: 0,
            rejected_count: 0,
        })
    }

    pub fn with_admission(mut self, admission: Admission) -> Self {
        self.admission = admission;
        self
    }

    /// Shrinks `ell_limit` to the longest stored trajectory after each admission.
    pub fn with_adaptive_limit(mut self, on: bool) -> Self {
        self.adaptive_limit = on;
        self
    }

    pub fn ell_limit(&self) -> usize {
        self.ell_limit
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.entries.iter().map(|e| &e.traj)
    }

    pub fn num_records(&self) -> usize {
        self.entries.iter().map(|e| e.traj.chunks.len()).sum()
    }

    pub fn min_len(&self) -> Option<usize> {
        self.trajectories().map(Trajectory::len).min()
    }

    pub fn max_len(&self) -> Option<usize> {
        self.trajectories().map(Trajectory::len).max()
    }

    pub fn try_admit(&mut self, traj: Trajectory) -> bool {
        let eligible = match self.admission {
            Admission::Frozen => false,
            Admission::Unfiltered => traj.success,
            Admission::Filtered => traj.success && traj.len() <= self.ell_limit,
        };
        if !eligible {
            self.rejected_count += 1;
            return false;
        }
        if self.entries.len() >= self.capacity {
            let victim = self
                .entries
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.traj.len().cmp(&b.traj.len()).then(b.seq.cmp(&a.seq)))
                .map(|(i, _)| i)
                .expect("full buffer is non-empty");
            self.entries.remove(victim);
        }
        self.entries.push(Entry {
            seq: self.next_seq,
            traj,
        });
        self.next_seq += 1;
        self.admitted_count += 1;
        if self.adaptive_limit {
            self.ell_limit = self.ell_limit.min(self.max_len().expect("non-empty"));
        }
        true
    }

    /// Uniform draw over every chunk record of every stored trajectory.
    pub fn sample_bc_batch<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<(&Observation, &ActionChunk)>, BufferError> {
        if batch_size == 0 {
            return Ok(Vec::new());
        }
        let total = self.num_records();
        if total == 0 {
            return Err(BufferError::Empty);
        }
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut k = rng.random_range(0..total);
            for e in &self.entries {
                let n = e.traj.chunks.len();
                if k < n {
                    let (o, c) = &e.traj.chunks[k];
                    batch.push((o, c));
                    break;
                }
                k -= n;
            }
        }
        Ok(batch)
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<(), BufferError> {
        write_trajectories(out, self.trajectories())
    }
}

pub fn init_buffer(expert_trajs: Vec<Trajectory>, capacity: usize) -> Result<DemoBuffer, BufferError> {
    DemoBuffer::init(expert_trajs, capacity)
}

pub fn try_admit(buffer: &mut DemoBuffer, traj: Trajectory) -> bool {
    buffer.try_admit(traj)
}

/// Mean negative chunk log-likelihood.
pub fn bc_loss(policy: &ChunkPolicy, batch: &[(&Observation, &ActionChunk)]) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for (o, c) in batch {
        total -= policy.chunk_log_prob(o, c)?;
    }
    Ok(total / batch.len() as f64)
}

/// Adds `scale * grad(bc_loss)` to `grads` and returns the loss.
pub fn accumulate_bc_grad(
    policy: &ChunkPolicy,
    batch: &[(&Observation, &ActionChunk)],
    scale: f64,
    grads: &mut PolicyGrad,
) -> Result<f64, PolicyError> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for (o, c) in batch {
        total -= policy.accumulate_log_prob_grad(o, c, -scale / n, grads)?;
    }
    Ok(total / n)
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    task: Task,
    source: Source,
    success: bool,
    length: usize,
    horizon: usize,
    prompt_id: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
}

/// Writes one JSON object per trajectory.
pub fn write_trajectories<'a, W: Write>(
    mut out: W,
    trajs: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<(), BufferError> {
    for t in trajs {
        let line = TrajectoryLine {
            task: t.task,
            source: t.source,
            success: t.success,
            length: t.len(),
            horizon: t.horizon,
            prompt_id: t.steps.first().map(|s| s.obs.prompt_id).unwrap_or(t.task.id()),
            states: t.steps.iter().map(|s| s.obs.state.clone()).collect(),
            actions: t.steps.iter().map(|s| s.action.clone()).collect(),
            rewards: t.steps.iter().map(|s| s.reward).collect(),
            dones: t.steps.iter().map(|s| s.done).collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads trajectories written by [`write_trajectories`]. `horizon`, when set,
/// re-slices the chunk records.
pub fn read_trajectories<R: BufRead>(input: R, horizon: Option<usize>) -> Result<Vec<Trajectory>, BufferError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| BufferError::Format { line: i + 1, reason };
        let rec: TrajectoryLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let n = rec.length;
        if rec.states.len() != n || rec.actions.len() != n || rec.rewards.len() != n || rec.dones.len() != n {
            return Err(bad(format!("step arrays disagree with length {n}")));
        }
        if n == 0 {
            return Err(bad("empty trajectory".into()));
        }
        let steps = rec
            .states
            .into_iter()
            .zip(rec.actions)
            .zip(rec.rewards)
            .zip(rec.dones)
            .map(|(((state, action), reward), done)| StepRecord {
                obs: Observation::new(state, rec.prompt_id),
                action,
                reward,
                done,
            })
            .collect();
        out.push(Trajectory::new(
            rec.task,
            rec.source,
            rec.success,
            steps,
            horizon.unwrap_or(rec.horizon).max(1),
        ));
    }
    Ok(out)
}
