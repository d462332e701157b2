//! Chunked diagonal-Gaussian actor and scalar critic.
//!
//! One policy query emits a whole action chunk: `h` consecutive actions of
//! dimension `d`, modelled as a single Gaussian over the flattened `h * d`
//! vector with a state-dependent mean and a learned state-independent
//! `log_std`. The task prompt enters as a one-hot suffix on the state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{adamw_update, AdamWConfig, AdamWState, GradBundle, MlpParams, NumError};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `0.5 * ln(2 pi)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("state has {got} components, policy expects {expected}")]
    StateDim { expected: usize, got: usize },
    #[error("prompt id {prompt_id} out of range for {num_tasks} tasks")]
    Prompt { prompt_id: usize, num_tasks: usize },
    #[error("chunk is {got_h}x{got_d}, policy emits {h}x{d}")]
    ChunkDim {
        h: usize,
        d: usize,
        got_h: usize,
        got_d: usize,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: Vec<f64>,
    pub prompt_id: usize,
}

impl Observation {
    pub fn new(state: Vec<f64>, prompt_id: usize) -> Self {
        Self { state, prompt_id }
    }
}

/// `h` consecutive actions of dimension `d`, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<f64>,
    pub horizon: usize,
    pub action_dim: usize,
}

impl ActionChunk {
    pub fn new(actions: Vec<f64>, horizon: usize, action_dim: usize) -> Self {
        assert_eq!(actions.len(), horizon * action_dim, "chunk buffer size");
        Self {
            actions,
            horizon,
            action_dim,
        }
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    /// Builds a chunk from per-step actions, padding a short tail by repeating
    /// the last action.
    pub fn from_steps(steps: &[Vec<f64>], horizon: usize, action_dim: usize) -> Self {
        assert!(!steps.is_empty() && steps.len() <= horizon);
        let mut actions = Vec::with_capacity(horizon * action_dim);
        for i in 0..horizon {
            let a = &steps[i.min(steps.len() - 1)];
            assert_eq!(a.len(), action_dim);
            actions.extend_from_slice(a);
        }
        Self::new(actions, horizon, action_dim)
    }
}

fn encode(state: &[f64], prompt_id: usize, state_dim: usize, num_tasks: usize) -> Result<Vec<f64>, PolicyError> {
    if state.len() != state_dim {
        return Err(PolicyError::StateDim {
            expected: state_dim,
            got: state.len(),
        });
    }
    if prompt_id >= num_tasks {
        return Err(PolicyError::Prompt { prompt_id, num_tasks });
    }
    let mut x = Vec::with_capacity(state_dim + num_tasks);
    x.extend_from_slice(state);
    x.extend((0..num_tasks).map(|k| if k == prompt_id { 1.0 } else { 0.0 }));
    Ok(x)
}

/// Diagonal Gaussian log-density summed over components.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Shape of the actor: trunk widths plus the chunk geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub state_dim: usize,
    pub num_tasks: usize,
    pub horizon: usize,
    pub action_dim: usize,
}

impl PolicyShape {
    pub fn input_dim(&self) -> usize {
        self.state_dim + self.num_tasks
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPolicy {
    pub shape: PolicyShape,
    pub net: MlpParams,
    pub log_std: Vec<f64>,
}

/// Gradient buffers for [`ChunkPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub net: GradBundle,
    pub log_std: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(policy: &ChunkPolicy) -> Self {
        Self {
            net: GradBundle::zeros_like(&policy.net),
            log_std: vec![0.0; policy.log_std.len()],
        }
    }

    pub fn zero(&mut self) {
        self.net.zero();
        self.log_std.fill(0.0);
    }
}

impl ChunkPolicy {
    pub fn new<R: Rng + ?Sized>(shape: PolicyShape, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let mut sizes = vec![shape.input_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(shape.chunk_len());
        Self {
            shape,
            net: MlpParams::init(&sizes, rng),
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); shape.chunk_len()],
        }
    }

    pub fn from_parts(shape: PolicyShape, net: MlpParams, log_std: Vec<f64>) -> Result<Self, PolicyError> {
        if net.input_dim() != shape.input_dim()
            || net.output_dim() != shape.chunk_len()
            || log_std.len() != shape.chunk_len()
        {
            return Err(PolicyError::Checkpoint(format!(
                "network {:?} / log_std {} incompatible with {:?}",
                net.sizes(),
                log_std.len(),
                shape
            )));
        }
        Ok(Self { shape, net, log_std })
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>, PolicyError> {
        encode(&obs.state, obs.prompt_id, self.shape.state_dim, self.shape.num_tasks)
    }

    pub fn mean(&self, obs: &Observation) -> Result<Vec<f64>, PolicyError> {
        Ok(self.net.forward(&self.encode(obs)?)?)
    }

    /// The deterministic chunk used for evaluation.
    pub fn mean_chunk(&self, obs: &Observation) -> Result<ActionChunk, PolicyError> {
        Ok(ActionChunk::new(
            self.mean(obs)?,
            self.shape.horizon,
            self.shape.action_dim,
        ))
    }

    fn check_chunk(&self, chunk: &ActionChunk) -> Result<(), PolicyError> {
        if chunk.horizon != self.shape.horizon
            || chunk.action_dim != self.shape.action_dim
            || chunk.actions.len() != self.shape.chunk_len()
        {
            return Err(PolicyError::ChunkDim {
                h: self.shape.horizon,
                d: self.shape.action_dim,
                got_h: chunk.horizon,
                got_d: chunk.action_dim,
            });
        }
        Ok(())
    }

    pub fn sample_chunk<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        rng: &mut R,
    ) -> Result<(ActionChunk, f64), PolicyError> {
        let mean = self.mean(obs)?;
        let actions: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = rng.sample(StandardNormal);
                m + ls.exp() * z
            })
            .collect();
        let log_prob = gaussian_log_prob(&mean, &self.log_std, &actions);
        Ok((
            ActionChunk::new(actions, self.shape.horizon, self.shape.action_dim),
            log_prob,
        ))
    }

    pub fn chunk_log_prob(&self, obs: &Observation, chunk: &ActionChunk) -> Result<f64, PolicyError> {
        self.check_chunk(chunk)?;
        let mean = self.mean(obs)?;
        Ok(gaussian_log_prob(&mean, &self.log_std, &chunk.actions))
    }

    /// Adds `coeff * grad(log pi(chunk | obs))` to `grads` and returns the log-probability.
    pub fn accumulate_log_prob_grad(
        &self,
        obs: &Observation,
        chunk: &ActionChunk,
        coeff: f64,
        grads: &mut PolicyGrad,
    ) -> Result<f64, PolicyError> {
        self.accumulate_log_prob_grad_with(obs, chunk, grads, |_| coeff)
    }

    /// Like [`Self::accumulate_log_prob_grad`], with the coefficient computed
    /// from the log-probability of the same forward pass.
    pub fn accumulate_log_prob_grad_with(
        &self,
        obs: &Observation,
        chunk: &ActionChunk,
        grads: &mut PolicyGrad,
        coeff_fn: impl FnOnce(f64) -> f64,
    ) -> Result<f64, PolicyError> {
        self.check_chunk(chunk)?;
        let cache = self.net.forward_cached(&self.encode(obs)?)?;
        let mean = cache.output();
        let log_prob = gaussian_log_prob(mean, &self.log_std, &chunk.actions);
        let coeff = coeff_fn(log_prob);
        if coeff == 0.0 {
            return Ok(log_prob);
        }
        let mut upstream = Vec::with_capacity(mean.len());
        for (j, (&m, &a)) in mean.iter().zip(&chunk.actions).enumerate() {
            let inv_var = (-2.0 * self.log_std[j]).exp();
            let diff = a - m;
            upstream.push(coeff * diff * inv_var);
            grads.log_std[j] += coeff * (diff * diff * inv_var - 1.0);
        }
        self.net.backward_into(&cache, &upstream, &mut grads.net)?;
        Ok(log_prob)
    }

    /// Differential entropy of the chunk distribution; independent of the state.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum()
    }

    pub fn accumulate_entropy_grad(&self, coeff: f64, grads: &mut PolicyGrad) {
        grads.log_std.iter_mut().for_each(|g| *g += coeff);
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std
            .iter_mut()
            .for_each(|ls| *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }
}

/// Scalar state-value estimator with its own trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueHead {
    pub state_dim: usize,
    pub num_tasks: usize,
    pub net: MlpParams,
}

impl ValueHead {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, num_tasks: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![state_dim + num_tasks];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            state_dim,
            num_tasks,
            net: MlpParams::init(&sizes, rng),
        }
    }

    pub fn from_net(state_dim: usize, num_tasks: usize, net: MlpParams) -> Result<Self, PolicyError> {
        if net.input_dim() != state_dim + num_tasks || net.output_dim() != 1 {
            return Err(PolicyError::Checkpoint(format!("critic network {:?}", net.sizes())));
        }
        Ok(Self {
            state_dim,
            num_tasks,
            net,
        })
    }

    pub fn value(&self, obs: &Observation) -> Result<f64, PolicyError> {
        let x = encode(&obs.state, obs.prompt_id, self.state_dim, self.num_tasks)?;
        Ok(self.net.forward(&x)?[0])
    }

    /// Adds `coeff * grad(V(obs))` to `grads` and returns `V(obs)`.
    pub fn accumulate_grad(&self, obs: &Observation, coeff: f64, grads: &mut GradBundle) -> Result<f64, PolicyError> {
        self.accumulate_grad_with(obs, grads, |_| coeff)
    }

    /// Adds `coeff_fn(V) * grad(V(obs))` using a single forward pass.
    pub fn accumulate_grad_with(
        &self,
        obs: &Observation,
        grads: &mut GradBundle,
        coeff_fn: impl FnOnce(f64) -> f64,
    ) -> Result<f64, PolicyError> {
        let x = encode(&obs.state, obs.prompt_id, self.state_dim, self.num_tasks)?;
        let cache = self.net.forward_cached(&x)?;
        let v = cache.output()[0];
        let coeff = coeff_fn(v);
        if coeff != 0.0 {
            self.net.backward_into(&cache, &[coeff], grads)?;
        }
        Ok(v)
    }
}

pub fn sample_chunk<R: Rng + ?Sized>(
    policy: &ChunkPolicy,
    obs: &Observation,
    rng: &mut R,
) -> Result<(ActionChunk, f64), PolicyError> {
    policy.sample_chunk(obs, rng)
}

pub fn chunk_log_prob(policy: &ChunkPolicy, obs: &Observation, chunk: &ActionChunk) -> Result<f64, PolicyError> {
    policy.chunk_log_prob(obs, chunk)
}

pub fn value_estimate(critic: &ValueHead, obs: &Observation) -> Result<f64, PolicyError> {
    critic.value(obs)
}

/// AdamW state for the actor network plus its `log_std` vector.
#[derive(Debug, Clone)]
pub struct PolicyOptimizer {
    state: AdamWState,
}

impl PolicyOptimizer {
    pub fn new(policy: &ChunkPolicy) -> Self {
        let mut shapes: Vec<usize> = policy
            .net
            .layers()
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        shapes.push(policy.log_std.len());
        Self {
            state: AdamWState::new(&shapes),
        }
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    /// Applies one AdamW update, then clamps `log_std` into its valid range.
    pub fn step(&mut self, policy: &mut ChunkPolicy, grads: &PolicyGrad, cfg: &AdamWConfig) -> Result<(), NumError> {
        if !grads.net.is_congruent(&policy.net) || grads.log_std.len() != policy.log_std.len() {
            return Err(NumError::GradShape);
        }
        let mut g = grads.net.tensors();
        g.push(&grads.log_std);
        let mut p = policy.net.tensors_mut();
        p.push(&mut policy.log_std);
        adamw_update(&mut p, &g, &mut self.state, cfg)?;
        policy.clamp_log_std();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    task: String,
    shape: PolicyShape,
}

/// Actor + critic snapshot.
///
/// Layout: `b"CKP1"`, `u32` metadata length, JSON metadata (task, chunk
/// geometry), `u32` count + little-endian `f64` `log_std`, then
/// length-prefixed actor and critic network blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: String,
    pub policy: ChunkPolicy,
    pub critic: ValueHead,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&CheckpointMeta {
            task: self.task.clone(),
            shape: self.policy.shape,
        })
        .expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(b"CKP1");
        push_blob(&mut out, &meta);
        out.extend_from_slice(&(self.policy.log_std.len() as u32).to_le_bytes());
        for v in &self.policy.log_std {
            out.extend_from_slice(&v.to_le_bytes());
        }
        push_blob(&mut out, &self.policy.net.to_bytes());
        push_blob(&mut out, &self.critic.net.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != b"CKP1" {
            return Err(bad("bad magic"));
        }
        let mut pos = 4;
        let meta_raw = take_blob(bytes, &mut pos).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_raw).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let n = read_u32(bytes, &mut pos).ok_or_else(|| bad("truncated log_std"))? as usize;
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated log_std"))?;
        pos += 8 * n;
        let log_std = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let actor = MlpParams::from_bytes(take_blob(bytes, &mut pos).ok_or_else(|| bad("truncated actor"))?)?;
        let critic = MlpParams::from_bytes(take_blob(bytes, &mut pos).ok_or_else(|| bad("truncated critic"))?)?;
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            task: meta.task,
            policy: ChunkPolicy::from_parts(meta.shape, actor, log_std)?,
            critic: ValueHead::from_net(meta.shape.state_dim, meta.shape.num_tasks, critic)?,
        })
    }
}

fn push_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob);
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let raw = bytes.get(*pos..*pos + 4)?;
    *pos += 4;
    Some(u32::from_le_bytes(raw.try_into().ok()?))
}

fn take_blob<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    let n = read_u32(bytes, pos)? as usize;
    let blob = bytes.get(*pos..pos.checked_add(n)?)?;
    *pos += n;
    Some(blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Activation, Dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(h: usize, d: usize) -> PolicyShape {
        PolicyShape {
            state_dim: 3,
            num_tasks: 2,
            horizon: h,
            action_dim: d,
        }
    }

    fn obs() -> Observation {
        Observation::new(vec![0.2, -0.4, 0.9], 1)
    }

    #[test]
    fn standard_normal_at_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ChunkPolicy::new(shape(1, 1), &[4], 0.0, &mut rng);
        p.log_std = vec![0.0];
        let chunk = p.mean_chunk(&obs()).unwrap();
        let lp = p.chunk_log_prob(&obs(), &chunk).unwrap();
        assert!((lp + 0.918939).abs() < 1e-6);

        let p8 = ChunkPolicy::new(shape(4, 2), &[4], 0.0, &mut rng);
        let chunk = p8.mean_chunk(&obs()).unwrap();
        let lp = p8.chunk_log_prob(&obs(), &chunk).unwrap();
        assert!((lp + 7.35151).abs() < 1e-5);
    }

    #[test]
    fn log_prob_matches_pdf_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ChunkPolicy::new(shape(2, 2), &[5], -0.3, &mut rng);
        p.log_std = vec![-0.3, 0.1, -1.2, 0.4];
        let o = obs();
        let (chunk, lp) = p.sample_chunk(&o, &mut rng).unwrap();
        let mean = p.mean(&o).unwrap();
        let mut density = 1.0;
        for j in 0..4 {
            let s = p.log_std[j].exp();
            let z = (chunk.actions[j] - mean[j]) / s;
            density *= (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        }
        assert!((lp - density.ln()).abs() < 1e-10);
        assert!((p.chunk_log_prob(&o, &chunk).unwrap() - lp).abs() < 1e-12);
    }

    #[test]
    fn sample_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ChunkPolicy::new(shape(4, 2), &[8, 8], -0.5, &mut rng);
        let a = p.sample_chunk(&obs(), &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let b = p.sample_chunk(&obs(), &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.actions.len(), 8);
        assert_eq!((a.0.horizon, a.0.action_dim), (4, 2));
        assert!(a.1.is_finite());
    }

    #[test]
    fn narrow_policy_samples_stay_near_mean() {
        // With sigma = e^-5 every draw is 5 sigma from the mean at most with
        // probability 1 - 8 * 5.7e-7 per chunk, so 1000 chunks all pass with
        // probability > 0.995.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ChunkPolicy::new(shape(4, 2), &[8], 0.0, &mut rng);
        p.log_std.fill(LOG_STD_MIN);
        let o = obs();
        let mean = p.mean(&o).unwrap();
        let bound = 5.0 * (-5.0f64).exp();
        let inside = (0..1000)
            .filter(|_| {
                let (c, _) = p.sample_chunk(&o, &mut rng).unwrap();
                c.actions.iter().zip(&mean).all(|(a, m)| (a - m).abs() <= bound)
            })
            .count();
        assert!(inside >= 999, "{inside}");
    }

    #[test]
    fn chunk_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ChunkPolicy::new(shape(4, 2), &[4], 0.0, &mut rng);
        let c = ActionChunk::new(vec![0.0; 6], 3, 2);
        assert!(matches!(
            p.chunk_log_prob(&obs(), &c),
            Err(PolicyError::ChunkDim { .. })
        ));
        let bad = Observation::new(vec![0.0; 3], 2);
        assert!(matches!(p.mean(&bad), Err(PolicyError::Prompt { .. })));
    }

    #[test]
    fn log_prob_mean_gradient_is_scaled_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Linear head with identity weights on a 2-d input and no trunk.
        let net = MlpParams::new(vec![Dense::new(
            5,
            2,
            vec![0.3, 0.1, 0.0, 0.2, -0.1, -0.2, 0.4, 0.5, 0.1, 0.3],
            vec![0.05, -0.05],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let p = ChunkPolicy::from_parts(shape(1, 2), net, vec![-0.4, 0.3]).unwrap();
        let o = obs();
        let (chunk, _) = p.sample_chunk(&o, &mut rng).unwrap();
        let mut g = PolicyGrad::zeros_like(&p);
        p.accumulate_log_prob_grad(&o, &chunk, 1.0, &mut g).unwrap();
        let mean = p.mean(&o).unwrap();
        // d logp / d bias_j == d logp / d mean_j == (a - mu) / sigma^2
        for j in 0..2 {
            let expect = (chunk.actions[j] - mean[j]) / (2.0 * p.log_std[j]).exp();
            assert!((g.net.bias[0][j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_critic_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = ValueHead::new(3, 2, &[6, 6], &mut rng);
        let last = v.net.layers_mut().last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        assert_eq!(v.value(&obs()).unwrap(), 0.0);
        assert_eq!(v.value(&Observation::new(vec![5.0, 1.0, -3.0], 0)).unwrap(), 0.0);
    }

    #[test]
    fn critic_matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = ValueHead::new(3, 2, &[4], &mut rng);
        let o = obs();
        let x = [0.2, -0.4, 0.9, 0.0, 1.0];
        let l0 = &v.net.layers()[0];
        let l1 = &v.net.layers()[1];
        let mut out = l1.bias[0];
        for h in 0..4 {
            let mut z = l0.bias[h];
            for i in 0..5 {
                z += l0.weights[h * 5 + i] * x[i];
            }
            out += l1.weights[h] * z.tanh();
        }
        assert!((v.value(&o).unwrap() - out).abs() < 1e-12);
        assert_eq!(v.value(&o).unwrap(), v.value(&o).unwrap());
    }

    #[test]
    fn optimizer_clamps_log_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ChunkPolicy::new(shape(1, 1), &[3], LOG_STD_MIN, &mut rng);
        let mut opt = PolicyOptimizer::new(&p);
        let mut g = PolicyGrad::zeros_like(&p);
        g.log_std[0] = 1.0;
        let cfg = AdamWConfig {
            lr: 0.5,
            ..Default::default()
        };
        opt.step(&mut p, &g, &cfg).unwrap();
        assert_eq!(p.log_std[0], LOG_STD_MIN);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ckpt = Checkpoint {
            task: "sparse-reach".into(),
            policy: ChunkPolicy::new(shape(4, 2), &[6], -0.7, &mut rng),
            critic: ValueHead::new(3, 2, &[6], &mut rng),
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn padding_repeats_last_action() {
        let c = ActionChunk::from_steps(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], 4, 2);
        assert_eq!(c.actions, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
    }
}
