//! Minimal multilayer perceptron with analytic gradients and an AdamW optimizer.
//!
//! Parameters live in plain `Vec<f64>` buffers, one weight matrix (row-major,
//! `out x in`) and one bias vector per layer. Hidden layers use `tanh`, the
//! output layer is linear. Backward passes accumulate into a [`GradBundle`]
//! so a minibatch costs one allocation.
//!
//! ```text
//! m = b1 * m + (1 - b1) * g
//! v = b2 * v + (1 - b2) * g^2
//! p = p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
//! ```

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("upstream gradient shape mismatch: expected {expected}, got {got}")]
    UpstreamShape { expected: usize, got: usize },
    #[error("layer {layer} expects {expected} inputs but previous layer emits {got}")]
    LayerShape { layer: usize, expected: usize, got: usize },
    #[error("forward cache does not belong to this network")]
    MissingCache,
    #[error("gradient bundle is not congruent with the parameters")]
    GradShape,
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("malformed parameter snapshot: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Identity => 0,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// One fully connected layer `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self, NumError> {
        if weights.len() != in_dim * out_dim {
            return Err(NumError::Format(format!(
                "weight buffer has {} values for a {out_dim}x{in_dim} layer",
                weights.len()
            )));
        }
        if bias.len() != out_dim {
            return Err(NumError::Format(format!(
                "bias buffer has {} values for {out_dim} outputs",
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
        })
    }

    fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            let z = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
            out.push(match self.activation {
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            });
        }
    }
}

/// Layer stack with compatible shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

/// Per-layer activations recorded by [`MlpParams::forward_cached`].
///
/// `values[0]` is the network input and `values[k + 1]` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    values: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn layer_outputs(&self) -> &[Vec<f64>] {
        &self.values[1..]
    }
}

/// Gradients shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .iter_mut()
            .chain(self.bias.iter_mut())
            .flat_map(|t| t.iter_mut())
            .for_each(|g| *g *= factor);
    }

    pub fn is_congruent(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.layers.len()
            && self.bias.len() == params.layers.len()
            && params
                .layers
                .iter()
                .enumerate()
                .all(|(k, l)| self.weights[k].len() == l.weights.len() && self.bias[k].len() == l.bias.len())
    }

    /// Tensors in the same order as [`MlpParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|g| g.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0_f64, |acc, g| acc.max(g.abs()))
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self, NumError> {
        if layers.is_empty() {
            return Err(NumError::Format("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(NumError::LayerShape {
                    layer: k + 1,
                    expected: pair[1].in_dim,
                    got: pair[0].out_dim,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases, `tanh` hidden layers and a linear head.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Tanh
                };
                Dense::glorot(w[0], w[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|p| p.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NumError> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.apply(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache, NumError> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.out_dim);
            layer.apply(values.last().expect("non-empty"), &mut out);
            values.push(out);
        }
        Ok(ForwardCache { values })
    }

    /// Accumulates `d(upstream . output)/d(params)` into `grads` and returns the
    /// gradient with respect to the network input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut GradBundle,
    ) -> Result<Vec<f64>, NumError> {
        if cache.values.len() != self.layers.len() + 1
            || cache.values.iter().zip(self.sizes()).any(|(v, s)| v.len() != s)
        {
            return Err(NumError::MissingCache);
        }
        if upstream.len() != self.output_dim() {
            return Err(NumError::UpstreamShape {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if !grads.is_congruent(self) {
            return Err(NumError::GradShape);
        }
        let mut delta = upstream.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.values[k];
            let output = &cache.values[k + 1];
            if layer.activation == Activation::Tanh {
                for (d, y) in delta.iter_mut().zip(output) {
                    *d *= 1.0 - y * y;
                }
            }
            let gw = &mut grads.weights[k];
            let gb = &mut grads.bias[k];
            let mut prev = vec![0.0; layer.in_dim];
            for (o, &dz) in delta.iter().enumerate() {
                gb[o] += dz;
                if dz == 0.0 {
                    continue;
                }
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    gw[row + i] += dz * input[i];
                    prev[i] += layer.weights[row + i] * dz;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NumError> {
        if input.len() != self.input_dim() {
            return Err(NumError::InputShape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Serializes to the flat binary container:
    /// `b"MLP1"`, `u32` layer count, `u32` sizes, `u8` activation tags, then
    /// each layer's weights followed by its bias as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.num_params());
        out.extend_from_slice(MLP_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for s in self.sizes() {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.extend(self.layers.iter().map(|l| l.activation.tag()));
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MLP_MAGIC {
            return Err(NumError::Format("bad magic".into()));
        }
        let n = r.u32()? as usize;
        if n == 0 || n > 1024 {
            return Err(NumError::Format(format!("implausible layer count {n}")));
        }
        let sizes = (0..=n)
            .map(|_| r.u32().map(|s| s as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let acts = r
            .take(n)?
            .iter()
            .map(|&t| Activation::from_tag(t).ok_or(NumError::Format(format!("activation tag {t}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut layers = Vec::with_capacity(n);
        for k in 0..n {
            let (i, o) = (sizes[k], sizes[k + 1]);
            let weights = r.f64s(i * o)?;
            let bias = r.f64s(o)?;
            layers.push(Dense::new(i, o, weights, bias, acts[k])?);
        }
        if r.pos != bytes.len() {
            return Err(NumError::Format("trailing bytes".into()));
        }
        Self::new(layers)
    }
}

const MLP_MAGIC: &[u8; 4] = b"MLP1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NumError::Format("truncated snapshot".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, NumError> {
        let raw = self.take(n.checked_mul(8).ok_or(NumError::Format("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Free-function form of [`MlpParams::forward`].
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>, NumError> {
    params.forward(input)
}

/// Gradient of `upstream . output` for a single input, plus the input gradient.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<(GradBundle, Vec<f64>), NumError> {
    let mut grads = GradBundle::zeros_like(params);
    let input_grad = params.backward_into(cache, upstream, &mut grads)?;
    Ok((grads, input_grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment accumulators for a list of flat tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_mlp(params: &MlpParams) -> Self {
        let shapes: Vec<usize> = params
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self::new(&shapes)
    }
}

/// One AdamW update over matching lists of parameter and gradient tensors.
///
/// Gradients are validated before any state is touched, so a rejected step
/// leaves parameters and moments unchanged.
pub fn adamw_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<(), NumError> {
    if cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(NumError::InvalidLearningRate(cfg.lr));
    }
    if params.len() != grads.len()
        || params.len() != state.m.len()
        || params
            .iter()
            .zip(grads)
            .zip(&state.m)
            .any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
    {
        return Err(NumError::GradShape);
    }
    if let Some(tensor) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(NumError::NonFiniteGradient { tensor });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
        }
    }
    Ok(())
}

pub fn adamw_step(
    params: &mut MlpParams,
    grads: &GradBundle,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<(), NumError> {
    if !grads.is_congruent(params) {
        return Err(NumError::GradShape);
    }
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    adamw_update(&mut p, &g, state, cfg)
}
