//! Fully connected feedforward networks over a flat weight vector.
//!
//! Parameters for weight layer `l` (mapping `sizes[l]` inputs to
//! `sizes[l+1]` outputs) occupy one contiguous block: the `out × in` weight
//! matrix in row-major order, followed by the `out` biases. Blocks are laid
//! out in layer order, so `n = Σ (sizes[l] + 1) · sizes[l+1]`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::damage::DamagePlan;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity. Only used to build analytic test networks.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and activation `a = σ(z)`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Softmax,
    Identity,
}

impl std::str::FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(OutputMode::Softmax),
            "identity" | "linear" => Ok(OutputMode::Identity),
            other => Err(Error::invalid(format!("unknown output mode '{other}'"))),
        }
    }
}

/// Where a flat index lives in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, row: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
    output_mode: OutputMode,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation, output_mode: OutputMode) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("a network needs at least an input and an output layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(NetworkSpec {
            layer_sizes,
            hidden_activation,
            output_mode,
        })
    }

    /// Parses `k-h1-...-m`.
    pub fn parse_arch(arch: &str, act: Activation, mode: OutputMode) -> Result<Self> {
        let sizes = arch
            .split('-')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer size '{s}' in '{arch}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes, act, mode)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn arch_string(&self) -> String {
        self.layer_sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_weights(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// First flat index of weight layer `l`.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.layer_sizes[..=l].windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn weight_index(&self, layer: usize, row: usize, col: usize) -> usize {
        debug_assert!(row < self.layer_sizes[layer + 1] && col < self.layer_sizes[layer]);
        self.layer_offset(layer) + row * self.layer_sizes[layer] + col
    }

    pub fn bias_index(&self, layer: usize, row: usize) -> usize {
        let fan_in = self.layer_sizes[layer];
        let fan_out = self.layer_sizes[layer + 1];
        debug_assert!(row < fan_out);
        self.layer_offset(layer) + fan_out * fan_in + row
    }

    pub fn locate(&self, index: usize) -> Option<ParamSlot> {
        let mut offset = 0;
        for (layer, w) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let block = (fan_in + 1) * fan_out;
            if index < offset + block {
                let local = index - offset;
                return Some(if local < fan_in * fan_out {
                    ParamSlot::Weight {
                        layer,
                        row: local / fan_in,
                        col: local % fan_in,
                    }
                } else {
                    ParamSlot::Bias {
                        layer,
                        row: local - fan_in * fan_out,
                    }
                });
            }
            offset += block;
        }
        None
    }

    fn check_input(&self, w: &FlatWeights, x: &[f64]) -> Result<()> {
        if w.len() != self.n_weights() {
            return Err(Error::invalid(format!(
                "weight vector has {} entries, architecture {} needs {}",
                w.len(),
                self.arch_string(),
                self.n_weights()
            )));
        }
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// All network parameters as a single coordinate vector. The index map is
/// owned by [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatWeights(Vec<f64>);

impl FlatWeights {
    pub fn new(values: Vec<f64>) -> Self {
        FlatWeights(values)
    }

    pub fn zeros(n: usize) -> Self {
        FlatWeights(vec![0.0; n])
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; spec.n_weights()];
        for (l, w) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            let start = spec.layer_offset(l);
            for v in &mut values[start..start + fan_in * fan_out] {
                *v = normal.sample(&mut rng);
            }
        }
        FlatWeights(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.0)
    }

    /// `self + alpha·dir`
    pub fn offset(&self, alpha: f64, dir: &[f64]) -> FlatWeights {
        let mut out = self.0.clone();
        crate::linalg::axpy(alpha, dir, &mut out);
        FlatWeights(out)
    }
}

impl std::ops::Index<usize> for FlatWeights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// `acts[0]` is the input, `acts[l+1]` the activation after weight layer `l`.
    /// The last entry holds the raw logits.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per weight layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &[f64] {
        &self.output
    }

    pub(crate) fn logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

pub(crate) fn forward_cache(spec: &NetworkSpec, w: &FlatWeights, x: &[f64]) -> Result<ForwardCache> {
    spec.check_input(w, x)?;
    let depth = spec.depth();
    let mut acts = Vec::with_capacity(depth + 1);
    let mut pre = Vec::with_capacity(depth);
    acts.push(x.to_vec());
    for l in 0..depth {
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        let off = spec.layer_offset(l);
        let weights = &w.0[off..off + fan_in * fan_out];
        let bias = &w.0[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let input = &acts[l];
        let z: Vec<f64> = (0..fan_out)
            .map(|j| crate::linalg::dot(&weights[j * fan_in..(j + 1) * fan_in], input) + bias[j])
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite pre-activation in weight layer {l}"
            )));
        }
        let a: Vec<f64> = if l + 1 < depth {
            z.iter().map(|&v| spec.hidden_activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        acts.push(a);
    }
    let logits = pre.last().unwrap();
    let output = match spec.output_mode {
        OutputMode::Identity => logits.clone(),
        OutputMode::Softmax => softmax(logits),
    };
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite network output after layer {}",
            depth - 1
        )));
    }
    Ok(ForwardCache { acts, pre, output })
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `f(x, w)` after the output mode is applied.
pub fn forward(spec: &NetworkSpec, w: &FlatWeights, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_cache(spec, w, x)?.output)
}

/// Reverse sweep from a cotangent on the logits to the full weight gradient.
pub(crate) fn backward_logits(
    spec: &NetworkSpec,
    w: &FlatWeights,
    cache: &ForwardCache,
    grad_logits: &[f64],
    out: &mut [f64],
) {
    let depth = spec.depth();
    let mut delta = grad_logits.to_vec();
    for l in (0..depth).rev() {
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        let off = spec.layer_offset(l);
        let input = &cache.acts[l];
        for j in 0..fan_out {
            let row = &mut out[off + j * fan_in..off + (j + 1) * fan_in];
            for (o, a) in row.iter_mut().zip(input) {
                *o = delta[j] * a;
            }
            out[off + fan_in * fan_out + j] = delta[j];
        }
        if l > 0 {
            let weights = &w.0[off..off + fan_in * fan_out];
            let z = &cache.pre[l - 1];
            let a = &cache.acts[l];
            let mut next = vec![0.0; fan_in];
            for (j, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                crate::linalg::axpy(*d, &weights[j * fan_in..(j + 1) * fan_in], &mut next);
            }
            for i in 0..fan_in {
                next[i] *= spec.hidden_activation.derivative(z[i], a[i]);
            }
            delta = next;
        }
    }
}

/// Pulls a cotangent on `f` back to the logits.
pub(crate) fn output_vjp(spec: &NetworkSpec, cache: &ForwardCache, grad_out: &[f64]) -> Vec<f64> {
    match spec.output_mode {
        OutputMode::Identity => grad_out.to_vec(),
        OutputMode::Softmax => {
            let p = &cache.output;
            let inner = crate::linalg::dot(p, grad_out);
            p.iter().zip(grad_out).map(|(pi, gi)| pi * (gi - inner)).collect()
        }
    }
}

/// `∂f/∂w` at one input, row-major `m × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub input_id: usize,
}

impl JacobianBlock {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| crate::linalg::dot(self.row(i), v)).collect()
    }
}

/// Exact Jacobian by one reverse sweep per output component.
pub fn jacobian(spec: &NetworkSpec, w: &FlatWeights, x: &[f64], input_id: usize) -> Result<JacobianBlock> {
    let cache = forward_cache(spec, w, x)?;
    let m = spec.output_dim();
    let n = spec.n_weights();
    let mut data = vec![0.0; m * n];
    let mut seed = vec![0.0; m];
    for i in 0..m {
        seed.iter_mut().for_each(|s| *s = 0.0);
        seed[i] = 1.0;
        let g = output_vjp(spec, &cache, &seed);
        backward_logits(spec, w, &cache, &g, &mut data[i * n..(i + 1) * n]);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite Jacobian entry at input {input_id}"
        )));
    }
    Ok(JacobianBlock {
        rows: m,
        cols: n,
        data,
        input_id,
    })
}

/// `J du` by forward-mode tangent propagation, without forming `J`.
pub fn jvp(spec: &NetworkSpec, w: &FlatWeights, x: &[f64], du: &[f64]) -> Result<Vec<f64>> {
    if du.len() != spec.n_weights() {
        return Err(Error::invalid(format!(
            "direction has {} entries, network has {} weights",
            du.len(),
            spec.n_weights()
        )));
    }
    let cache = forward_cache(spec, w, x)?;
    let depth = spec.depth();
    // Tangent of the input to the current layer.
    let mut tangent = vec![0.0; spec.input_dim()];
    let mut dz = Vec::new();
    for l in 0..depth {
        let fan_in = spec.layer_sizes[l];
        let fan_out = spec.layer_sizes[l + 1];
        let off = spec.layer_offset(l);
        let weights = &w.0[off..off + fan_in * fan_out];
        let dweights = &du[off..off + fan_in * fan_out];
        let dbias = &du[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let input = &cache.acts[l];
        dz = (0..fan_out)
            .map(|j| {
                let r = j * fan_in..(j + 1) * fan_in;
                crate::linalg::dot(&dweights[r.clone()], input) + crate::linalg::dot(&weights[r], &tangent) + dbias[j]
            })
            .collect();
        if l + 1 < depth {
            let z = &cache.pre[l];
            let a = &cache.acts[l + 1];
            tangent = (0..fan_out)
                .map(|j| dz[j] * spec.hidden_activation.derivative(z[j], a[j]))
                .collect();
        }
    }
    let out = match spec.output_mode {
        OutputMode::Identity => dz,
        OutputMode::Softmax => {
            let p = &cache.output;
            let inner = crate::linalg::dot(p, &dz);
            p.iter().zip(&dz).map(|(pi, di)| pi * (di - inner)).collect()
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite directional derivative"));
    }
    Ok(out)
}

/// Copy of `w` with every index in `plan` set to exactly zero.
pub fn apply_mask(w: &FlatWeights, plan: &DamagePlan) -> Result<FlatWeights> {
    if let Some(&last) = plan.indices().last() {
        if last >= w.len() {
            return Err(Error::invalid(format!(
                "damage index {last} out of range for {} weights",
                w.len()
            )));
        }
    }
    let mut out = w.clone();
    for &i in plan.indices() {
        out.0[i] = 0.0;
    }
    Ok(out)
}
