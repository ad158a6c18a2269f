//! Minimal feedforward network engine: forward pass, exact backpropagation,
//! Xavier initialization and Adam. Just enough machinery for the per-date
//! integrand networks and the stopping-decision networks, nothing more.

mod adam;
mod batch;
mod checkpoint;

pub use adam::{AdamState, LrSchedule};
pub use batch::{FeatureMatrix, Workspace, TILE as TILE_COLS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// `min(max(x, 0), bound)`
    BoundedRelu { bound: f64 },
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::BoundedRelu { bound } => x.max(0.0).min(bound),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative recovered from the post-activation value. The kinks at 0
    /// and at the bound take derivative 0 (one-sided convention).
    #[inline]
    pub fn derivative_from_output(&self, a: f64) -> f64 {
        match *self {
            Activation::BoundedRelu { bound } => {
                if a > 0.0 && a < bound {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Output-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Linear,
    Sigmoid,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    // Clamp keeps the output strictly inside (0, 1); the function already
    // saturates to 16 digits beyond |x| = 36.
    let x = x.clamp(-36.0, 36.0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shape and activation choices of one multilayer perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: OutputActivation,
}

impl MlpArchitecture {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        hidden: Vec<usize>,
        activation: Activation,
        output: OutputActivation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("all layer widths must be at least 1"));
        }
        if let Activation::BoundedRelu { bound } = activation {
            if !(bound > 0.0) {
                return Err(Error::invalid("activation bound must be positive"));
            }
        }
        Ok(MlpArchitecture {
            in_dim,
            out_dim,
            hidden,
            activation,
            output,
        })
    }

    /// Layer widths including input and output: `[in, q_1, .., q_I, out]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.in_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.out_dim);
        d
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        let dims = self.dims();
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights and biases of one network. `weights[l]` is row-major
/// `dims[l+1] x dims[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: MlpArchitecture,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Parameter-shaped tensor bundle: gradients, Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            weights: p.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: p.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Xavier-uniform initialization: layer-`l` weights drawn
/// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, biases zero.
pub fn init_xavier(arch: &MlpArchitecture, seed: u64) -> MlpParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dims = arch.dims();
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let layer: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        weights.push(layer);
        biases.push(vec![0.0; fan_out]);
    }
    MlpParams {
        arch: arch.clone(),
        weights,
        biases,
    }
}

impl MlpParams {
    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.arch.in_dim {
            return Err(Error::invalid(format!(
                "input has length {}, expected {}",
                input.len(),
                self.arch.in_dim
            )));
        }
        let dims = self.arch.dims();
        let n_layers = dims.len() - 1;
        let mut cur = input.to_vec();
        for l in 0..n_layers {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut next = vec![0.0; rows];
            for i in 0..rows {
                let row = &self.weights[l][i * cols..(i + 1) * cols];
                let mut acc = self.biases[l][i];
                for (w, x) in row.iter().zip(&cur) {
                    acc += w * x;
                }
                next[i] = acc;
            }
            if l + 1 < n_layers {
                for v in next.iter_mut() {
                    *v = self.arch.activation.apply(*v);
                }
            } else if self.arch.output == OutputActivation::Sigmoid {
                for v in next.iter_mut() {
                    *v = sigmoid(*v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Batched forward over sample-major inputs (`n x in_dim`), returning
    /// sample-major outputs (`n x out_dim`).
    pub fn forward_batch(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let n = self.check_batch(inputs)?;
        let mut ws = Workspace::new();
        Ok(batch::forward_sample_major(self, inputs, n, &mut ws))
    }

    /// Batched forward plus exact reverse-mode gradients.
    ///
    /// `upstream` holds one cotangent per sample (`n x out_dim`); the
    /// returned gradients are the sums over the batch of
    /// `d(upstream . output) / d(theta)`.
    pub fn forward_backward(
        &self,
        inputs: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, MlpGrads)> {
        let n = self.check_batch(inputs)?;
        if upstream.len() != n * self.arch.out_dim {
            return Err(Error::invalid(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                n * self.arch.out_dim
            )));
        }
        let mut ws = Workspace::new();
        let mut grads = MlpGrads::zeros_like(self);
        let outputs =
            batch::forward_backward_sample_major(self, inputs, upstream, n, &mut grads, &mut ws);
        Ok((outputs, grads))
    }

    fn check_batch(&self, inputs: &[f64]) -> Result<usize> {
        if inputs.is_empty() || inputs.len() % self.arch.in_dim != 0 {
            return Err(Error::invalid(format!(
                "batch length {} is not a positive multiple of in_dim {}",
                inputs.len(),
                self.arch.in_dim
            )));
        }
        Ok(inputs.len() / self.arch.in_dim)
    }
}

pub use checkpoint::{read_mlp, write_mlp};
