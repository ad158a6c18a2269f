//! Batched forward/backward kernels.
//!
//! Activations are kept feature-major (`rows = features`, `cols = samples`)
//! so the innermost loops run over contiguous sample lanes and vectorize.
//! Callers that stream large batches should tile them; [`TILE`] columns per
//! tile keeps every activation row inside L1/L2.

use super::{MlpGrads, MlpParams, OutputActivation};

/// Preferred number of samples per kernel tile.
pub const TILE: usize = 512;

/// Feature-major matrix: `data[row * cols + col]`.
#[derive(Debug, Clone, Default)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Reshape, reusing the allocation. Contents are unspecified afterwards.
    pub fn reset(&mut self, rows: usize, cols: usize) {
        self.rows = rows;
        self.cols = cols;
        self.data.resize(rows * cols, 0.0);
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Reusable buffers for tile-sized forward/backward passes.
#[derive(Default)]
pub struct Workspace {
    /// Post-activation values per layer; `acts[0]` is the input tile.
    acts: Vec<FeatureMatrix>,
    delta: FeatureMatrix,
    delta_next: FeatureMatrix,
    input_scratch: FeatureMatrix,
    upstream_scratch: FeatureMatrix,
}

/// `out[i] = sum_j w[i][j] in[j] + b[i]` over all sample lanes.
fn affine(w: &[f64], b: &[f64], input: &FeatureMatrix, out: &mut FeatureMatrix) {
    let in_rows = input.rows;
    for i in 0..out.rows {
        let w_row = &w[i * in_rows..(i + 1) * in_rows];
        let out_row = out.row_mut(i);
        out_row.fill(b[i]);
        for (j, &wij) in w_row.iter().enumerate() {
            let in_row = input.row(j);
            for (o, x) in out_row.iter_mut().zip(in_row) {
                *o += wij * x;
            }
        }
    }
}

impl Workspace {
    pub fn new() -> Self {
        Workspace::default()
    }

    /// Forward pass over a feature-major input tile. Post-activations stay
    /// cached for a following [`backward_fm`](Self::backward_fm) call with
    /// the same parameters.
    pub fn forward_fm(&mut self, p: &MlpParams, input: &FeatureMatrix) -> &FeatureMatrix {
        debug_assert_eq!(input.rows, p.arch.in_dim);
        let dims = p.arch.dims();
        let n_layers = dims.len() - 1;
        let cols = input.cols;
        if self.acts.len() < n_layers + 1 {
            self.acts.resize_with(n_layers + 1, FeatureMatrix::default);
        }
        self.acts[0].reset(dims[0], cols);
        self.acts[0].data.copy_from_slice(&input.data);
        for l in 0..n_layers {
            let (before, after) = self.acts.split_at_mut(l + 1);
            let src = &before[l];
            let dst = &mut after[0];
            dst.reset(dims[l + 1], cols);
            affine(&p.weights[l], &p.biases[l], src, dst);
            if l + 1 < n_layers {
                let act = p.arch.activation;
                for v in dst.data.iter_mut() {
                    *v = act.apply(*v);
                }
            } else if p.arch.output == OutputActivation::Sigmoid {
                for v in dst.data.iter_mut() {
                    *v = super::sigmoid(*v);
                }
            }
        }
        &self.acts[n_layers]
    }

    /// Reverse pass for the tile most recently run through
    /// [`forward_fm`](Self::forward_fm). Accumulates parameter gradients of
    /// `sum_samples upstream . output` into `grads`.
    pub fn backward_fm(&mut self, p: &MlpParams, upstream: &FeatureMatrix, grads: &mut MlpGrads) {
        let dims = p.arch.dims();
        let n_layers = dims.len() - 1;
        let cols = upstream.cols;
        debug_assert_eq!(upstream.rows, p.arch.out_dim);
        debug_assert_eq!(self.acts[n_layers].cols, cols, "forward/backward tile mismatch");

        self.delta.reset(dims[n_layers], cols);
        self.delta.data.copy_from_slice(&upstream.data);
        if p.arch.output == OutputActivation::Sigmoid {
            let out_acts = &self.acts[n_layers];
            for (d, a) in self.delta.data.iter_mut().zip(&out_acts.data) {
                *d *= a * (1.0 - a);
            }
        }

        for l in (0..n_layers).rev() {
            let acts_in = &self.acts[l];
            let (out_rows, in_rows) = (dims[l + 1], dims[l]);
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for i in 0..out_rows {
                let d_row = self.delta.row(i);
                gb[i] += d_row.iter().sum::<f64>();
                let g_row = &mut gw[i * in_rows..(i + 1) * in_rows];
                for (j, g) in g_row.iter_mut().enumerate() {
                    let a_row = acts_in.row(j);
                    let mut acc = 0.0;
                    for (d, a) in d_row.iter().zip(a_row) {
                        acc += d * a;
                    }
                    *g += acc;
                }
            }
            if l == 0 {
                break;
            }
            // Propagate: delta_next[j] = (W^T delta)[j] * act'(acts_in[j]).
            self.delta_next.reset(in_rows, cols);
            let w = &p.weights[l];
            for j in 0..in_rows {
                let nd = self.delta_next.row_mut(j);
                nd.fill(0.0);
                for i in 0..out_rows {
                    let c = w[i * in_rows + j];
                    let d_row = self.delta.row(i);
                    for (n, d) in nd.iter_mut().zip(d_row) {
                        *n += c * d;
                    }
                }
            }
            let act = p.arch.activation;
            for j in 0..in_rows {
                let a_row = acts_in.row(j);
                let nd = self.delta_next.row_mut(j);
                for (n, a) in nd.iter_mut().zip(a_row) {
                    *n *= act.derivative_from_output(*a);
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_next);
        }
    }
}

/// Sample-major convenience wrapper over the tiled kernels.
pub(super) fn forward_sample_major(
    p: &MlpParams,
    inputs: &[f64],
    n: usize,
    ws: &mut Workspace,
) -> Vec<f64> {
    let (in_dim, out_dim) = (p.arch.in_dim, p.arch.out_dim);
    let mut outputs = vec![0.0; n * out_dim];
    let mut start = 0;
    while start < n {
        let tile = TILE.min(n - start);
        let mut input = std::mem::take(&mut ws.input_scratch);
        input.reset(in_dim, tile);
        for b in 0..tile {
            for f in 0..in_dim {
                input.data[f * tile + b] = inputs[(start + b) * in_dim + f];
            }
        }
        let out = ws.forward_fm(p, &input);
        for b in 0..tile {
            for f in 0..out_dim {
                outputs[(start + b) * out_dim + f] = out.row(f)[b];
            }
        }
        ws.input_scratch = input;
        start += tile;
    }
    outputs
}

pub(super) fn forward_backward_sample_major(
    p: &MlpParams,
    inputs: &[f64],
    upstream: &[f64],
    n: usize,
    grads: &mut MlpGrads,
    ws: &mut Workspace,
) -> Vec<f64> {
    let (in_dim, out_dim) = (p.arch.in_dim, p.arch.out_dim);
    let mut outputs = vec![0.0; n * out_dim];
    let mut start = 0;
    while start < n {
        let tile = TILE.min(n - start);
        let mut input = std::mem::take(&mut ws.input_scratch);
        input.reset(in_dim, tile);
        let mut up = std::mem::take(&mut ws.upstream_scratch);
        up.reset(out_dim, tile);
        for b in 0..tile {
            for f in 0..in_dim {
                input.data[f * tile + b] = inputs[(start + b) * in_dim + f];
            }
            for f in 0..out_dim {
                up.data[f * tile + b] = upstream[(start + b) * out_dim + f];
            }
        }
        let out = ws.forward_fm(p, &input);
        for b in 0..tile {
            for f in 0..out_dim {
                outputs[(start + b) * out_dim + f] = out.row(f)[b];
            }
        }
        ws.backward_fm(p, &up, grads);
        ws.input_scratch = input;
        ws.upstream_scratch = up;
        start += tile;
    }
    outputs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_xavier, Activation, MlpArchitecture};

    fn arch(out: OutputActivation) -> MlpArchitecture {
        MlpArchitecture::new(3, 2, vec![5, 4], Activation::BoundedRelu { bound: 2.0 }, out)
            .unwrap()
    }

    #[test]
    fn batched_forward_matches_single_sample_forward() {
        for out in [OutputActivation::Linear, OutputActivation::Sigmoid] {
            let p = init_xavier(&arch(out), 9);
            let inputs: Vec<f64> = (0..3 * 700).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let batched = p.forward_batch(&inputs).unwrap();
            for s in 0..700 {
                let single = p.forward(&inputs[s * 3..(s + 1) * 3]).unwrap();
                for f in 0..2 {
                    assert!((batched[s * 2 + f] - single[f]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_xavier(&arch(OutputActivation::Linear), 3);
        let inputs = vec![0.3; 3 * 10];
        let upstream = vec![0.0; 2 * 10];
        let (_, grads) = p.forward_backward(&inputs, &upstream).unwrap();
        assert!(grads
            .weights
            .iter()
            .chain(grads.biases.iter())
            .all(|v| v.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn duplicated_sample_doubles_gradients() {
        let p = init_xavier(&arch(OutputActivation::Sigmoid), 4);
        let one = [0.2, -0.4, 0.9];
        let up = [1.3, -0.7];
        let (_, g1) = p.forward_backward(&one, &up).unwrap();
        let two: Vec<f64> = one.iter().chain(one.iter()).cloned().collect();
        let up2: Vec<f64> = up.iter().chain(up.iter()).cloned().collect();
        let (_, g2) = p.forward_backward(&two, &up2).unwrap();
        for (a, b) in g1.weights.iter().zip(&g2.weights) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    /// Distance of the closest hidden pre-activation to a ReLU kink
    /// (0 or the bound). Central differences are only trustworthy when the
    /// probe step cannot cross a kink.
    fn min_kink_distance(p: &crate::nn::MlpParams, inputs: &[f64]) -> f64 {
        let dims = p.arch.dims();
        let n_layers = dims.len() - 1;
        let mut closest = f64::INFINITY;
        for sample in inputs.chunks(p.arch.in_dim) {
            let mut cur = sample.to_vec();
            for l in 0..n_layers {
                let (rows, cols) = (dims[l + 1], dims[l]);
                let mut next = vec![0.0; rows];
                for i in 0..rows {
                    let mut acc = p.biases[l][i];
                    for j in 0..cols {
                        acc += p.weights[l][i * cols + j] * cur[j];
                    }
                    next[i] = acc;
                }
                if l + 1 < n_layers {
                    for z in next.iter_mut() {
                        closest = closest.min(z.abs());
                        if let Activation::BoundedRelu { bound } = p.arch.activation {
                            closest = closest.min((*z - bound).abs());
                        }
                        *z = p.arch.activation.apply(*z);
                    }
                }
                cur = next;
            }
        }
        closest
    }

    /// Central-difference check of every parameter gradient.
    fn finite_difference_check(output: OutputActivation, seed_base: u64) {
        let arch = MlpArchitecture::new(
            3,
            2,
            vec![6, 5, 4],
            Activation::BoundedRelu { bound: 100.0 },
            output,
        )
        .unwrap();
        let inputs: Vec<f64> = (0..3 * 4)
            .map(|i| 0.31 * ((i as f64 * 0.7).sin()))
            .collect();
        // Take the first seed whose pre-activations stay clear of kinks.
        let p = (seed_base..)
            .map(|s| init_xavier(&arch, s))
            .find(|p| min_kink_distance(p, &inputs) > 1e-3)
            .unwrap();
        let upstream: Vec<f64> = (0..2 * 4).map(|i| 0.5 + 0.1 * i as f64).collect();
        let (_, grads) = p.forward_backward(&inputs, &upstream).unwrap();

        let loss = |p: &crate::nn::MlpParams| -> f64 {
            let out = p.forward_batch(&inputs).unwrap();
            out.iter().zip(&upstream).map(|(o, u)| o * u).sum()
        };
        let h = 1e-6;
        for l in 0..p.weights.len() {
            for idx in 0..p.weights[l].len() {
                let mut hi = p.clone();
                hi.weights[l][idx] += h;
                let mut lo = p.clone();
                lo.weights[l][idx] -= h;
                let fd = (loss(&hi) - loss(&lo)) / (2.0 * h);
                let g = grads.weights[l][idx];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    (fd - g).abs() / denom < 1e-5,
                    "layer {l} w[{idx}]: fd {fd} vs bp {g}"
                );
            }
            for idx in 0..p.biases[l].len() {
                let mut hi = p.clone();
                hi.biases[l][idx] += h;
                let mut lo = p.clone();
                lo.biases[l][idx] -= h;
                let fd = (loss(&hi) - loss(&lo)) / (2.0 * h);
                let g = grads.biases[l][idx];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    (fd - g).abs() / denom < 1e-5,
                    "layer {l} b[{idx}]: fd {fd} vs bp {g}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_central_differences_linear() {
        finite_difference_check(OutputActivation::Linear, 11);
    }

    #[test]
    fn gradients_match_central_differences_sigmoid() {
        finite_difference_check(OutputActivation::Sigmoid, 12);
    }
}
