use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::market::{ModelSpec, TimeGrid};

/// Simulated state paths on the fine grid together with the Brownian
/// increments that generated them.
///
/// Path `j` owns RNG stream `first_path + j` of the batch seed, so a batch
/// simulated in one piece is bit-identical to the same paths simulated in
/// any chunking.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Index of the first path's RNG stream (0 for standalone batches).
    pub first_path: u64,
    /// `n_paths x (n_steps+1) x dim`, row-major.
    states: Vec<f64>,
    /// `n_paths x n_steps x dim`, row-major.
    dw: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"DMPB";
const FORMAT_VERSION: u32 = 1;

impl PathBatch {
    /// State vector of path `j` at fine node `k`.
    #[inline]
    pub fn state(&self, j: usize, k: usize) -> &[f64] {
        let start = (j * self.grid.n_nodes() + k) * self.dim;
        &self.states[start..start + self.dim]
    }

    /// Brownian increment of path `j` over fine step `k`.
    #[inline]
    pub fn dw(&self, j: usize, k: usize) -> &[f64] {
        let start = (j * self.grid.n_steps() + k) * self.dim;
        &self.dw[start..start + self.dim]
    }

    /// State at monitoring date `n`.
    #[inline]
    pub fn state_at_date(&self, j: usize, n: usize) -> &[f64] {
        self.state(j, self.grid.date_node(n))
    }

    /// Assemble a batch from raw arrays (tests and format loading).
    pub fn from_parts(
        grid: TimeGrid,
        dim: usize,
        n_paths: usize,
        seed: u64,
        states: Vec<f64>,
        dw: Vec<f64>,
    ) -> Result<Self> {
        if states.len() != n_paths * grid.n_nodes() * dim {
            return Err(Error::invalid("state array has wrong length"));
        }
        if dw.len() != n_paths * grid.n_steps() * dim {
            return Err(Error::invalid("increment array has wrong length"));
        }
        Ok(PathBatch {
            grid,
            dim,
            n_paths,
            seed,
            first_path: 0,
            states,
            dw,
        })
    }

    /// Raw little-endian dump with a 32-byte header ("DMPB", version,
    /// J, N, N0, D), states first, increments second.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_paths as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n_dates() as u32).to_le_bytes())?;
        w.write_all(&(self.grid.n_substeps() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.grid.horizon().to_le_bytes())?;
        for v in self.states.iter().chain(self.dw.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 32];
        r.read_exact(&mut header)?;
        if &header[0..4] != MAGIC {
            return Err(Error::Format("bad magic, expected DMPB".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", word(4))));
        }
        let (j, n, n0, d) = (word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize);
        let horizon = f64::from_le_bytes(header[24..32].try_into().unwrap());
        let grid = TimeGrid::new(horizon, n, n0)?;
        let read_block = |r: &mut R, len: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let states = read_block(&mut r, j * grid.n_nodes() * d)?;
        let dw = read_block(&mut r, j * grid.n_steps() * d)?;
        PathBatch::from_parts(grid, d, j, 0, states, dw)
    }
}

#[derive(Clone, Copy)]
enum Scheme {
    Euler,
    ExactGbm,
}

/// Euler simulation of `n_paths` paths.
pub fn simulate_paths(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    simulate_with(model, grid, n_paths, seed, 0, Scheme::Euler)
}

/// Bias-free per-step log-normal simulation; shares the increment stream
/// with [`simulate_paths`] for the same seed. GBM models only.
pub fn simulate_paths_exact_gbm(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    if !model.is_gbm() {
        return Err(Error::UnsupportedModel(
            "exact simulation requires a GBM model".into(),
        ));
    }
    simulate_with(model, grid, n_paths, seed, 0, Scheme::ExactGbm)
}

/// Euler simulation of paths `first_path .. first_path + n_paths` of the
/// batch identified by `seed`. Chunked evaluation over disjoint ranges
/// reproduces a monolithic batch exactly.
pub fn simulate_range(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    first_path: u64,
) -> Result<PathBatch> {
    simulate_with(model, grid, n_paths, seed, first_path, Scheme::Euler)
}

fn simulate_with(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    first_path: u64,
    scheme: Scheme,
) -> Result<PathBatch> {
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let dim = model.dim;
    let n_steps = grid.n_steps();
    let n_nodes = grid.n_nodes();
    let mut states = vec![0.0; n_paths * n_nodes * dim];
    let mut dw = vec![0.0; n_paths * n_steps * dim];

    states
        .par_chunks_mut(n_nodes * dim)
        .zip(dw.par_chunks_mut(n_steps * dim))
        .enumerate()
        .for_each(|(j, (path_states, path_dw))| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(first_path + j as u64);
            let sqrt_dt = grid.dt().sqrt();
            for z in path_dw.iter_mut() {
                let draw: f64 = StandardNormal.sample(&mut rng);
                *z = draw * sqrt_dt;
            }
            path_states[..dim].copy_from_slice(&model.x0);
            let mut drift = vec![0.0; dim];
            let mut diff = vec![0.0; dim];
            for k in 0..n_steps {
                let t = grid.node_time(k);
                let dt = grid.dt();
                let (done, rest) = path_states.split_at_mut((k + 1) * dim);
                let x = &done[k * dim..];
                let next = &mut rest[..dim];
                let step_dw = &path_dw[k * dim..(k + 1) * dim];
                match scheme {
                    Scheme::Euler => {
                        model.drift(t, x, &mut drift);
                        model.diffusion_dw(t, x, step_dw, &mut diff);
                        for d in 0..dim {
                            next[d] = x[d] + drift[d] * dt + diff[d];
                        }
                    }
                    Scheme::ExactGbm => {
                        let stepped = model.exact_gbm_step(x, dt, step_dw).expect("gbm checked");
                        next.copy_from_slice(&stepped);
                    }
                }
            }
        });

    Ok(PathBatch {
        grid: *grid,
        dim,
        n_paths,
        seed,
        first_path,
        states,
        dw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: f64, n: usize, n0: usize) -> TimeGrid {
        TimeGrid::new(t, n, n0).unwrap()
    }

    #[test]
    fn frozen_dynamics_keep_the_initial_state() {
        // sigma = 0 and r = delta: zero drift, zero volatility.
        let m = ModelSpec::gbm_symmetric(2, 100.0, 0.1, 0.1, 0.0).unwrap();
        let b = simulate_paths(&m, &grid(1.0, 2, 3), 7, 11).unwrap();
        for j in 0..7 {
            for k in 0..b.grid.n_nodes() {
                assert_eq!(b.state(j, k), &[100.0, 100.0]);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bit_for_bit() {
        let m = ModelSpec::gbm_symmetric(2, 100.0, 0.05, 0.10, 0.2).unwrap();
        let g = grid(1.0, 2, 5);
        let a = simulate_paths(&m, &g, 13, 42).unwrap();
        let b = simulate_paths(&m, &g, 13, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn range_simulation_matches_monolithic_batch() {
        let m = ModelSpec::gbm_symmetric(2, 100.0, 0.05, 0.10, 0.2).unwrap();
        let g = grid(1.0, 2, 4);
        let full = simulate_paths(&m, &g, 10, 7).unwrap();
        let tail = simulate_range(&m, &g, 4, 7, 6).unwrap();
        for j in 0..4 {
            assert_eq!(full.state(j + 6, g.n_steps()), tail.state(j, g.n_steps()));
            assert_eq!(full.dw(j + 6, 0), tail.dw(j, 0));
        }
    }

    #[test]
    fn gbm_terminal_mean_matches_closed_form() {
        // E[X_T] = s0 e^{(r-delta)T} ~ 86.0708 for these parameters.
        let m = ModelSpec::gbm_symmetric(1, 100.0, 0.05, 0.10, 0.2).unwrap();
        let g = grid(3.0, 3, 100); // 300 Euler steps
        let n = 100_000;
        let b = simulate_paths(&m, &g, n, 2024).unwrap();
        let last = g.n_steps();
        let mean = (0..n).map(|j| b.state(j, last)[0]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|j| (b.state(j, last)[0] - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        let target = 100.0 * (-0.05f64 * 3.0).exp();
        assert!((target - 86.0708).abs() < 1e-4);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - target).abs() < 3.0 * se,
            "mean {mean} vs {target}, se {se}"
        );
    }

    #[test]
    fn exact_gbm_is_deterministic_exponential_when_flat() {
        let m = ModelSpec::gbm_symmetric(1, 100.0, 0.05, 0.02, 0.0).unwrap();
        let g = grid(2.0, 4, 5);
        let b = simulate_paths_exact_gbm(&m, &g, 3, 5).unwrap();
        for k in 0..=g.n_steps() {
            let t = g.node_time(k);
            let expect = 100.0 * (0.03 * t).exp();
            assert!((b.state(0, k)[0] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_gbm_shares_increments_with_euler() {
        let m = ModelSpec::gbm_symmetric(1, 100.0, 0.05, 0.10, 0.2).unwrap();
        let g = grid(1.0, 1, 8);
        let a = simulate_paths(&m, &g, 5, 99).unwrap();
        let b = simulate_paths_exact_gbm(&m, &g, 5, 99).unwrap();
        for j in 0..5 {
            for k in 0..g.n_steps() {
                assert_eq!(a.dw(j, k), b.dw(j, k));
            }
        }
    }

    #[test]
    fn exact_gbm_rejects_affine_models() {
        let m = ModelSpec::brownian_1d(0.0);
        assert!(simulate_paths_exact_gbm(&m, &grid(1.0, 1, 1), 1, 0).is_err());
    }

    #[test]
    fn increment_coordinate_means_are_centered() {
        let m = ModelSpec::gbm_symmetric(1, 100.0, 0.05, 0.10, 0.2).unwrap();
        let g = grid(1.0, 2, 5);
        let n = 10_000;
        let b = simulate_paths(&m, &g, n, 31).unwrap();
        for k in [0, 3, 9] {
            let mean = (0..n).map(|j| b.dw(j, k)[0]).sum::<f64>() / n as f64;
            let bound = 5.0 * (g.dt() / n as f64).sqrt();
            assert!(mean.abs() < bound, "step {k}: {mean} vs {bound}");
        }
    }

    #[test]
    fn gbm_as_affine_simulates_identical_paths() {
        let m = ModelSpec::gbm(vec![90.0, 110.0], 0.05, vec![0.1, 0.0], vec![0.2, 0.3]).unwrap();
        let aff = m.to_generic_affine();
        let g = grid(1.0, 2, 10);
        let a = simulate_paths(&m, &g, 20, 77).unwrap();
        let b = simulate_paths(&aff, &g, 20, 77).unwrap();
        for j in 0..20 {
            for k in 0..=g.n_steps() {
                for d in 0..2 {
                    let (x, y) = (a.state(j, k)[d], b.state(j, k)[d]);
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn raw_dump_round_trips() {
        let m = ModelSpec::gbm_symmetric(2, 100.0, 0.05, 0.10, 0.2).unwrap();
        let g = grid(1.0, 2, 3);
        let b = simulate_paths(&m, &g, 4, 3).unwrap();
        let mut buf = Vec::new();
        b.write_raw(&mut buf).unwrap();
        let back = PathBatch::read_raw(buf.as_slice()).unwrap();
        assert_eq!(b.state(2, 5), back.state(2, 5));
        assert_eq!(b.dw(3, 1), back.dw(3, 1));
    }
}
