//! Dual upper bound via learned martingale integrands.
//!
//! One network per monitoring interval maps `(t/T, x)` to an integrand
//! vector; its discrete stochastic integral against the stored Brownian
//! increments is a martingale increment by construction. The pathwise dual
//! recursion turns those increments into an upper bound for the stopping
//! value, and each stage is trained backward to minimize that bound with
//! the later stages frozen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::ops::Range;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::market::{simulate_range, ModelSpec, PathBatch, PayoffSpec, TimeGrid};
use crate::nn::{
    init_xavier, read_mlp, write_mlp, AdamState, Activation, FeatureMatrix, MlpArchitecture,
    MlpGrads, MlpParams, OutputActivation, Workspace,
};
use crate::seeds::derive_seed;
use crate::stats;
use crate::train::{shards, TrainConfig};

/// Paths per chunk when streaming large evaluation batches.
const EVAL_CHUNK: usize = 1024;

/// Affine standardization of the network state inputs,
/// `x  ->  (x - shift) / scale`. Time is always fed as `t / T`.
///
/// The composed map `x -> net((t/T, (x - shift)/scale))` is just a
/// reparameterized integrand function; every martingale property is
/// untouched. Keeping inputs near unit scale is what lets Xavier-initialized
/// networks train at the default learning rates when states live near 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMap {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StateMap {
    pub fn identity(dim: usize) -> Self {
        StateMap {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Center at the initial state, scale by its magnitude.
    pub fn for_model(model: &ModelSpec) -> Self {
        StateMap {
            shift: model.x0.clone(),
            scale: model.x0.iter().map(|x| x.abs().max(1.0)).collect(),
        }
    }
}

/// Output scale for the dual integrand networks: the diffusion row norms at
/// the initial state, so a unit network output corresponds to a one-delta
/// hedge. Falls back to 1 for degenerate rows.
pub fn integrand_scale(model: &ModelSpec) -> Vec<f64> {
    (0..model.dim)
        .map(|d| model.diffusion_row_norm(&model.x0, d).max(1.0))
        .collect()
}

/// Default integrand network shape: `(1+D) -> 40+D (x3, bounded ReLU) -> D`.
pub fn default_dual_arch(dim: usize) -> MlpArchitecture {
    MlpArchitecture::new(
        1 + dim,
        dim,
        vec![40 + dim; 3],
        Activation::BoundedRelu { bound: 100.0 },
        OutputActivation::Linear,
    )
    .expect("static architecture is valid")
}

/// Integrand networks for every monitoring interval plus the input/output
/// standardization they were trained under.
#[derive(Debug, Clone)]
pub struct DualModel {
    pub nets: Vec<MlpParams>,
    pub state_map: StateMap,
    pub out_scale: Vec<f64>,
    pub grid: TimeGrid,
    pub payoff: PayoffSpec,
}

/// Point estimate of the upper bound with its sampling noise.
#[derive(Debug, Clone)]
pub struct DualResult {
    pub upper: f64,
    pub sigma: f64,
    pub n_paths: usize,
    pub per_path: Option<Vec<f64>>,
    pub seed: u64,
    pub wall_secs: f64,
}

/// Martingale increments `xi_j = sum_k z(t^n_k / T, x_j) . dw_j` of one raw
/// network over interval `date`, fed with unstandardized states.
pub fn martingale_increment(net: &MlpParams, batch: &PathBatch, date: usize) -> Result<Vec<f64>> {
    if date >= batch.grid.n_dates() {
        return Err(Error::invalid(format!(
            "date {date} outside 0..{}",
            batch.grid.n_dates()
        )));
    }
    if net.arch.in_dim != 1 + batch.dim || net.arch.out_dim != batch.dim {
        return Err(Error::invalid(
            "integrand network shape does not match the batch dimension",
        ));
    }
    let map = StateMap::identity(batch.dim);
    let ones = vec![1.0; batch.dim];
    Ok(collect_increments(
        net,
        batch,
        date,
        &map,
        &ones,
        0..batch.n_paths,
    ))
}

/// Backward dual recursion per path: `U_N = g_N`,
/// `U_n = g_n + (U_{n+1} - xi_n - g_n)^+`. The hinge takes subgradient 0 at
/// exactly zero. `xi_all[n]` holds the per-path increments of interval `n`.
pub fn dual_value_recursive(
    payoff: &PayoffSpec,
    batch: &PathBatch,
    xi_all: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let n_dates = batch.grid.n_dates();
    if xi_all.len() != n_dates {
        return Err(Error::invalid(format!(
            "need increments for {n_dates} intervals, got {}",
            xi_all.len()
        )));
    }
    for (n, xi) in xi_all.iter().enumerate() {
        if xi.len() != batch.n_paths {
            return Err(Error::invalid(format!(
                "interval {n}: {} increments for {} paths",
                xi.len(),
                batch.n_paths
            )));
        }
    }
    let t_last = batch.grid.date_time(n_dates);
    let mut u: Vec<f64> = (0..batch.n_paths)
        .map(|j| payoff.eval(t_last, batch.state_at_date(j, n_dates)))
        .collect();
    for n in (0..n_dates).rev() {
        let t = batch.grid.date_time(n);
        for (j, uj) in u.iter_mut().enumerate() {
            let g = payoff.eval(t, batch.state_at_date(j, n));
            *uj = g + (*uj - xi_all[n][j] - g).max(0.0);
        }
    }
    Ok(u)
}

/// Increments of `net` over `date` for the given path range, with state
/// standardization and output scaling applied.
fn collect_increments(
    net: &MlpParams,
    batch: &PathBatch,
    date: usize,
    map: &StateMap,
    out_scale: &[f64],
    paths: Range<usize>,
) -> Vec<f64> {
    let mut ws = Workspace::new();
    let mut input = FeatureMatrix::default();
    let mut xi = vec![0.0; paths.len()];
    let n0 = batch.grid.n_substeps();
    let dim = batch.dim;
    let samples = paths.len() * n0;
    let mut start = 0;
    while start < samples {
        let tile = crate::nn::TILE_COLS.min(samples - start);
        fill_input_tile(batch, date, map, paths.start, start, tile, &mut input);
        let out = ws.forward_fm(net, &input);
        for b in 0..tile {
            let sample = start + b;
            let j_local = sample / n0;
            let k = sample % n0;
            let node = batch.grid.date_node(date) + k;
            let dw = batch.dw(paths.start + j_local, node);
            let mut acc = 0.0;
            for d in 0..dim {
                acc += out.row(d)[b] * out_scale[d] * dw[d];
            }
            xi[j_local] += acc;
        }
        start += tile;
    }
    xi
}

/// Feature-major input tile for samples `(j, k)` of one interval, sample
/// index `j_local * N0 + k` relative to `first_path`.
fn fill_input_tile(
    batch: &PathBatch,
    date: usize,
    map: &StateMap,
    first_path: usize,
    sample_start: usize,
    tile: usize,
    input: &mut FeatureMatrix,
) {
    let n0 = batch.grid.n_substeps();
    let dim = batch.dim;
    let horizon = batch.grid.horizon();
    input.reset(1 + dim, tile);
    for b in 0..tile {
        let sample = sample_start + b;
        let j_local = sample / n0;
        let k = sample % n0;
        let node = batch.grid.date_node(date) + k;
        input.data[b] = batch.grid.node_time(node) / horizon;
        let x = batch.state(first_path + j_local, node);
        for d in 0..dim {
            input.data[(1 + d) * tile + b] = (x[d] - map.shift[d]) / map.scale[d];
        }
    }
}

/// Payoff of every path in `paths` at monitoring date `n`.
fn payoffs_at_date(payoff: &PayoffSpec, batch: &PathBatch, n: usize, paths: Range<usize>) -> Vec<f64> {
    let t = batch.grid.date_time(n);
    paths
        .map(|j| payoff.eval(t, batch.state_at_date(j, n)))
        .collect()
}

/// `U_{stage+1}` per path computed from the frozen downstream networks
/// (`downstream[i]` belongs to date `stage + 1 + i`).
fn downstream_upper(
    payoff: &PayoffSpec,
    batch: &PathBatch,
    stage: usize,
    downstream: &[MlpParams],
    map: &StateMap,
    out_scale: &[f64],
    paths: Range<usize>,
) -> Vec<f64> {
    let n_dates = batch.grid.n_dates();
    let mut u = payoffs_at_date(payoff, batch, n_dates, paths.clone());
    for m in ((stage + 1)..n_dates).rev() {
        let xi = collect_increments(
            &downstream[m - stage - 1],
            batch,
            m,
            map,
            out_scale,
            paths.clone(),
        );
        let g = payoffs_at_date(payoff, batch, m, paths.clone());
        for j in 0..u.len() {
            u[j] = g[j] + (u[j] - xi[j] - g[j]).max(0.0);
        }
    }
    u
}

/// One stage of the backward dual training: minimizes
/// `mean_j [ g_n + (U_{n+1} - xi - g_n)^+ ]` over the integrand network of
/// date `stage`, gradients flowing through `xi` only. Returns the trained
/// parameters together with the final-step loss.
#[allow(clippy::too_many_arguments)]
pub fn train_dual_stage(
    stage: usize,
    downstream: &[MlpParams],
    arch: &MlpArchitecture,
    map: &StateMap,
    out_scale: &[f64],
    model: &ModelSpec,
    payoff: &PayoffSpec,
    grid: &TimeGrid,
    cfg: &TrainConfig,
) -> Result<(MlpParams, f64)> {
    cfg.validate()?;
    if downstream.len() != grid.n_dates() - 1 - stage {
        return Err(Error::invalid(format!(
            "stage {stage} expects {} downstream networks, got {}",
            grid.n_dates() - 1 - stage,
            downstream.len()
        )));
    }
    let mut params = init_xavier(arch, cfg.init_seed("init-dual", stage));
    let mut adam = AdamState::new(&params, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut last_loss = f64::NAN;
    let n0 = grid.n_substeps();
    let dim = model.dim;
    let inv_j = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        let batch_seed = cfg.batch_seed(stage, step);
        let results: Vec<Result<(f64, MlpGrads)>> = shards(cfg.batch_size)
            .into_par_iter()
            .map(|(first, count)| {
                let batch = simulate_range(model, grid, count, batch_seed, first as u64)?;
                let u_next =
                    downstream_upper(payoff, &batch, stage, downstream, map, out_scale, 0..count);
                let g_n = payoffs_at_date(payoff, &batch, stage, 0..count);
                let xi = collect_increments(&params, &batch, stage, map, out_scale, 0..count);

                let mut loss = 0.0;
                let mut coeff = vec![0.0; count];
                for j in 0..count {
                    let slack = u_next[j] - xi[j] - g_n[j];
                    loss += g_n[j] + slack.max(0.0);
                    // d loss / d xi_j, hinge subgradient 0 at the kink.
                    coeff[j] = if slack > 0.0 { -inv_j } else { 0.0 };
                }

                let mut grads = MlpGrads::zeros_like(&params);
                let mut ws = Workspace::new();
                let mut input = FeatureMatrix::default();
                let mut upstream = FeatureMatrix::default();
                let samples = count * n0;
                let mut start = 0;
                while start < samples {
                    let tile = crate::nn::TILE_COLS.min(samples - start);
                    fill_input_tile(&batch, stage, map, 0, start, tile, &mut input);
                    upstream.reset(dim, tile);
                    for b in 0..tile {
                        let sample = start + b;
                        let j = sample / n0;
                        let k = sample % n0;
                        let node = batch.grid.date_node(stage) + k;
                        let dw = batch.dw(j, node);
                        for d in 0..dim {
                            upstream.data[d * tile + b] = coeff[j] * out_scale[d] * dw[d];
                        }
                    }
                    ws.forward_fm(&params, &input);
                    ws.backward_fm(&params, &upstream, &mut grads);
                    start += tile;
                }
                Ok((loss, grads))
            })
            .collect();

        let mut grads = MlpGrads::zeros_like(&params);
        let mut loss_sum = 0.0;
        for r in results {
            let (loss, g) = r?;
            loss_sum += loss;
            grads.accumulate(&g);
        }
        last_loss = loss_sum * inv_j;
        if !last_loss.is_finite() {
            return Err(Error::TrainingDivergence {
                stage,
                detail: format!("loss became {last_loss} at step {step}"),
            });
        }
        adam
            .step(&mut params, &grads, cfg.lr.at(step, cfg.steps))
            .map_err(|e| Error::TrainingDivergence {
                stage,
                detail: e.to_string(),
            })?;
    }
    Ok((params, last_loss))
}

/// Full backward training loop: stages `N-1, .., 0`.
pub fn train_dual_all(
    model: &ModelSpec,
    payoff: &PayoffSpec,
    grid: &TimeGrid,
    arch: &MlpArchitecture,
    cfg: &TrainConfig,
) -> Result<DualModel> {
    let map = StateMap::for_model(model);
    let out_scale = integrand_scale(model);
    let mut nets: Vec<MlpParams> = Vec::with_capacity(grid.n_dates());
    for stage in (0..grid.n_dates()).rev() {
        let (params, _) = train_dual_stage(
            stage, &nets, arch, &map, &out_scale, model, payoff, grid, cfg,
        )
        .map_err(|e| match e {
            Error::TrainingDivergence { stage, detail } => Error::TrainingDivergence {
                stage,
                detail: format!("dual stage {stage}: {detail}"),
            },
            other => other,
        })?;
        nets.insert(0, params);
    }
    Ok(DualModel {
        nets,
        state_map: map,
        out_scale,
        grid: *grid,
        payoff: *payoff,
    })
}

impl DualModel {
    /// Per-interval increments for every path of a batch, sharded.
    pub fn increments_for_batch(&self, batch: &PathBatch) -> Vec<Vec<f64>> {
        (0..self.grid.n_dates())
            .map(|date| {
                let parts: Vec<Vec<f64>> = shards(batch.n_paths)
                    .into_par_iter()
                    .map(|(first, count)| {
                        collect_increments(
                            &self.nets[date],
                            batch,
                            date,
                            &self.state_map,
                            &self.out_scale,
                            first..first + count,
                        )
                    })
                    .collect();
                parts.concat()
            })
            .collect()
    }

    /// Pathwise dual values `U_0` for a batch.
    pub fn per_path_upper(&self, batch: &PathBatch) -> Result<Vec<f64>> {
        let xi = self.increments_for_batch(batch);
        dual_value_recursive(&self.payoff, batch, &xi)
    }

    /// Monte Carlo upper bound on `J1` fresh paths. The evaluation stream
    /// lives in its own seed domain, disjoint from every training stream.
    pub fn evaluate_upper(&self, model: &ModelSpec, j1: usize, seed: u64) -> Result<DualResult> {
        if j1 < 2 {
            return Err(Error::invalid("need at least two evaluation paths"));
        }
        let t0 = Instant::now();
        let batch_seed = derive_seed(seed, "eval", 0, 0);
        let mut per_path = Vec::with_capacity(j1);
        let mut first = 0;
        while first < j1 {
            let count = EVAL_CHUNK.min(j1 - first);
            let chunk = simulate_range(model, &self.grid, count, batch_seed, first as u64)?;
            per_path.extend(self.per_path_upper(&chunk)?);
            first += count;
        }
        let upper = stats::mean(&per_path);
        let sigma = stats::sample_std(&per_path)?;
        Ok(DualResult {
            upper,
            sigma,
            n_paths: j1,
            per_path: Some(per_path),
            seed,
            wall_secs: t0.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DualManifest {
    grid: TimeGrid,
    model: ModelSpec,
    payoff: PayoffSpec,
    state_map: StateMap,
    out_scale: Vec<f64>,
    train_seed: u64,
    n_nets: usize,
}

/// Checkpoint: length-prefixed JSON manifest followed by the per-date
/// network blobs in date order.
pub fn write_dual_checkpoint<W: Write>(
    dm: &DualModel,
    model: &ModelSpec,
    train_seed: u64,
    mut w: W,
) -> Result<()> {
    let manifest = DualManifest {
        grid: dm.grid,
        model: model.clone(),
        payoff: dm.payoff,
        state_map: dm.state_map.clone(),
        out_scale: dm.out_scale.clone(),
        train_seed,
        n_nets: dm.nets.len(),
    };
    let text = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(&text)?;
    for net in &dm.nets {
        write_mlp(net, &mut w)?;
    }
    Ok(())
}

pub fn read_dual_checkpoint<R: Read>(mut r: R) -> Result<(DualModel, ModelSpec, u64)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut text)?;
    let manifest: DualManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut nets = Vec::with_capacity(manifest.n_nets);
    for _ in 0..manifest.n_nets {
        nets.push(read_mlp(&mut r)?);
    }
    Ok((
        DualModel {
            nets,
            state_map: manifest.state_map,
            out_scale: manifest.out_scale,
            grid: manifest.grid,
            payoff: manifest.payoff,
        },
        manifest.model,
        manifest.train_seed,
    ))
}
