//! Primal lower bound via learned stopping decisions.
//!
//! One sigmoid network per interior monitoring date scores the state; the
//! realized rule stops at the first date whose score crosses 1/2 (date N
//! always stops, date 0 is a direct comparison against a Monte Carlo
//! continuation estimate). Stages are trained backward on the soft
//! objective `g_n F + L (1 - F)` with the already-frozen later decisions
//! supplying the realized continuation value `L`. Nothing here reads any
//! dual network and nothing in the dual reads a stopping network.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::ops::Range;
use std::time::Instant;

use crate::dual::StateMap;
use crate::error::{Error, Result};
use crate::market::{simulate_range, ModelSpec, PathBatch, PayoffSpec, TimeGrid};
use crate::nn::{
    init_xavier, read_mlp, write_mlp, AdamState, Activation, FeatureMatrix, MlpArchitecture,
    MlpGrads, MlpParams, OutputActivation, Workspace,
};
use crate::seeds::derive_seed;
use crate::stats;
use crate::train::{shards, TrainConfig};

const EVAL_CHUNK: usize = 1024;

/// Default stopping network shape: `D -> 40+D (x3, ReLU) -> sigmoid`.
pub fn default_primal_arch(dim: usize) -> MlpArchitecture {
    MlpArchitecture::new(
        dim,
        1,
        vec![40 + dim; 3],
        Activation::Relu,
        OutputActivation::Sigmoid,
    )
    .expect("static architecture is valid")
}

/// Stopping networks for dates `1..N-1` plus the direct date-0 decision.
#[derive(Debug, Clone)]
pub struct PrimalModel {
    /// `nets[i]` scores date `i + 1`.
    pub nets: Vec<MlpParams>,
    /// Outcome of the date-0 comparison `g(0, x0) >= continuation`.
    pub stop_at_zero: bool,
    pub state_map: StateMap,
    pub grid: TimeGrid,
    pub payoff: PayoffSpec,
}

/// Point estimate of the lower bound with its sampling noise.
#[derive(Debug, Clone)]
pub struct PrimalResult {
    pub lower: f64,
    pub sigma: f64,
    pub n_paths: usize,
    /// Realized stopping date index per path.
    pub per_path_stop: Option<Vec<usize>>,
    pub seed: u64,
    pub wall_secs: f64,
}

impl PrimalModel {
    /// Soft scores `F` of the date-`date` network over a path range.
    fn scores(&self, batch: &PathBatch, date: usize, paths: Range<usize>) -> Vec<f64> {
        score_net(&self.nets[date - 1], batch, date, &self.state_map, paths)
    }

    /// First stopping date `>= start` under the hard rule; date N always
    /// stops, date 0 (only when `start == 0`) uses the trained comparison.
    pub fn stopping_from(&self, batch: &PathBatch, start: usize, paths: Range<usize>) -> Vec<usize> {
        let n_dates = self.grid.n_dates();
        let mut tau: Vec<usize> = vec![n_dates; paths.len()];
        let mut undecided: Vec<bool> = vec![true; paths.len()];
        if start == 0 && self.stop_at_zero {
            return vec![0; paths.len()];
        }
        for date in start.max(1)..n_dates {
            let f = self.scores(batch, date, paths.clone());
            for j in 0..paths.len() {
                if undecided[j] && f[j] >= 0.5 {
                    tau[j] = date;
                    undecided[j] = false;
                }
            }
            if undecided.iter().all(|u| !u) {
                break;
            }
        }
        tau
    }

    /// Realized stopping index per path, starting from date 0.
    pub fn stopping_time_indices(&self, batch: &PathBatch) -> Vec<usize> {
        let parts: Vec<Vec<usize>> = shards(batch.n_paths)
            .into_par_iter()
            .map(|(first, count)| self.stopping_from(batch, 0, first..first + count))
            .collect();
        parts.concat()
    }

    /// Realized stopping dates and discounted payoffs for a batch.
    pub fn per_path_lower(&self, batch: &PathBatch) -> (Vec<usize>, Vec<f64>) {
        let tau = self.stopping_time_indices(batch);
        let values = tau
            .iter()
            .enumerate()
            .map(|(j, &m)| {
                self.payoff
                    .eval(self.grid.date_time(m), batch.state_at_date(j, m))
            })
            .collect();
        (tau, values)
    }

    /// Monte Carlo lower bound on `J1` fresh paths; shares its seed domain
    /// with the dual evaluator so both bounds can run on identical paths.
    pub fn evaluate_lower(&self, model: &ModelSpec, j1: usize, seed: u64) -> Result<PrimalResult> {
        if j1 < 2 {
            return Err(Error::invalid("need at least two evaluation paths"));
        }
        let t0 = Instant::now();
        let batch_seed = derive_seed(seed, "eval", 0, 0);
        let mut values = Vec::with_capacity(j1);
        let mut stops = Vec::with_capacity(j1);
        let mut first = 0;
        while first < j1 {
            let count = EVAL_CHUNK.min(j1 - first);
            let chunk = simulate_range(model, &self.grid, count, batch_seed, first as u64)?;
            let (tau, vals) = self.per_path_lower(&chunk);
            stops.extend(tau);
            values.extend(vals);
            first += count;
        }
        let lower = stats::mean(&values);
        let sigma = stats::sample_std(&values)?;
        Ok(PrimalResult {
            lower,
            sigma,
            n_paths: j1,
            per_path_stop: Some(stops),
            seed,
            wall_secs: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Soft scores of one network at monitoring date `date`.
fn score_net(
    net: &MlpParams,
    batch: &PathBatch,
    date: usize,
    map: &StateMap,
    paths: Range<usize>,
) -> Vec<f64> {
    let dim = batch.dim;
    let node = batch.grid.date_node(date);
    let mut ws = Workspace::new();
    let mut input = FeatureMatrix::default();
    let mut out = vec![0.0; paths.len()];
    let mut start = 0;
    while start < paths.len() {
        let tile = crate::nn::TILE_COLS.min(paths.len() - start);
        input.reset(dim, tile);
        for b in 0..tile {
            let x = batch.state(paths.start + start + b, node);
            for d in 0..dim {
                input.data[d * tile + b] = (x[d] - map.shift[d]) / map.scale[d];
            }
        }
        let scores = ws.forward_fm(net, &input);
        out[start..start + tile].copy_from_slice(&scores.row(0)[..tile]);
        start += tile;
    }
    out
}

/// Realized continuation values: stop at the first firing date `> date`
/// under the frozen downstream decisions (`downstream[i]` scores date
/// `date + 1 + i`), date N forced.
fn continuation_values(
    payoff: &PayoffSpec,
    batch: &PathBatch,
    date: usize,
    downstream: &[MlpParams],
    map: &StateMap,
    paths: Range<usize>,
) -> Vec<f64> {
    let n_dates = batch.grid.n_dates();
    let mut value = vec![0.0; paths.len()];
    let mut undecided = vec![true; paths.len()];
    for m in (date + 1)..n_dates {
        let f = score_net(&downstream[m - date - 1], batch, m, map, paths.clone());
        let t = batch.grid.date_time(m);
        for j in 0..paths.len() {
            if undecided[j] && f[j] >= 0.5 {
                value[j] = payoff.eval(t, batch.state_at_date(paths.start + j, m));
                undecided[j] = false;
            }
        }
    }
    let t_last = batch.grid.date_time(n_dates);
    for j in 0..paths.len() {
        if undecided[j] {
            value[j] = payoff.eval(t_last, batch.state_at_date(paths.start + j, n_dates));
        }
    }
    value
}

/// One backward primal stage: maximizes
/// `mean_j [ g_date F(x_j) + L_j (1 - F(x_j)) ]` over the date-`date`
/// network by Adam on the negated objective.
#[allow(clippy::too_many_arguments)]
pub fn train_primal_stage(
    date: usize,
    downstream: &[MlpParams],
    arch: &MlpArchitecture,
    map: &StateMap,
    model: &ModelSpec,
    payoff: &PayoffSpec,
    grid: &TimeGrid,
    cfg: &TrainConfig,
) -> Result<(MlpParams, f64)> {
    cfg.validate()?;
    if date == 0 || date >= grid.n_dates() {
        return Err(Error::invalid("stopping networks live on dates 1..N-1"));
    }
    if downstream.len() != grid.n_dates() - 1 - date {
        return Err(Error::invalid(format!(
            "date {date} expects {} downstream networks, got {}",
            grid.n_dates() - 1 - date,
            downstream.len()
        )));
    }
    let mut params = init_xavier(arch, cfg.init_seed("init-primal", date));
    let mut adam = AdamState::new(&params, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut last_objective = f64::NAN;
    let dim = model.dim;
    let node = grid.date_node(date);
    let t_date = grid.date_time(date);
    let inv_j = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        let batch_seed = cfg.batch_seed(date, step);
        let results: Vec<Result<(f64, MlpGrads)>> = shards(cfg.batch_size)
            .into_par_iter()
            .map(|(first, count)| {
                let batch = simulate_range(model, grid, count, batch_seed, first as u64)?;
                let cont = continuation_values(payoff, &batch, date, downstream, map, 0..count);
                let mut grads = MlpGrads::zeros_like(&params);
                let mut ws = Workspace::new();
                let mut input = FeatureMatrix::default();
                let mut upstream = FeatureMatrix::default();
                let mut objective = 0.0;
                let mut start = 0;
                while start < count {
                    let tile = crate::nn::TILE_COLS.min(count - start);
                    input.reset(dim, tile);
                    upstream.reset(1, tile);
                    for b in 0..tile {
                        let j = start + b;
                        let x = batch.state(j, node);
                        for d in 0..dim {
                            input.data[d * tile + b] = (x[d] - map.shift[d]) / map.scale[d];
                        }
                        let g = payoff.eval(t_date, x);
                        // d(-objective)/dF = -(g - L)/J
                        upstream.data[b] = -(g - cont[j]) * inv_j;
                    }
                    let scores = ws.forward_fm(&params, &input);
                    for b in 0..tile {
                        let j = start + b;
                        let g = -upstream.data[b] / inv_j + cont[j];
                        let f = scores.row(0)[b];
                        objective += g * f + cont[j] * (1.0 - f);
                    }
                    ws.backward_fm(&params, &upstream, &mut grads);
                    start += tile;
                }
                Ok((objective, grads))
            })
            .collect();

        let mut grads = MlpGrads::zeros_like(&params);
        let mut objective_sum = 0.0;
        for r in results {
            let (objective, g) = r?;
            objective_sum += objective;
            grads.accumulate(&g);
        }
        last_objective = objective_sum * inv_j;
        if !last_objective.is_finite() {
            return Err(Error::TrainingDivergence {
                stage: date,
                detail: format!("objective became {last_objective} at step {step}"),
            });
        }
        adam
            .step(&mut params, &grads, cfg.lr.at(step, cfg.steps))
            .map_err(|e| Error::TrainingDivergence {
                stage: date,
                detail: e.to_string(),
            })?;
    }
    Ok((params, last_objective))
}

/// Backward training of all stopping networks plus the date-0 comparison.
///
/// The date-0 rule stops when the immediate payoff meets or beats a Monte
/// Carlo estimate of the continuation value under the trained rule (ties
/// stop).
pub fn train_primal_all(
    model: &ModelSpec,
    payoff: &PayoffSpec,
    grid: &TimeGrid,
    arch: &MlpArchitecture,
    cfg: &TrainConfig,
) -> Result<PrimalModel> {
    let map = StateMap::for_model(model);
    let mut nets: Vec<MlpParams> = Vec::new();
    for date in (1..grid.n_dates()).rev() {
        let (params, _) =
            train_primal_stage(date, &nets, arch, &map, model, payoff, grid, cfg).map_err(
                |e| match e {
                    Error::TrainingDivergence { stage, detail } => Error::TrainingDivergence {
                        stage,
                        detail: format!("primal stage {stage}: {detail}"),
                    },
                    other => other,
                },
            )?;
        nets.insert(0, params);
    }

    // Direct 0-1 decision at the first date.
    let g0 = payoff.eval(0.0, &model.x0);
    let probe_paths = (cfg.batch_size * 8).max(4096);
    let probe_seed = derive_seed(cfg.seed, "train-primal-date0", 0, 0);
    let parts: Vec<Result<Vec<f64>>> = shards(probe_paths)
        .into_par_iter()
        .map(|(first, count)| {
            let batch = simulate_range(model, grid, count, probe_seed, first as u64)?;
            Ok(continuation_values(payoff, &batch, 0, &nets, &map, 0..count))
        })
        .collect();
    let mut continuation = Vec::with_capacity(probe_paths);
    for p in parts {
        continuation.extend(p?);
    }
    let stop_at_zero = g0 >= stats::mean(&continuation);

    Ok(PrimalModel {
        nets,
        stop_at_zero,
        state_map: map,
        grid: *grid,
        payoff: *payoff,
    })
}

#[derive(Serialize, Deserialize)]
struct PrimalManifest {
    grid: TimeGrid,
    model: ModelSpec,
    payoff: PayoffSpec,
    state_map: StateMap,
    stop_at_zero: bool,
    train_seed: u64,
    n_nets: usize,
}

pub fn write_primal_checkpoint<W: Write>(
    pm: &PrimalModel,
    model: &ModelSpec,
    train_seed: u64,
    mut w: W,
) -> Result<()> {
    let manifest = PrimalManifest {
        grid: pm.grid,
        model: model.clone(),
        payoff: pm.payoff,
        state_map: pm.state_map.clone(),
        stop_at_zero: pm.stop_at_zero,
        train_seed,
        n_nets: pm.nets.len(),
    };
    let text = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(&text)?;
    for net in &pm.nets {
        write_mlp(net, &mut w)?;
    }
    Ok(())
}

pub fn read_primal_checkpoint<R: Read>(mut r: R) -> Result<(PrimalModel, ModelSpec, u64)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut text)?;
    let manifest: PrimalManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut nets = Vec::with_capacity(manifest.n_nets);
    for _ in 0..manifest.n_nets {
        nets.push(read_mlp(&mut r)?);
    }
    Ok((
        PrimalModel {
            nets,
            stop_at_zero: manifest.stop_at_zero,
            state_map: manifest.state_map,
            grid: manifest.grid,
            payoff: manifest.payoff,
        },
        manifest.model,
        manifest.train_seed,
    ))
}
