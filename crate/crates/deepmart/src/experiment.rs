//! Experiment orchestration: TOML configuration, the primal-dual driver,
//! result rows with confidence intervals, CSV/JSON reporting and the
//! convergence sweep harnesses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dual::{
    integrand_scale, train_dual_stage, write_dual_checkpoint, DualModel,
    StateMap,
};
use crate::error::{Error, Result};
use crate::market::{simulate_range, ModelSpec, PayoffSpec, TimeGrid};
use crate::nn::{Activation, LrSchedule, MlpArchitecture, OutputActivation};
use crate::primal::{
    train_primal_stage, write_primal_checkpoint, PrimalModel,
};
use crate::seeds::derive_seed;
use crate::stats;
use crate::train::{shards, TrainConfig};

const EVAL_CHUNK: usize = 1024;

/// Scalar broadcast over the state dimension, or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerDim {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerDim {
    fn expand(&self, dim: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            PerDim::Scalar(v) => Ok(vec![*v; dim]),
            PerDim::Vector(v) if v.len() == dim => Ok(v.clone()),
            PerDim::Vector(v) => Err(Error::Config(format!(
                "{name} has length {}, expected {dim}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: String,
    pub dim: usize,
    #[serde(default)]
    pub s0: Option<f64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub delta: Option<PerDim>,
    #[serde(default)]
    pub sigma: Option<PerDim>,
    #[serde(default)]
    pub a1: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub b1: Option<Vec<f64>>,
    #[serde(default)]
    pub a2: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub b2: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffConfig {
    pub kind: String,
    pub strike: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub horizon: f64,
    pub dates: usize,
    pub substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// 0 means the default width `40 + D`.
    #[serde(default)]
    pub width: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

fn default_depth() -> usize {
    3
}
fn default_activation() -> String {
    "bounded_relu".into()
}
fn default_bound() -> f64 {
    100.0
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: default_depth(),
            width: 0,
            activation: default_activation(),
            bound: default_bound(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// 0 means the default budget `1500 + 100 D`.
    #[serde(default)]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_late")]
    pub lr_late: f64,
    #[serde(default = "default_lr_switch")]
    pub lr_switch: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub fixed_dataset: bool,
    /// Train dual and primal stages in one backward pass per date instead
    /// of two separate loops. Batch streams are shared either way, so both
    /// drivers produce bit-identical models.
    #[serde(default)]
    pub interleaved: bool,
}

fn default_batch() -> usize {
    1024
}
fn default_lr_initial() -> f64 {
    1e-3
}
fn default_lr_late() -> f64 {
    1e-4
}
fn default_lr_switch() -> f64 {
    0.6
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 0,
            batch: default_batch(),
            lr_initial: default_lr_initial(),
            lr_late: default_lr_late(),
            lr_switch: default_lr_switch(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            fixed_dataset: false,
            interleaved: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub paths: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedsConfig {
    pub train: u64,
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OutputConfig {
    /// Empty string disables file output.
    #[serde(default)]
    pub dir: String,
    #[serde(default)]
    pub write_checkpoints: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    /// 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    /// Forces a single worker thread. Results are identical either way
    /// because all reductions are shard-ordered; the flag just removes any
    /// thread-level concurrency during auditing runs.
    #[serde(default)]
    pub deterministic: bool,
}

/// Known reference value or interval for the configured problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub lo: f64,
    pub hi: f64,
}

impl Reference {
    pub fn point(v: f64) -> Self {
        Reference { lo: v, hi: v }
    }
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub payoff: PayoffConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub reference: Option<Reference>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.build_model()?;
        self.build_payoff()?;
        self.build_grid()?;
        if !(self.evaluation.alpha > 0.0 && self.evaluation.alpha < 1.0) {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        if self.evaluation.paths < 2 {
            return Err(Error::Config("need at least two evaluation paths".into()));
        }
        if self.training.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        if self.effective_steps() < 1 {
            return Err(Error::Config("need at least one training step".into()));
        }
        match self.network.activation.as_str() {
            "bounded_relu" | "relu" => {}
            other => return Err(Error::Config(format!("unknown activation '{other}'"))),
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        let dim = self.model.dim;
        let x0 = match (&self.model.x0, self.model.s0) {
            (Some(x0), _) => {
                if x0.len() != dim {
                    return Err(Error::Config("x0 length must equal dim".into()));
                }
                x0.clone()
            }
            (None, Some(s0)) => vec![s0; dim],
            (None, None) => return Err(Error::Config("model needs s0 or x0".into())),
        };
        match self.model.kind.as_str() {
            "gbm" => {
                let delta = self
                    .model
                    .delta
                    .as_ref()
                    .ok_or_else(|| Error::Config("gbm model needs delta".into()))?
                    .expand(dim, "delta")?;
                let sigma = self
                    .model
                    .sigma
                    .as_ref()
                    .ok_or_else(|| Error::Config("gbm model needs sigma".into()))?
                    .expand(dim, "sigma")?;
                ModelSpec::gbm(x0, self.model.r, delta, sigma)
                    .map_err(|e| Error::Config(e.to_string()))
            }
            "affine" => {
                let take = |name: &str, v: Option<&Vec<Vec<f64>>>| {
                    v.cloned()
                        .ok_or_else(|| Error::Config(format!("affine model needs {name}")))
                };
                ModelSpec::generic_affine(
                    x0,
                    take("a1", self.model.a1.as_ref())?,
                    self.model
                        .b1
                        .clone()
                        .ok_or_else(|| Error::Config("affine model needs b1".into()))?,
                    self.model
                        .a2
                        .clone()
                        .ok_or_else(|| Error::Config("affine model needs a2".into()))?,
                    take("b2", self.model.b2.as_ref())?,
                )
                .map_err(|e| Error::Config(e.to_string()))
            }
            other => Err(Error::Config(format!("unknown model kind '{other}'"))),
        }
    }

    pub fn build_payoff(&self) -> Result<PayoffSpec> {
        match self.payoff.kind.as_str() {
            "max_call" => Ok(PayoffSpec::max_call(self.payoff.strike, self.payoff.rate)),
            "basket_put" => Ok(PayoffSpec::basket_put(self.payoff.strike, self.payoff.rate)),
            other => Err(Error::Config(format!("unknown payoff kind '{other}'"))),
        }
    }

    pub fn build_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.dates, self.grid.substeps)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn effective_steps(&self) -> usize {
        if self.training.steps == 0 {
            1500 + 100 * self.model.dim
        } else {
            self.training.steps
        }
    }

    fn effective_width(&self) -> usize {
        if self.network.width == 0 {
            40 + self.model.dim
        } else {
            self.network.width
        }
    }

    fn hidden_activation(&self) -> Activation {
        match self.network.activation.as_str() {
            "relu" => Activation::Relu,
            _ => Activation::BoundedRelu {
                bound: self.network.bound,
            },
        }
    }

    pub fn dual_arch(&self) -> MlpArchitecture {
        let dim = self.model.dim;
        MlpArchitecture::new(
            1 + dim,
            dim,
            vec![self.effective_width(); self.network.depth],
            self.hidden_activation(),
            OutputActivation::Linear,
        )
        .expect("validated architecture")
    }

    pub fn primal_arch(&self) -> MlpArchitecture {
        let dim = self.model.dim;
        MlpArchitecture::new(
            dim,
            1,
            vec![self.effective_width(); self.network.depth],
            Activation::Relu,
            OutputActivation::Sigmoid,
        )
        .expect("validated architecture")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.effective_steps(),
            batch_size: self.training.batch,
            lr: LrSchedule {
                initial: self.training.lr_initial,
                late: self.training.lr_late,
                switch_frac: self.training.lr_switch,
            },
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            epsilon: self.training.epsilon,
            seed: self.seeds.train,
            fixed_dataset: self.training.fixed_dataset,
        }
    }

    /// Stable hex digest of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dim: usize,
    pub s0: f64,
    pub horizon: f64,
    pub dates: usize,
    pub substeps: usize,
    pub lower: f64,
    pub sigma_lower: f64,
    pub upper: f64,
    pub sigma_upper: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub eval_paths: usize,
    pub ref_lo: Option<f64>,
    pub ref_hi: Option<f64>,
    pub train_secs: f64,
    pub eval_secs: f64,
    pub config_hash: String,
}

impl ResultRow {
    pub fn gap(&self) -> f64 {
        self.upper - self.lower
    }

    /// Shared-path weak duality: the upper bound may undercut the lower one
    /// only within three joint standard errors.
    pub fn weak_duality_ok(&self) -> bool {
        let joint = (self.sigma_upper.powi(2) + self.sigma_lower.powi(2)).sqrt();
        self.upper >= self.lower - 3.0 * joint / (self.eval_paths as f64).sqrt()
    }

    /// Whether the confidence interval covers the reference (when present).
    pub fn covers_reference(&self) -> Option<bool> {
        match (self.ref_lo, self.ref_hi) {
            (Some(lo), Some(hi)) => Some(self.ci_lo <= lo && hi <= self.ci_hi),
            _ => None,
        }
    }
}

/// Trained models plus the evaluated row.
pub struct ExperimentOutcome {
    pub row: ResultRow,
    pub dual: DualModel,
    pub primal: PrimalModel,
}

fn train_both(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    payoff: &PayoffSpec,
    grid: &TimeGrid,
) -> Result<(DualModel, PrimalModel)> {
    let dual_arch = cfg.dual_arch();
    let primal_arch = cfg.primal_arch();
    let tc = cfg.train_config();
    let map = StateMap::for_model(model);
    let out_scale = integrand_scale(model);
    let n = grid.n_dates();

    let mut dual_nets = Vec::with_capacity(n);
    let mut primal_nets = Vec::new();
    if cfg.training.interleaved {
        for stage in (0..n).rev() {
            let (net, _) = train_dual_stage(
                stage, &dual_nets, &dual_arch, &map, &out_scale, model, payoff, grid, &tc,
            )?;
            dual_nets.insert(0, net);
            if stage >= 1 {
                let (net, _) = train_primal_stage(
                    stage,
                    &primal_nets,
                    &primal_arch,
                    &map,
                    model,
                    payoff,
                    grid,
                    &tc,
                )?;
                primal_nets.insert(0, net);
            }
        }
    } else {
        for stage in (0..n).rev() {
            let (net, _) = train_dual_stage(
                stage, &dual_nets, &dual_arch, &map, &out_scale, model, payoff, grid, &tc,
            )?;
            dual_nets.insert(0, net);
        }
        for stage in (1..n).rev() {
            let (net, _) = train_primal_stage(
                stage,
                &primal_nets,
                &primal_arch,
                &map,
                model,
                payoff,
                grid,
                &tc,
            )?;
            primal_nets.insert(0, net);
        }
    }

    let dual = DualModel {
        nets: dual_nets,
        state_map: map.clone(),
        out_scale,
        grid: *grid,
        payoff: *payoff,
    };

    // Date-0 direct decision from a dedicated probe batch.
    let g0 = payoff.eval(0.0, &model.x0);
    let probe_paths = (tc.batch_size * 8).max(4096);
    let probe_seed = derive_seed(tc.seed, "train-primal-date0", 0, 0);
    let parts: Vec<Result<Vec<f64>>> = shards(probe_paths)
        .into_par_iter()
        .map(|(first, count)| {
            let batch = simulate_range(model, grid, count, probe_seed, first as u64)?;
            let pm_tmp = PrimalModel {
                nets: primal_nets.clone(),
                stop_at_zero: false,
                state_map: map.clone(),
                grid: *grid,
                payoff: *payoff,
            };
            let tau = pm_tmp.stopping_from(&batch, 1, 0..count);
            Ok(tau
                .iter()
                .enumerate()
                .map(|(j, &m)| payoff.eval(grid.date_time(m), batch.state_at_date(j, m)))
                .collect())
        })
        .collect();
    let mut continuation = Vec::with_capacity(probe_paths);
    for p in parts {
        continuation.extend(p?);
    }
    let primal = PrimalModel {
        nets: primal_nets,
        stop_at_zero: g0 >= stats::mean(&continuation),
        state_map: map,
        grid: *grid,
        payoff: *payoff,
    };
    Ok((dual, primal))
}

/// Evaluate both bounds on one shared set of fresh paths.
pub fn evaluate_bounds_shared(
    dual: &DualModel,
    primal: &PrimalModel,
    model: &ModelSpec,
    j1: usize,
    eval_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if j1 < 2 {
        return Err(Error::invalid("need at least two evaluation paths"));
    }
    let batch_seed = derive_seed(eval_seed, "eval", 0, 0);
    let mut uppers = Vec::with_capacity(j1);
    let mut lowers = Vec::with_capacity(j1);
    let mut first = 0;
    while first < j1 {
        let count = EVAL_CHUNK.min(j1 - first);
        let chunk = simulate_range(model, &dual.grid, count, batch_seed, first as u64)?;
        uppers.extend(dual.per_path_upper(&chunk)?);
        let (_, vals) = primal.per_path_lower(&chunk);
        lowers.extend(vals);
        first += count;
    }
    Ok((uppers, lowers))
}

/// Train, evaluate on shared fresh paths, assemble the result row and write
/// the configured outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let model = cfg.build_model()?;
    let payoff = cfg.build_payoff()?;
    let grid = cfg.build_grid()?;

    let body = || -> Result<ExperimentOutcome> {
        let t_train = Instant::now();
        let (dual, primal) = train_both(cfg, &model, &payoff, &grid)?;
        let train_secs = t_train.elapsed().as_secs_f64();

        let t_eval = Instant::now();
        let (uppers, lowers) =
            evaluate_bounds_shared(&dual, &primal, &model, cfg.evaluation.paths, cfg.seeds.eval)?;
        let eval_secs = t_eval.elapsed().as_secs_f64();

        let upper = stats::mean(&uppers);
        let sigma_upper = stats::sample_std(&uppers)?;
        let lower = stats::mean(&lowers);
        let sigma_lower = stats::sample_std(&lowers)?;
        let (ci_lo, ci_hi) = stats::confidence_interval(
            lower,
            upper,
            sigma_lower,
            sigma_upper,
            cfg.evaluation.paths,
            cfg.evaluation.alpha,
        )?;

        let row = ResultRow {
            dim: model.dim,
            s0: model.x0[0],
            horizon: grid.horizon(),
            dates: grid.n_dates(),
            substeps: grid.n_substeps(),
            lower,
            sigma_lower,
            upper,
            sigma_upper,
            ci_lo,
            ci_hi,
            eval_paths: cfg.evaluation.paths,
            ref_lo: cfg.reference.map(|r| r.lo),
            ref_hi: cfg.reference.map(|r| r.hi),
            train_secs,
            eval_secs,
            config_hash: cfg.config_hash(),
        };
        Ok(ExperimentOutcome { row, dual, primal })
    };

    let outcome = match worker_threads(cfg) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(body),
        None => body(),
    }?;

    if !cfg.output.dir.is_empty() {
        write_outputs(cfg, &model, std::slice::from_ref(&outcome.row), Some(&outcome))?;
    }
    Ok(outcome)
}

fn worker_threads(cfg: &ExperimentConfig) -> Option<usize> {
    if cfg.run.deterministic {
        Some(1)
    } else if cfg.run.threads > 0 {
        Some(cfg.run.threads)
    } else {
        None
    }
}

/// Re-run the experiment over several sub-step counts.
pub fn sweep_n0(cfg: &ExperimentConfig, values: &[usize]) -> Result<Vec<ResultRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &n0 in values {
        let mut c = cfg.clone();
        c.grid.substeps = n0;
        c.output.dir = String::new();
        rows.push(run_experiment(&c)?.row);
    }
    if !cfg.output.dir.is_empty() {
        write_outputs(cfg, &cfg.build_model()?, &rows, None)?;
    }
    Ok(rows)
}

/// Re-run the symmetric experiment across dimensions, widths tracking
/// `40 + D` and step budgets `1500 + 100 D` when left at their defaults.
pub fn sweep_dimension(cfg: &ExperimentConfig, dims: &[usize]) -> Result<Vec<ResultRow>> {
    if dims.is_empty() {
        return Err(Error::invalid("sweep needs at least one dimension"));
    }
    if cfg.model.kind != "gbm" || cfg.model.s0.is_none() {
        return Err(Error::Config(
            "dimension sweeps need a symmetric gbm model defined via s0".into(),
        ));
    }
    match (&cfg.model.delta, &cfg.model.sigma) {
        (Some(PerDim::Scalar(_)), Some(PerDim::Scalar(_))) => {}
        _ => {
            return Err(Error::Config(
                "dimension sweeps need scalar delta and sigma".into(),
            ))
        }
    }
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        let mut c = cfg.clone();
        c.model.dim = d;
        c.output.dir = String::new();
        rows.push(run_experiment(&c)?.row);
    }
    if !cfg.output.dir.is_empty() {
        write_outputs(cfg, &cfg.build_model()?, &rows, None)?;
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Metadata<'a> {
    config: &'a ExperimentConfig,
    config_hash: String,
    effective_steps: usize,
    precision: &'static str,
    crate_version: &'static str,
}

/// Write `results.csv`, `metadata.json` and optional checkpoints.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    rows: &[ResultRow],
    outcome: Option<&ExperimentOutcome>,
) -> Result<()> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)?;
    write_csv(&dir.join("results.csv"), rows)?;
    let meta = Metadata {
        config: cfg,
        config_hash: cfg.config_hash(),
        effective_steps: cfg.effective_steps(),
        precision: "f64",
        crate_version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_vec_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    if cfg.output.write_checkpoints {
        if let Some(out) = outcome {
            let ckpt = dir.join("checkpoints");
            fs::create_dir_all(&ckpt)?;
            let mut f = fs::File::create(ckpt.join("dual.ckpt"))?;
            write_dual_checkpoint(&out.dual, model, cfg.seeds.train, &mut f)?;
            let mut f = fs::File::create(ckpt.join("primal.ckpt"))?;
            write_primal_checkpoint(&out.primal, model, cfg.seeds.train, &mut f)?;
        }
    }
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(rows)
}

/// Desk-scale configuration of the symmetric max-call benchmark.
pub fn desk_maxcall_symmetric(dim: usize, s0: f64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            kind: "gbm".into(),
            dim,
            s0: Some(s0),
            x0: None,
            r: 0.05,
            delta: Some(PerDim::Scalar(0.10)),
            sigma: Some(PerDim::Scalar(0.20)),
            a1: None,
            b1: None,
            a2: None,
            b2: None,
        },
        payoff: PayoffConfig {
            kind: "max_call".into(),
            strike: 100.0,
            rate: 0.05,
        },
        grid: GridConfig {
            horizon: 3.0,
            dates: 9,
            substeps: 50,
        },
        network: NetworkConfig::default(),
        training: TrainingConfig::default(),
        evaluation: EvaluationConfig {
            paths: 200_000,
            alpha: 0.05,
        },
        seeds: SeedsConfig { train: 1, eval: 2 },
        output: OutputConfig::default(),
        run: RunConfig::default(),
        reference: None,
    }
}

/// Desk-scale configuration of the asymmetric-volatility max-call
/// (`sigma_d` ramping from 0.08 to 0.40 for D up to 5, `0.1 + d/(2D)`
/// beyond).
pub fn desk_maxcall_asymmetric(dim: usize, s0: f64) -> ExperimentConfig {
    let sigma: Vec<f64> = if dim <= 5 {
        (1..=dim)
            .map(|d| 0.08 + 0.32 * (d as f64 - 1.0) / (dim as f64 - 1.0))
            .collect()
    } else {
        (1..=dim).map(|d| 0.1 + d as f64 / (2.0 * dim as f64)).collect()
    };
    let mut cfg = desk_maxcall_symmetric(dim, s0);
    cfg.model.sigma = Some(PerDim::Vector(sigma));
    cfg
}

/// Desk-scale configuration of the basket-put benchmark.
pub fn desk_basket_put(dim: usize, s0: f64) -> ExperimentConfig {
    let mut cfg = desk_maxcall_symmetric(dim, s0);
    cfg.model.delta = Some(PerDim::Scalar(0.0));
    cfg.payoff = PayoffConfig {
        kind: "basket_put".into(),
        strike: 100.0,
        rate: 0.05,
    };
    cfg
}

/// The analytic sanity problem: driftless Brownian motion started at 10
/// with identity payoff, a single monitoring interval.
pub fn toy_linear_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            kind: "affine".into(),
            dim: 1,
            s0: None,
            x0: Some(vec![10.0]),
            r: 0.0,
            delta: None,
            sigma: None,
            a1: Some(vec![vec![0.0]]),
            b1: Some(vec![0.0]),
            a2: Some(vec![vec![vec![0.0]]]),
            b2: Some(vec![vec![1.0]]),
        },
        payoff: PayoffConfig {
            kind: "max_call".into(),
            strike: 0.0,
            rate: 0.0,
        },
        grid: GridConfig {
            horizon: 1.0,
            dates: 1,
            substeps: 50,
        },
        network: NetworkConfig::default(),
        training: TrainingConfig {
            steps: 800,
            batch: 256,
            lr_initial: 3e-3,
            lr_late: 3e-4,
            ..TrainingConfig::default()
        },
        evaluation: EvaluationConfig {
            paths: 50_000,
            alpha: 0.05,
        },
        seeds: SeedsConfig { train: 11, eval: 12 },
        output: OutputConfig::default(),
        run: RunConfig::default(),
        reference: Some(Reference::point(10.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = desk_maxcall_symmetric(2, 90.0);
        cfg.grid = GridConfig {
            horizon: 1.0,
            dates: 2,
            substeps: 3,
        };
        cfg.training.steps = 4;
        cfg.training.batch = 32;
        cfg.evaluation.paths = 400;
        cfg
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = desk_maxcall_asymmetric(3, 100.0);
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn toml_accepts_minimal_documents() {
        let text = r#"
            [model]
            kind = "gbm"
            dim = 2
            s0 = 90.0
            r = 0.05
            delta = 0.10
            sigma = 0.20

            [payoff]
            kind = "max_call"
            strike = 100.0
            rate = 0.05

            [grid]
            horizon = 3.0
            dates = 9
            substeps = 50

            [evaluation]
            paths = 1000

            [seeds]
            train = 1
            eval = 2
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.effective_steps(), 1700);
        assert_eq!(cfg.dual_arch().hidden, vec![42, 42, 42]);
        assert_eq!(cfg.primal_arch().in_dim, 2);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = desk_maxcall_symmetric(2, 90.0);
        let b = desk_maxcall_symmetric(2, 90.0);
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = desk_maxcall_symmetric(2, 90.0);
        c.seeds.eval = 99;
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = tiny_cfg();
        cfg.evaluation.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.model.kind = "heston".into();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.model.delta = Some(PerDim::Vector(vec![0.1; 3]));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let rows = vec![
            ResultRow {
                dim: 2,
                s0: 90.0,
                horizon: 3.0,
                dates: 9,
                substeps: 50,
                lower: 8.0312345678901,
                sigma_lower: 11.9,
                upper: 8.1412345678901,
                sigma_upper: 4.2,
                ci_lo: 7.99,
                ci_hi: 8.16,
                eval_paths: 1000,
                ref_lo: Some(8.075),
                ref_hi: Some(8.075),
                train_secs: 1.25,
                eval_secs: 0.5,
                config_hash: "abcd1234".into(),
            },
            ResultRow {
                dim: 1,
                s0: 10.0,
                horizon: 1.0,
                dates: 1,
                substeps: 5,
                lower: 9.99,
                sigma_lower: 1.0,
                upper: 10.01,
                sigma_upper: 0.5,
                ci_lo: 9.9,
                ci_hi: 10.1,
                eval_paths: 100,
                ref_lo: None,
                ref_hi: None,
                train_secs: 0.0,
                eval_secs: 0.0,
                config_hash: "ffff0000".into(),
            },
        ];
        write_csv(&path, &rows).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(rows, back);
    }

    #[test]
    fn tiny_experiment_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.output.dir = dir.path().join("out").to_string_lossy().into_owned();
        cfg.output.write_checkpoints = true;
        let outcome = run_experiment(&cfg).unwrap();
        let row = &outcome.row;
        assert!(row.ci_lo <= row.lower);
        assert!(row.ci_hi >= row.upper);
        assert!(row.weak_duality_ok());
        assert_eq!(row.config_hash, cfg.config_hash());
        let rows = read_csv(&dir.path().join("out/results.csv")).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(&rows[0], row);
        assert!(dir.path().join("out/metadata.json").exists());
        assert!(dir.path().join("out/checkpoints/dual.ckpt").exists());
        assert!(dir.path().join("out/checkpoints/primal.ckpt").exists());
    }

    #[test]
    fn interleaved_and_sequential_drivers_agree_exactly() {
        let mut a = tiny_cfg();
        a.training.interleaved = false;
        let mut b = tiny_cfg();
        b.training.interleaved = true;
        let ra = run_experiment(&a).unwrap();
        let rb = run_experiment(&b).unwrap();
        assert_eq!(ra.dual.nets, rb.dual.nets);
        assert_eq!(ra.primal.nets, rb.primal.nets);
        assert_eq!(ra.row.upper, rb.row.upper);
        assert_eq!(ra.row.lower, rb.row.lower);
    }

    #[test]
    fn reruns_with_identical_seeds_are_identical() {
        let cfg = tiny_cfg();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        // Wall times differ; every numerical field must not.
        assert_eq!(a.row.lower, b.row.lower);
        assert_eq!(a.row.upper, b.row.upper);
        assert_eq!(a.row.sigma_lower, b.row.sigma_lower);
        assert_eq!(a.row.sigma_upper, b.row.sigma_upper);
        assert_eq!(a.row.ci_lo, b.row.ci_lo);
        assert_eq!(a.row.ci_hi, b.row.ci_hi);
        assert_eq!(a.dual.nets, b.dual.nets);
        assert_eq!(a.primal.nets, b.primal.nets);
    }

    #[test]
    fn deterministic_flag_matches_threaded_run() {
        let mut cfg = tiny_cfg();
        let threaded = run_experiment(&cfg).unwrap();
        cfg.run.deterministic = true;
        let single = run_experiment(&cfg).unwrap();
        // Shard-ordered reductions make thread count irrelevant; config
        // differences (the flag itself) only show up in the hash.
        assert_eq!(threaded.row.upper, single.row.upper);
        assert_eq!(threaded.row.lower, single.row.lower);
    }

    #[test]
    fn sweep_n0_single_value_matches_run_experiment() {
        let mut cfg = tiny_cfg();
        cfg.grid.substeps = 4;
        let direct = run_experiment(&cfg).unwrap();
        let swept = sweep_n0(&cfg, &[4]).unwrap();
        assert_eq!(swept.len(), 1);
        assert_eq!(swept[0].upper, direct.row.upper);
        assert!(sweep_n0(&cfg, &[]).is_err());
    }

    #[test]
    fn sweep_dimension_requires_symmetric_models() {
        let cfg = desk_maxcall_asymmetric(3, 90.0);
        assert!(sweep_dimension(&cfg, &[2, 3]).is_err());
    }
}
