//! Synchronous parameter-server rounds over simulated links.
//!
//! Each round: the server broadcasts a compressed model delta, every worker
//! computes its update at the shared model estimate, picks a compressor for
//! its uplink budget and uploads a compressed update delta, and the server
//! steps the model. The clock advances by the slowest worker's round time.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;

use crate::allocator::{self, build_tables_for_ks, default_ratio_grid, k_for_ratio, DEFAULT_DISCRETIZATION};
use crate::bandwidth::{ingest_trace_file, BandwidthEstimator, BandwidthTrace, DEFAULT_EWMA_LAMBDA};
use crate::budget::{compression_budget, uplink_only_budget, TimeModel};
use crate::compressors::{entry_bits, k_for_budget, CompressorKind, CompressorSpec, DEFAULT_VALUE_BITS};
use crate::ef21::theory::{max_stepsize, TheoryParams};
use crate::ef21::{layerwise_gd_step, Ef21ServerState, Ef21WorkerState};
use crate::error::{Error, Result};
use crate::objectives::{LayeredLsqObjective, LsqSpec, Objective, QuadraticObjective};
use crate::rng;
use crate::tensor::{LayerPartition, LayeredVector};

/// Slack allowed when flagging a round as slower than the time budget.
pub const OVERRUN_TOLERANCE_S: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Identity compressors in both directions.
    Uncompressed,
    /// Fixed `K` entries per layer.
    Ef21,
    /// Budget split across layers in proportion to their size.
    Kimad,
    /// Budget split across layers by the knapsack allocator.
    KimadPlus,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Uncompressed, Mode::Ef21, Mode::Kimad, Mode::KimadPlus];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Uncompressed => "gd",
            Mode::Ef21 => "ef21",
            Mode::Kimad => "kimad",
            Mode::KimadPlus => "kimad+",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gd" | "uncompressed" => Ok(Mode::Uncompressed),
            "ef21" => Ok(Mode::Ef21),
            "kimad" => Ok(Mode::Kimad),
            "kimad+" | "kimadplus" | "kimad-plus" => Ok(Mode::KimadPlus),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (expected gd, ef21, kimad or kimad+)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    /// Diagonal quadratic with coefficients log-uniform in `[a_min, a_max]`.
    Quadratic {
        layer_sizes: Vec<usize>,
        a_min: f64,
        a_max: f64,
    },
    Lsq(LsqSpec),
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec::Quadratic {
            layer_sizes: vec![30],
            a_min: 1.0,
            a_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Constant(f64),
    /// Largest step admitted by the convergence theory for the mode's
    /// worst-case contraction (`K/d_i` for EF21, `1/d_i` for Kimad).
    Theory,
    /// As `Theory`, recomputed every round from the smallest `k_i/d_i`
    /// any worker selected.
    TheoryAdaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkSpec {
    Trace(BandwidthTrace),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownlinkMode {
    /// Broadcast is free and exact: `x_hat = x` and no downlink time.
    Ideal,
    /// Broadcast is compressed with the downlink share of the budget.
    Compressed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    Ewma,
    /// Budgets use the true rate at transfer start.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    /// Time average of the link's trace over `avg_window_s`.
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TComp {
    /// `model_bits / average bandwidth`.
    Auto,
    Seconds(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UHatInit {
    Zero,
    /// Each worker's update at `x0`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub mode: Mode,
    pub workers: usize,
    /// Worker weights; empty means uniform. Normalized to sum to 1.
    pub weights: Vec<f64>,
    pub objective: ObjectiveSpec,
    /// `x0` is uniform in `[-x0_scale, x0_scale]`.
    pub x0_scale: f64,
    pub step_size: StepSize,
    pub t_budget_s: f64,
    pub t_comp: TComp,
    pub alpha_down: f64,
    /// Sparsifier for EF21 and Kimad (TopK or RandK).
    pub compressor: CompressorKind,
    pub fixed_k: usize,
    pub ratio_grid: Vec<f64>,
    pub discretization: usize,
    pub uplink: LinkSpec,
    pub downlink: LinkSpec,
    pub estimator: EstimatorMode,
    pub ewma_lambda: f64,
    pub prior: Prior,
    pub avg_window_s: f64,
    pub downlink_mode: DownlinkMode,
    pub rounds: usize,
    /// Stop early once the clock reaches this time.
    pub time_horizon_s: Option<f64>,
    /// Leading rounds run uncompressed.
    pub warmup_rounds: usize,
    pub u_hat_init: UHatInit,
    pub value_bits: u32,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let link = LinkSpec::Trace(BandwidthTrace::Sinusoidal {
            eta: 300e6,
            theta: 1.0,
            delta: 30e6,
            noise_std: 0.0,
            noise_dt: 1.0,
            seed: 0,
        });
        Self {
            mode: Mode::Kimad,
            workers: 1,
            weights: Vec::new(),
            objective: ObjectiveSpec::default(),
            x0_scale: 1.0,
            step_size: StepSize::Constant(0.01),
            t_budget_s: 1.0,
            t_comp: TComp::Auto,
            alpha_down: 1.0,
            compressor: CompressorKind::TopK,
            fixed_k: 1,
            ratio_grid: default_ratio_grid(),
            discretization: DEFAULT_DISCRETIZATION,
            uplink: link.clone(),
            downlink: link,
            estimator: EstimatorMode::Ewma,
            ewma_lambda: DEFAULT_EWMA_LAMBDA,
            prior: Prior::Auto,
            avg_window_s: 10.0,
            downlink_mode: DownlinkMode::Ideal,
            rounds: 100,
            time_horizon_s: None,
            warmup_rounds: 0,
            u_hat_init: UHatInit::Zero,
            value_bits: DEFAULT_VALUE_BITS,
            seed: 21,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if !self.weights.is_empty() {
            if self.weights.len() != self.workers {
                return Err(Error::config(format!(
                    "{} weights for {} workers",
                    self.weights.len(),
                    self.workers
                )));
            }
            if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
                return Err(Error::config("worker weights must be positive"));
            }
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if !(self.x0_scale >= 0.0 && self.x0_scale.is_finite()) {
            return Err(Error::config("x0_scale must be >= 0"));
        }
        match self.step_size {
            StepSize::Constant(g) if !(g > 0.0 && g.is_finite()) => {
                return Err(Error::config(format!("step size {g} must be positive")));
            }
            _ => {}
        }
        if self.compressor == CompressorKind::Identity {
            return Err(Error::config("compressor must be topk or randk"));
        }
        if self.mode == Mode::KimadPlus && self.compressor != CompressorKind::TopK {
            return Err(Error::config("kimad+ allocates Top-K budgets; set compressor = topk"));
        }
        if self.fixed_k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.ratio_grid.is_empty() || self.ratio_grid.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::config("ratio grid values must lie in (0, 1]"));
        }
        if self.discretization == 0 {
            return Err(Error::config("discretization must be >= 1"));
        }
        if !(self.ewma_lambda > 0.0 && self.ewma_lambda <= 1.0) {
            return Err(Error::config(format!("ewma lambda {} not in (0, 1]", self.ewma_lambda)));
        }
        if let Prior::Value(p) = self.prior {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::config("bandwidth prior must be positive"));
            }
        }
        if !(self.avg_window_s > 0.0 && self.avg_window_s.is_finite()) {
            return Err(Error::config("avg_window must be positive"));
        }
        if let TComp::Seconds(t) = self.t_comp {
            TimeModel::new(self.t_budget_s, t, self.alpha_down)?;
        }
        if let Some(h) = self.time_horizon_s {
            if !(h > 0.0) {
                return Err(Error::config("time horizon must be positive"));
            }
        }
        if self.value_bits == 0 || self.value_bits > 64 {
            return Err(Error::config("value_bits must be in 1..=64"));
        }
        for link in [&self.uplink, &self.downlink] {
            if let LinkSpec::Trace(t) = link {
                t.clone().validated()?;
            }
        }
        Ok(())
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            return vec![1.0 / self.workers as f64; self.workers];
        }
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }
}

/// Compressor parameters that do not change within a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionParams {
    pub kind: CompressorKind,
    pub fixed_k: usize,
    pub ratio_grid: Vec<f64>,
    pub discretization: usize,
    pub value_bits: u32,
}

impl SelectionParams {
    pub fn from_config(c: &SimConfig) -> Self {
        Self {
            kind: c.compressor,
            fixed_k: c.fixed_k,
            ratio_grid: c.ratio_grid.clone(),
            discretization: c.discretization,
            value_bits: c.value_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub specs: Vec<CompressorSpec>,
    /// Entries kept per layer.
    pub ks: Vec<usize>,
    /// The budget could not pay for one entry somewhere and `k = 1` was forced.
    pub clamped: bool,
}

fn sparse_spec(kind: CompressorKind, k: usize, dim: usize, seed: u64, layer: usize) -> CompressorSpec {
    let k = k.clamp(1, dim);
    match kind {
        CompressorKind::RandK => CompressorSpec::rand_k(k, rng::derive_seed(seed, &[layer as u64])).contractive(),
        _ => CompressorSpec::top_k(k),
    }
}

/// Proportional split: layer `i` gets `budget * d_i / d`.
fn kimad_ks(budget_bits: f64, p: &LayerPartition, value_bits: u32) -> (Vec<usize>, bool) {
    let d = p.dim() as f64;
    let mut clamped = false;
    let ks = (0..p.num_layers())
        .map(|i| {
            let di = p.layer_dim(i);
            let share = budget_bits * di as f64 / d;
            if share < entry_bits(di, value_bits) as f64 {
                clamped = true;
            }
            k_for_budget(share, di, value_bits)
        })
        .collect();
    (ks, clamped)
}

/// Spends leftover budget one entry at a time on the layer whose next entry
/// removes the most error per bit.
fn top_up(ks: &mut [usize], delta: &LayeredVector, mut remaining: f64, value_bits: u32) {
    let p = delta.partition();
    let sorted: Vec<Vec<f64>> = (0..p.num_layers())
        .map(|i| {
            let mut sq: Vec<f64> = delta.layer(i).iter().map(|x| x * x).collect();
            sq.sort_unstable_by(|a, b| b.total_cmp(a));
            sq
        })
        .collect();
    loop {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..ks.len() {
            let eb = entry_bits(p.layer_dim(i), value_bits) as f64;
            if ks[i] >= p.layer_dim(i) || eb > remaining {
                continue;
            }
            let gain = sorted[i][ks[i]] / eb;
            if gain > 0.0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else { break };
        ks[i] += 1;
        remaining -= entry_bits(p.layer_dim(i), value_bits) as f64;
    }
}

/// Chooses per-layer compressors for `delta` under `budget_bits`.
///
/// `seed` keys RandK index draws.
pub fn select_compressor(
    mode: Mode,
    budget_bits: f64,
    delta: &LayeredVector,
    params: &SelectionParams,
    seed: u64,
) -> Result<Selection> {
    let p = delta.partition();
    let l = p.num_layers();
    let vb = params.value_bits;
    let (ks, clamped) = match mode {
        Mode::Uncompressed => {
            return Ok(Selection {
                specs: vec![CompressorSpec::identity(); l],
                ks: p.layer_dims(),
                clamped: false,
            })
        }
        Mode::Ef21 => ((0..l).map(|i| params.fixed_k.min(p.layer_dim(i))).collect(), false),
        Mode::Kimad => kimad_ks(budget_bits, p, vb),
        Mode::KimadPlus => {
            let min_cost: f64 = (0..l).map(|i| entry_bits(p.layer_dim(i), vb) as f64).sum();
            if !(budget_bits >= min_cost) {
                (vec![1; l], true)
            } else {
                let (kimad, _) = kimad_ks(budget_bits, p, vb);
                let ks_per_layer: Vec<Vec<usize>> = (0..l)
                    .map(|i| {
                        let d = p.layer_dim(i);
                        let mut ks: Vec<usize> = params.ratio_grid.iter().map(|&r| k_for_ratio(r, d)).collect();
                        ks.extend([1, d, kimad[i]]);
                        ks
                    })
                    .collect();
                let problem = build_tables_for_ks(delta, &ks_per_layer, budget_bits, params.discretization, vb)?;
                let alloc = allocator::allocate_dp(&problem)?;
                let mut ks: Vec<usize> = alloc
                    .choices
                    .iter()
                    .zip(&problem.layers)
                    .map(|(&j, layer)| layer[j].k)
                    .collect();
                // the proportional split is a feasible point; never do worse than it
                let kimad_point: Vec<&allocator::Candidate> = problem
                    .layers
                    .iter()
                    .zip(&kimad)
                    .map(|(layer, &k)| layer.iter().find(|c| c.k == k).expect("kimad k is a candidate"))
                    .collect();
                let kimad_cost: u64 = kimad_point.iter().map(|c| c.cost_bits).sum();
                let kimad_err: f64 = kimad_point.iter().map(|c| c.error).sum();
                let mut cost = alloc.total_cost_bits;
                if kimad_cost as f64 <= budget_bits && kimad_err < alloc.total_error {
                    ks = kimad;
                    cost = kimad_cost;
                }
                top_up(&mut ks, delta, budget_bits - cost as f64, vb);
                (ks, false)
            }
        }
    };
    let specs = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| sparse_spec(params.kind, k, p.layer_dim(i), seed, i))
        .collect();
    Ok(Selection { specs, ks, clamped })
}

/// Everything recorded about one round; row 0 describes the starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    pub sim_time_s: f64,
    pub loss: f64,
    /// `sum_i ||grad_i f(x)||^2` (unit layer weights).
    pub weighted_grad_sq: f64,
    /// Compression error per worker, `||u_hat - u||^2` after the upload.
    pub eps: Vec<f64>,
    pub uplink_budget_bits: Vec<f64>,
    pub downlink_budget_bits: f64,
    pub bits_up: Vec<u64>,
    /// Broadcast bits each worker received.
    pub bits_down: Vec<u64>,
    pub bw_true_up: Vec<f64>,
    pub bw_est_up: Vec<f64>,
    /// Entries kept per worker per layer.
    pub ks: Vec<Vec<usize>>,
    pub clamped: Vec<bool>,
    pub round_times: Vec<f64>,
    pub overrun: bool,
    pub gammas: Vec<f64>,
}

impl RoundMetrics {
    pub fn eps_mean(&self) -> f64 {
        mean(&self.eps)
    }

    pub fn round_time(&self) -> f64 {
        self.round_times.iter().copied().fold(0.0, f64::max)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn build_objective(c: &SimConfig) -> Result<Box<dyn Objective>> {
    Ok(match &c.objective {
        ObjectiveSpec::Quadratic { layer_sizes, a_min, a_max } => {
            let p = LayerPartition::from_sizes(layer_sizes)?;
            Box::new(QuadraticObjective::log_uniform(p, *a_min, *a_max, c.seed)?)
        }
        ObjectiveSpec::Lsq(spec) => Box::new(LayeredLsqObjective::generate(spec, c.workers, c.seed)?),
    })
}

fn link_traces(spec: &LinkSpec, workers: usize, seed: u64, direction: u64) -> Result<Vec<BandwidthTrace>> {
    match spec {
        LinkSpec::Trace(t) => {
            let t = t.clone().validated()?;
            Ok((0..workers)
                .map(|m| t.with_noise_seed(rng::derive_seed(seed, &[rng::TAG_LINK_NOISE, m as u64, direction])))
                .collect())
        }
        LinkSpec::File(path) => {
            let file = ingest_trace_file(path)?;
            (0..workers).map(|m| file.trace_for(m)).collect()
        }
    }
}

pub struct Simulation {
    config: SimConfig,
    objective: Box<dyn Objective>,
    weights: Vec<f64>,
    selection: SelectionParams,
    time_model: TimeModel,
    up_traces: Vec<BandwidthTrace>,
    down_traces: Vec<BandwidthTrace>,
    up_est: Vec<BandwidthEstimator>,
    down_est: Vec<BandwidthEstimator>,
    server: Ef21ServerState,
    workers: Vec<Ef21WorkerState>,
    fixed_gammas: Option<Vec<f64>>,
    clock: f64,
    round: u64,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("mode", &self.config.mode)
            .field("round", &self.round)
            .field("clock", &self.clock)
            .finish_non_exhaustive()
    }
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let objective = build_objective(&config)?;
        Self::with_objective(config, objective)
    }

    /// Uses `objective` in place of the one described by `config.objective`.
    pub fn with_objective(config: SimConfig, objective: Box<dyn Objective>) -> Result<Self> {
        config.validate()?;
        let m = config.workers;
        let part = objective.partition().clone();
        let up_traces = link_traces(&config.uplink, m, config.seed, 0)?;
        let down_traces = link_traces(&config.downlink, m, config.seed, 1)?;

        let model_bits = (part.dim() as u64 * config.value_bits as u64) as f64;
        let t_comp = match config.t_comp {
            TComp::Seconds(t) => t,
            TComp::Auto => model_bits / up_traces[0].average(config.avg_window_s),
        };
        let time_model = TimeModel::new(config.t_budget_s, t_comp, config.alpha_down)?;

        let estimator = |trace: &BandwidthTrace| -> Result<BandwidthEstimator> {
            let prior = match config.prior {
                Prior::Auto => trace.average(config.avg_window_s),
                Prior::Value(v) => v,
            };
            BandwidthEstimator::with_prior(config.ewma_lambda, prior)
        };
        let up_est = up_traces.iter().map(estimator).collect::<Result<Vec<_>>>()?;
        let down_est = down_traces.iter().map(estimator).collect::<Result<Vec<_>>>()?;

        let mut r = rng::stream(config.seed, &[rng::TAG_X0]);
        let s = config.x0_scale;
        let x0_values: Vec<f64> = (0..part.dim())
            .map(|_| if s == 0.0 { 0.0 } else { r.random_range(-s..=s) })
            .collect();
        let x0 = LayeredVector::new(x0_values, part.clone())?;
        let u_hats = match config.u_hat_init {
            UHatInit::Zero => vec![LayeredVector::zeros(&part); m],
            UHatInit::Gradient => {
                let seed = rng::derive_seed(config.seed, &[rng::TAG_BATCH, u64::MAX]);
                (0..m)
                    .map(|w| objective.worker_grad(w, &x0, seed))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let workers = u_hats
            .iter()
            .map(|u| Ef21WorkerState::new(x0.clone(), u.clone()))
            .collect::<Result<Vec<_>>>()?;
        let server = Ef21ServerState::new(x0.clone(), x0, u_hats)?;

        let mut sim = Self {
            weights: config.normalized_weights(),
            selection: SelectionParams::from_config(&config),
            objective,
            time_model,
            up_traces,
            down_traces,
            up_est,
            down_est,
            server,
            workers,
            fixed_gammas: None,
            clock: 0.0,
            round: 0,
            config,
        };
        sim.fixed_gammas = match sim.config.step_size {
            StepSize::Constant(g) => Some(vec![g; part.num_layers()]),
            StepSize::Theory => {
                let alpha: Vec<f64> = (0..part.num_layers())
                    .map(|i| {
                        let d = part.layer_dim(i);
                        match sim.config.mode {
                            Mode::Uncompressed => 1.0,
                            Mode::Ef21 => sim.config.fixed_k.min(d) as f64 / d as f64,
                            Mode::Kimad | Mode::KimadPlus => 1.0 / d as f64,
                        }
                    })
                    .collect();
                Some(sim.theory_gammas(alpha)?)
            }
            StepSize::TheoryAdaptive => None,
        };
        Ok(sim)
    }

    fn theory_gammas(&self, alpha: Vec<f64>) -> Result<Vec<f64>> {
        let sm = self.objective.smoothness();
        let l = alpha.len();
        let params = TheoryParams::new(alpha, sm.layers, sm.global)?;
        Ok(vec![max_stepsize(&params)?; l])
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }

    pub fn server(&self) -> &Ef21ServerState {
        &self.server
    }

    pub fn workers(&self) -> &[Ef21WorkerState] {
        &self.workers
    }

    pub fn time_model(&self) -> &TimeModel {
        &self.time_model
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn rounds_done(&self) -> u64 {
        self.round
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Whether every worker's estimators equal the server's copies bit for bit.
    pub fn estimators_consistent(&self) -> bool {
        self.workers.iter().zip(&self.server.u_hats).all(|(w, u)| {
            w.u_hat.values() == u.values() && w.x_hat.values() == self.server.x_hat.values()
        })
    }

    /// Metrics of the current model without running a round.
    pub fn snapshot(&self) -> Result<RoundMetrics> {
        let x = &self.server.x;
        let m = self.workers.len();
        Ok(RoundMetrics {
            round: self.round,
            sim_time_s: self.clock,
            loss: self.objective.value(x)?,
            weighted_grad_sq: self.objective.grad(x)?.sq_norm(),
            eps: vec![0.0; m],
            uplink_budget_bits: vec![0.0; m],
            downlink_budget_bits: 0.0,
            bits_up: vec![0; m],
            bits_down: vec![0; m],
            bw_true_up: self.up_traces.iter().map(|t| t.at(self.clock)).collect(),
            bw_est_up: self.up_est.iter().map(|e| e.estimate().unwrap_or(0.0)).collect(),
            ks: vec![vec![0; x.partition().num_layers()]; m],
            clamped: vec![false; m],
            round_times: vec![0.0; m],
            overrun: false,
            gammas: self.fixed_gammas.clone().unwrap_or_default(),
        })
    }

    fn randk_seed(&self, endpoint: u64, direction: u64) -> u64 {
        rng::derive_seed(self.config.seed, &[rng::TAG_RANDK, self.round, endpoint, direction])
    }

    /// Runs one synchronous round.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let m = self.workers.len();
        let t0 = self.clock;
        let mode = if self.round < self.config.warmup_rounds as u64 {
            Mode::Uncompressed
        } else {
            self.config.mode
        };
        let tm = self.time_model;

        let mut down_durs = vec![0.0; m];
        let mut bits_down = vec![0u64; m];
        let mut downlink_budget_bits = 0.0;
        match self.config.downlink_mode {
            DownlinkMode::Ideal => {
                self.server.x_hat = self.server.x.clone();
                for w in &mut self.workers {
                    w.x_hat = self.server.x.clone();
                }
            }
            DownlinkMode::Compressed => {
                // one broadcast serves every link, so size it for the slowest
                let b = match self.config.estimator {
                    EstimatorMode::Ewma => self
                        .down_est
                        .iter()
                        .map(|e| e.estimate())
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .fold(f64::INFINITY, f64::min),
                    EstimatorMode::Oracle => self.down_traces.iter().map(|t| t.at(t0)).fold(f64::INFINITY, f64::min),
                };
                downlink_budget_bits = compression_budget(b, &tm)?.downlink_bits;
                let delta = self.server.x.sub(&self.server.x_hat)?;
                let seed = self.randk_seed(m as u64, 1);
                let sel = select_compressor(mode, downlink_budget_bits, &delta, &self.selection, seed)?;
                let msg = self.server.broadcast(&sel.specs, self.selection.value_bits)?;
                for (i, w) in self.workers.iter_mut().enumerate() {
                    w.receive(&msg)?;
                    bits_down[i] = msg.bit_cost;
                    if msg.bit_cost > 0 {
                        let dur = self.down_traces[i].transfer_duration(msg.bit_cost, t0);
                        self.down_est[i].observe(msg.bit_cost as f64, dur)?;
                        down_durs[i] = dur;
                    }
                }
            }
        }

        let grad_seed = rng::derive_seed(self.config.seed, &[rng::TAG_BATCH, self.round]);
        let mut messages = Vec::with_capacity(m);
        let mut metrics = RoundMetrics {
            round: self.round + 1,
            sim_time_s: 0.0,
            loss: 0.0,
            weighted_grad_sq: 0.0,
            eps: Vec::with_capacity(m),
            uplink_budget_bits: Vec::with_capacity(m),
            downlink_budget_bits,
            bits_up: Vec::with_capacity(m),
            bits_down,
            bw_true_up: Vec::with_capacity(m),
            bw_est_up: Vec::with_capacity(m),
            ks: Vec::with_capacity(m),
            clamped: Vec::with_capacity(m),
            round_times: Vec::with_capacity(m),
            overrun: false,
            gammas: Vec::new(),
        };
        for i in 0..m {
            let u = self.objective.worker_grad(i, &self.workers[i].x_hat, grad_seed)?;
            let start = t0 + down_durs[i] + tm.t_comp_s;
            let true_rate = self.up_traces[i].at(start);
            let b_est = match self.config.estimator {
                EstimatorMode::Ewma => self.up_est[i].estimate()?,
                EstimatorMode::Oracle => true_rate,
            };
            let budget = match self.config.downlink_mode {
                DownlinkMode::Ideal => uplink_only_budget(b_est, &tm)?,
                DownlinkMode::Compressed => compression_budget(b_est, &tm)?.uplink_bits,
            };
            let delta = u.sub(&self.workers[i].u_hat)?;
            let seed = self.randk_seed(i as u64, 0);
            let sel = select_compressor(mode, budget, &delta, &self.selection, seed)?;
            let msg = self.workers[i].upload(&u, &sel.specs, self.selection.value_bits)?;
            let mut up_dur = 0.0;
            if msg.bit_cost > 0 {
                up_dur = self.up_traces[i].transfer_duration(msg.bit_cost, start);
                self.up_est[i].observe(msg.bit_cost as f64, up_dur)?;
            }
            metrics.eps.push(self.workers[i].u_hat.sub(&u)?.sq_norm());
            metrics.uplink_budget_bits.push(budget);
            metrics.bits_up.push(msg.bit_cost);
            metrics.bw_true_up.push(true_rate);
            metrics.bw_est_up.push(b_est);
            metrics.ks.push(msg.entries());
            metrics.clamped.push(sel.clamped);
            metrics.round_times.push(down_durs[i] + tm.t_comp_s + up_dur);
            messages.push(msg);
        }

        self.server.absorb(&messages)?;
        let gammas = match &self.fixed_gammas {
            Some(g) => g.clone(),
            None => {
                let part = self.server.x.partition();
                let alpha = (0..part.num_layers())
                    .map(|l| {
                        let d = part.layer_dim(l) as f64;
                        metrics.ks.iter().map(|ks| ks[l] as f64 / d).fold(1.0, f64::min)
                    })
                    .collect();
                self.theory_gammas(alpha)?
            }
        };
        let agg = self.server.aggregate(&self.weights)?;
        self.server.x = layerwise_gd_step(&self.server.x, &agg, &gammas)?;

        let round_time = metrics.round_time();
        self.clock += round_time;
        self.round += 1;

        let x = &self.server.x;
        metrics.sim_time_s = self.clock;
        metrics.loss = self.objective.value(x)?;
        metrics.weighted_grad_sq = self.objective.grad(x)?.sq_norm();
        metrics.overrun = round_time > tm.t_budget_s + OVERRUN_TOLERANCE_S;
        metrics.gammas = gammas;
        if !metrics.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {} after round {}", metrics.loss, self.round)));
        }
        log::debug!(
            "round {} t={:.6} loss={:.6e} bits_up={:?}",
            metrics.round,
            metrics.sim_time_s,
            metrics.loss,
            metrics.bits_up
        );
        Ok(metrics)
    }

    /// Whether the configured round count or time horizon has been reached.
    pub fn finished(&self) -> bool {
        self.round >= self.config.rounds as u64
            || self.config.time_horizon_s.is_some_and(|h| self.clock >= h)
    }

    /// The initial snapshot followed by one entry per round.
    pub fn run(mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = vec![self.snapshot()?];
        while !self.finished() {
            out.push(self.step()?);
        }
        Ok(out)
    }
}

pub fn run(config: SimConfig) -> Result<Vec<RoundMetrics>> {
    Simulation::new(config)?.run()
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub k: usize,
    pub metrics: Vec<RoundMetrics>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    /// Index into `runs` of the lowest final loss.
    pub best: usize,
}

/// Runs EF21 with each fixed `k` (otherwise identical configs).
pub fn sweep(config: &SimConfig, ks: &[usize]) -> Result<SweepResult> {
    if ks.is_empty() {
        return Err(Error::usage("sweep needs at least one k"));
    }
    let runs = ks
        .iter()
        .map(|&k| {
            let c = SimConfig {
                mode: Mode::Ef21,
                fixed_k: k,
                ..config.clone()
            };
            Ok(SweepRun { k, metrics: run(c)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let final_loss = |r: &SweepRun| r.metrics.last().map_or(f64::INFINITY, |m| m.loss);
    let best = (0..runs.len())
        .min_by(|&a, &b| final_loss(&runs[a]).total_cmp(&final_loss(&runs[b])))
        .expect("non-empty");
    Ok(SweepResult { runs, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::layer_error;

    fn lv(values: Vec<f64>, sizes: &[usize]) -> LayeredVector {
        LayeredVector::new(values, LayerPartition::from_sizes(sizes).unwrap()).unwrap()
    }

    fn params() -> SelectionParams {
        SelectionParams::from_config(&SimConfig::default())
    }

    fn selection_error(delta: &LayeredVector, sel: &Selection) -> f64 {
        sel.specs
            .iter()
            .enumerate()
            .map(|(i, s)| layer_error(delta.layer(i), s).unwrap())
            .sum()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("uncompressed".parse::<Mode>().unwrap(), Mode::Uncompressed);
        assert!("topk".parse::<Mode>().is_err());
    }

    #[test]
    fn kimad_proportional_split() {
        let delta = lv((0..40).map(|j| j as f64).collect(), &[10, 30]);
        // 4 entries of the larger layer: shares of 37 and 111 bits
        let budget = 4.0 * entry_bits(30, 32) as f64;
        let sel = select_compressor(Mode::Kimad, budget, &delta, &params(), 0).unwrap();
        assert_eq!(sel.ks, vec![1, 3]);
        assert!(!sel.clamped);
        let sel = select_compressor(Mode::Kimad, 0.0, &delta, &params(), 0).unwrap();
        assert_eq!((sel.ks, sel.clamped), (vec![1, 1], true));
    }

    #[test]
    fn fixed_and_identity_modes() {
        let delta = lv(vec![1.0; 8], &[3, 5]);
        let p = SelectionParams { fixed_k: 4, ..params() };
        let sel = select_compressor(Mode::Ef21, 0.0, &delta, &p, 0).unwrap();
        assert_eq!(sel.ks, vec![3, 4]);
        let sel = select_compressor(Mode::Uncompressed, 0.0, &delta, &p, 0).unwrap();
        assert!(sel.specs.iter().all(|s| s.kind == CompressorKind::Identity));
    }

    #[test]
    fn kimad_plus_lossless_when_affordable() {
        let delta = lv((0..40).map(|j| (j as f64 * 0.37).sin() + 2.0).collect(), &[10, 30]);
        let full = (10 * entry_bits(10, 32) + 30 * entry_bits(30, 32)) as f64;
        let sel = select_compressor(Mode::KimadPlus, full, &delta, &params(), 0).unwrap();
        assert_eq!(sel.ks, vec![10, 30]);
        assert_eq!(selection_error(&delta, &sel), 0.0);
    }

    #[test]
    fn kimad_plus_prefers_the_heavy_layer() {
        let mut v = vec![0.01; 40];
        v[..10].iter_mut().enumerate().for_each(|(j, x)| *x = 10.0 + j as f64);
        let delta = lv(v, &[10, 30]);
        let budget = 10.0 * entry_bits(30, 32) as f64;
        let plus = select_compressor(Mode::KimadPlus, budget, &delta, &params(), 0).unwrap();
        let kimad = select_compressor(Mode::Kimad, budget, &delta, &params(), 0).unwrap();
        assert!(plus.ks[0] > kimad.ks[0], "{:?} vs {:?}", plus.ks, kimad.ks);
        assert!(selection_error(&delta, &plus) < selection_error(&delta, &kimad));
    }

    #[test]
    fn sims_are_deterministic() {
        let c = SimConfig {
            rounds: 20,
            workers: 2,
            downlink_mode: DownlinkMode::Compressed,
            t_comp: TComp::Seconds(0.5),
            ..SimConfig::default()
        };
        assert_eq!(run(c.clone()).unwrap(), run(c).unwrap());
    }

    #[test]
    fn gd_mode_decreases_loss() {
        let c = SimConfig {
            mode: Mode::Uncompressed,
            rounds: 50,
            step_size: StepSize::Constant(0.015),
            ..SimConfig::default()
        };
        let m = run(c).unwrap();
        assert_eq!(m.len(), 51);
        assert!(m.windows(2).all(|w| w[1].loss < w[0].loss));
    }

    #[test]
    fn clock_advances_by_slowest_worker() {
        let c = SimConfig {
            workers: 3,
            rounds: 10,
            downlink_mode: DownlinkMode::Compressed,
            t_comp: TComp::Seconds(0.2),
            ..SimConfig::default()
        };
        let m = run(c).unwrap();
        for w in m.windows(2) {
            assert_eq!(w[1].sim_time_s, w[0].sim_time_s + w[1].round_time());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SimConfig { workers: 0, ..SimConfig::default() },
            SimConfig { rounds: 0, ..SimConfig::default() },
            SimConfig { t_comp: TComp::Seconds(2.0), ..SimConfig::default() },
            SimConfig { mode: Mode::KimadPlus, compressor: CompressorKind::RandK, ..SimConfig::default() },
            SimConfig { weights: vec![1.0, 2.0], ..SimConfig::default() },
            SimConfig { ewma_lambda: 0.0, ..SimConfig::default() },
        ];
        for c in bad {
            assert!(matches!(Simulation::new(c), Err(Error::Config(_))));
        }
    }

    #[test]
    fn weights_are_normalized() {
        let c = SimConfig { workers: 2, weights: vec![1.0, 3.0], ..SimConfig::default() };
        assert_eq!(c.normalized_weights(), vec![0.25, 0.75]);
    }
}
