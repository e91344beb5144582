//! Experiment orchestration: configuration, Monte Carlo runs, MSE traces,
//! global-filter spectra, communication sweeps and CSV export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::compensation::{
    compensation_residual, fit_all, least_squares_compensation, CompensationFitReport, CompensationSet, FitParams,
};
use crate::control::{CentralizedState, ExpansionRecord, NodeState, WeightSync};
use crate::dsp::{self, amplitude_db, bandlimited_noise_stream, power_db, FirFilter, Signal};
use crate::error::{Error, Result};
use crate::network::{CoefficientBus, CommPolicy, Schedule, StalenessStats};
use crate::plant::{synthesize_factored_plant, synthesize_plant, Plant, PlantSpec};

/// Lowest level reported by any dB conversion.
pub const DB_FLOOR: f64 = -120.0;
/// DFT length of the global-filter spectra.
pub const SPECTRUM_POINTS: usize = 4096;
/// Band over which global-filter spectra are compared, Hz.
pub const SPECTRUM_BAND: (f64, f64) = (100.0, 1000.0);
/// A run diverges once `|e_k(n)|` exceeds this multiple of the disturbance RMS.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
/// Fraction of a trace, taken from its end, that defines the final MSE.
pub const FINAL_FRACTION: f64 = 0.05;
/// Reduction below the disturbance power a run needs to count as converged, dB.
pub const CONVERGED_REDUCTION_DB: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Centralized,
    Dmcanc,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(Algorithm::Centralized),
            "dmcanc" => Ok(Algorithm::Dmcanc),
            _ => Err(Error::config(format!("unknown algorithm `{s}`"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Centralized => "centralized",
            Algorithm::Dmcanc => "dmcanc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    /// Independent random paths; compensation is approximate.
    Random,
    /// Cross paths built as `s_kk * c_km`, so exact compensation exists.
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompensationMode {
    /// Offline FxLMS identification.
    Fit,
    /// Least-squares solution from the known paths.
    LeastSquares,
    /// The true factors of a factored plant.
    Exact,
}

/// Everything that defines an experiment. Defaults follow the four-node
/// setup of the reference simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_nodes: usize,
    pub fs: f64,
    /// Samples per run.
    pub duration: usize,
    /// Band of the reference noise, Hz.
    pub noise_band: (f64, f64),
    /// Pass band of the synthesized acoustic paths, Hz.
    pub path_band: (f64, f64),
    pub self_taps: usize,
    pub cross_taps: usize,
    pub primary_taps: usize,
    pub reflection_db: f64,
    /// Cross-path level relative to the self paths, dB.
    pub cross_gain_db: f64,
    pub plant: PlantKind,
    /// Local (or centralized) control filter length.
    pub psi_taps: usize,
    /// Compensation filter length.
    pub comp_taps: usize,
    pub mu_psi: f64,
    pub mu_c: f64,
    /// Excitation length of each compensation fit.
    pub comp_samples: usize,
    pub compensation: CompensationMode,
    /// Relative error of the secondary-path estimates, dB. Exact when absent.
    pub estimate_error_db: Option<f64>,
    pub algorithm: Algorithm,
    /// `ideal`, `delay:<samples>` or `intermittent:<events per second>[:periodic]`.
    pub comm: String,
    pub comm_seed: u64,
    pub n_runs: usize,
    /// Run `i` draws its reference noise from seed `seed + i`.
    pub seed: u64,
    pub plant_seed: u64,
    /// Seeds the compensation excitation and the estimate perturbation.
    pub comp_seed: u64,
    /// Explicit global filters refreshed every this many samples. Evaluated
    /// from the current coefficients on every sample when absent.
    pub weight_refresh: Option<usize>,
    /// MSE smoothing window, samples.
    pub window: usize,
    /// One MSE point every this many samples.
    pub decimation: usize,
    pub outputs: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_nodes: 4,
            fs: 16_000.0,
            duration: 1_600_000,
            noise_band: (100.0, 1000.0),
            path_band: (50.0, 5000.0),
            self_taps: 256,
            cross_taps: 320,
            primary_taps: 320,
            reflection_db: -20.0,
            cross_gain_db: -20.0,
            plant: PlantKind::Random,
            psi_taps: 512,
            comp_taps: 64,
            mu_psi: 1e-5,
            mu_c: 1e-3,
            comp_samples: 500_000,
            compensation: CompensationMode::Fit,
            estimate_error_db: None,
            algorithm: Algorithm::Dmcanc,
            comm: "ideal".into(),
            comm_seed: 0,
            n_runs: 30,
            seed: 1000,
            plant_seed: 1,
            comp_seed: 7,
            weight_refresh: None,
            window: 4000,
            decimation: 100,
            outputs: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Four nodes at 16 kHz, 512-tap local filters, 64-tap compensation.
    pub fn full() -> Self {
        Self::default()
    }

    /// Scaled-down profile for tests: three nodes at 8 kHz, 128-tap local
    /// filters, 16-tap compensation, 200k samples.
    pub fn ci() -> Self {
        Self {
            n_nodes: 3,
            fs: 8000.0,
            duration: 200_000,
            path_band: (50.0, 3000.0),
            self_taps: 64,
            cross_taps: 80,
            primary_taps: 80,
            psi_taps: 128,
            comp_taps: 16,
            mu_psi: 1e-4,
            comp_samples: 200_000,
            n_runs: 10,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn plant_spec(&self) -> PlantSpec {
        PlantSpec {
            n_nodes: self.n_nodes,
            self_taps: self.self_taps,
            cross_taps: self.cross_taps,
            primary_taps: self.primary_taps,
            band: self.path_band,
            reference_band: self.noise_band,
            fs: self.fs,
            seed: self.plant_seed,
            reflection_db: self.reflection_db,
            cross_gain_db: self.cross_gain_db,
        }
    }

    pub fn fit_params(&self) -> FitParams {
        FitParams {
            mu: self.mu_c,
            n_samples: self.comp_samples,
            taps: self.comp_taps,
            seed: self.comp_seed,
        }
    }

    /// The configured policy, seeded with `comm_seed`.
    pub fn policy(&self) -> Result<CommPolicy> {
        let p: CommPolicy = self.comm.parse()?;
        p.validate(self.fs)?;
        Ok(p.with_seed(self.comm_seed))
    }

    pub fn weight_sync(&self) -> WeightSync {
        match self.weight_refresh {
            None => WeightSync::Factored,
            Some(refresh) => WeightSync::Cached { refresh },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_nodes", self.n_nodes),
            ("duration", self.duration),
            ("psi_taps", self.psi_taps),
            ("comp_taps", self.comp_taps),
            ("comp_samples", self.comp_samples),
            ("n_runs", self.n_runs),
            ("window", self.window),
            ("decimation", self.decimation),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::config("fs must be positive"));
        }
        for (name, mu) in [("mu_psi", self.mu_psi), ("mu_c", self.mu_c)] {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.window > self.duration {
            return Err(Error::config("smoothing window longer than the run"));
        }
        if self.weight_refresh == Some(0) {
            return Err(Error::config("weight_refresh must be positive"));
        }
        self.plant_spec().validate().map_err(|e| Error::config(e.to_string()))?;
        self.policy()?;
        if self.compensation == CompensationMode::Exact && self.plant != PlantKind::Factored {
            return Err(Error::config("exact compensation needs plant = \"factored\""));
        }
        if self.plant == PlantKind::Factored && self.self_taps + self.comp_taps - 1 > self.cross_taps {
            return Err(Error::config(format!(
                "factored plant needs self_taps + comp_taps - 1 <= cross_taps ({} + {} - 1 > {})",
                self.self_taps, self.comp_taps, self.cross_taps
            )));
        }
        if self.duration < 10 * self.psi_taps {
            log::warn!(
                "duration {} is shorter than ten control-filter lengths ({})",
                self.duration,
                10 * self.psi_taps
            );
        }
        Ok(())
    }
}

/// Plant, path estimates and compensation shared by every run of a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub plant: Plant,
    /// `estimates[k][m]` estimates the path from source `m` to sensor `k`.
    pub estimates: Vec<Vec<FirFilter>>,
    /// Per-node compensation sets; empty when only the centralized
    /// controller is needed.
    pub compensation: Vec<CompensationSet>,
    pub fit_reports: BTreeMap<(usize, usize), CompensationFitReport>,
}

impl Setup {
    /// Synthesize the plant and, unless the config runs the centralized
    /// controller, obtain compensation filters.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.plant_spec();
        let (plant, factors) = match cfg.plant {
            PlantKind::Random => (synthesize_plant(&spec)?, None),
            PlantKind::Factored => {
                let (p, f) = synthesize_factored_plant(&spec, cfg.comp_taps)?;
                (p, Some(f))
            }
        };
        let mut setup = Self::with_plant(cfg, plant)?;
        if cfg.algorithm == Algorithm::Dmcanc {
            setup.compensate(cfg, factors.as_ref())?;
        }
        Ok(setup)
    }

    /// Setup around an existing plant, without compensation.
    pub fn with_plant(cfg: &ExperimentConfig, plant: Plant) -> Result<Self> {
        if plant.n_nodes() != cfg.n_nodes {
            return Err(Error::config(format!(
                "plant has {} nodes, config expects {}",
                plant.n_nodes(),
                cfg.n_nodes
            )));
        }
        if plant.fs() != cfg.fs {
            return Err(Error::config(format!("plant sampled at {} Hz, config at {} Hz", plant.fs(), cfg.fs)));
        }
        let estimates = plant.secondary_estimates(cfg.estimate_error_db, cfg.comp_seed);
        Ok(Self {
            plant,
            estimates,
            compensation: Vec::new(),
            fit_reports: BTreeMap::new(),
        })
    }

    /// Obtain compensation filters according to `cfg.compensation`.
    pub fn compensate(&mut self, cfg: &ExperimentConfig, factors: Option<&crate::plant::CrossFactors>) -> Result<()> {
        let n = self.plant.n_nodes();
        let self_est = self.self_estimates();
        self.compensation = match cfg.compensation {
            CompensationMode::Exact => {
                let f = factors.ok_or_else(|| Error::config("exact compensation needs a factored plant"))?;
                CompensationSet::from_factors(&self.plant, f)?
            }
            CompensationMode::LeastSquares => {
                let mut sets: Vec<_> = (0..n).map(|k| CompensationSet::new(k, cfg.comp_taps)).collect();
                for (k, set) in sets.iter_mut().enumerate() {
                    for m in (0..n).filter(|&m| m != k) {
                        let c = least_squares_compensation(
                            self_est[k].coeffs(),
                            self.plant.secondary(k, m).coeffs(),
                            cfg.comp_taps,
                        )?;
                        let f = FirFilter::new(c)?;
                        let res = compensation_residual(self.plant.secondary(k, k), self.plant.secondary(k, m), &f)?;
                        set.insert(m, f, res)?;
                    }
                }
                sets
            }
            CompensationMode::Fit => {
                let (sets, reports) = fit_all(&self.plant, &self_est, &cfg.fit_params())?;
                for ((k, m), r) in &reports {
                    if !r.converged {
                        log::warn!("compensation fit ({}, {}) did not settle", k + 1, m + 1);
                    }
                }
                self.fit_reports = reports;
                sets
            }
        };
        Ok(())
    }

    /// Use compensation sets obtained elsewhere.
    pub fn set_compensation(&mut self, sets: Vec<CompensationSet>) -> Result<()> {
        let n = self.plant.n_nodes();
        if sets.len() != n {
            return Err(Error::config(format!("{} compensation sets for {n} nodes", sets.len())));
        }
        self.compensation = sets;
        Ok(())
    }

    pub fn self_estimates(&self) -> Vec<FirFilter> {
        self.estimates.iter().enumerate().map(|(k, row)| row[k].clone()).collect()
    }
}

enum Controller {
    Distributed {
        nodes: Vec<NodeState>,
        bus: CoefficientBus,
    },
    Centralized(CentralizedState),
}

/// One plant and controller advancing sample by sample.
struct Engine {
    plant: Plant,
    ctrl: Controller,
    n: usize,
    y: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
}

impl Engine {
    fn new(cfg: &ExperimentConfig, setup: &Setup, algorithm: Algorithm, policy: CommPolicy) -> Result<Self> {
        let n = setup.plant.n_nodes();
        let ctrl = match algorithm {
            Algorithm::Centralized => Controller::Centralized(CentralizedState::new(cfg.psi_taps, &setup.estimates)?),
            Algorithm::Dmcanc => {
                if setup.compensation.len() != n {
                    return Err(Error::config("distributed controller needs compensation sets"));
                }
                let nodes = (0..n)
                    .map(|k| {
                        NodeState::new(
                            k,
                            cfg.psi_taps,
                            setup.estimates[k][k].clone(),
                            &setup.compensation,
                            cfg.weight_sync(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let bus = CoefficientBus::for_policy(n, cfg.psi_taps, policy, cfg.fs)?;
                Controller::Distributed { nodes, bus }
            }
        };
        let mut plant = setup.plant.clone();
        plant.reset();
        Ok(Self {
            plant,
            ctrl,
            n: 0,
            y: vec![0.0; n],
            d: vec![0.0; n],
            e: vec![0.0; n],
        })
    }

    /// Emit outputs for `x(n)` and advance the plant; fills `d` and `e`.
    fn respond(&mut self, x: f64) -> Result<()> {
        match &mut self.ctrl {
            Controller::Distributed { nodes, bus } => {
                for node in nodes.iter_mut() {
                    node.filtered_reference_step(x);
                }
                for (k, node) in nodes.iter().enumerate() {
                    bus.publish(k, node.psi(), self.n as u64)?;
                }
                for (k, node) in nodes.iter_mut().enumerate() {
                    let updates = bus.snapshot(k, self.n as u64);
                    node.receive(&updates)?;
                }
                for (y, node) in self.y.iter_mut().zip(nodes.iter_mut()) {
                    *y = node.output();
                }
            }
            Controller::Centralized(c) => c.push_reference(x, &mut self.y),
        }
        self.plant.step_into(x, &self.y, &mut self.d, &mut self.e)
    }

    fn adapt(&mut self, mu: f64) -> Result<()> {
        let sample = self.n;
        let r = match &mut self.ctrl {
            Controller::Distributed { nodes, .. } => nodes
                .iter_mut()
                .zip(&self.e)
                .try_for_each(|(node, &e)| node.local_update(e, mu)),
            Controller::Centralized(c) => c.update(&self.e, mu),
        };
        self.n += 1;
        r.map_err(|err| match err {
            Error::Divergence { what, detail, .. } => Error::Divergence { what, sample, detail },
            other => other,
        })
    }

    fn global_filters(&self) -> Result<Vec<Vec<f64>>> {
        match &self.ctrl {
            Controller::Distributed { nodes, .. } => nodes.iter().map(NodeState::global_filter).collect(),
            Controller::Centralized(c) => Ok(c.weights().to_vec()),
        }
    }

    fn local_filters(&self) -> Vec<Vec<f64>> {
        match &self.ctrl {
            Controller::Distributed { nodes, .. } => nodes.iter().map(|n| n.psi().to_vec()).collect(),
            Controller::Centralized(c) => c.weights().to_vec(),
        }
    }

    fn staleness(&self) -> Option<StalenessStats> {
        match &self.ctrl {
            Controller::Distributed { bus, .. } => Some(bus.staleness_stats()),
            Controller::Centralized(_) => None,
        }
    }
}

/// Trailing moving average of squared samples, one value per `decimation`.
///
/// Point `j` averages the (at most) `window` samples ending at
/// `(j + 1) * decimation - 1`.
#[derive(Debug, Clone)]
struct PowerSmoother {
    window: usize,
    decimation: usize,
    ring: Vec<f64>,
    pos: usize,
    filled: usize,
    out: Vec<f64>,
}

impl PowerSmoother {
    fn new(window: usize, decimation: usize, expected: usize) -> Self {
        Self {
            window,
            decimation,
            ring: vec![0.0; window],
            pos: 0,
            filled: 0,
            out: Vec::with_capacity(expected / decimation),
        }
    }

    fn push(&mut self, v: f64) {
        self.ring[self.pos] = v * v;
        self.pos = (self.pos + 1) % self.window;
        self.filled += 1;
        if self.filled.is_multiple_of(self.decimation) {
            let count = self.filled.min(self.window);
            let sum: f64 = self.ring[..count].iter().sum();
            self.out.push(sum / count as f64);
        }
    }
}

/// Smoothed error power in dB: trailing `window`-sample mean of `e^2`, one
/// point per `decimation` samples, floored at [`DB_FLOOR`].
pub fn mse_smooth(e: &Signal, window: usize, decimation: usize) -> Result<Vec<f64>> {
    if window == 0 || decimation == 0 {
        return Err(Error::arg("window and decimation must be positive"));
    }
    if window > e.len() {
        return Err(Error::arg(format!("window {window} longer than signal ({})", e.len())));
    }
    let mut s = PowerSmoother::new(window, decimation, e.len());
    e.samples.iter().for_each(|&v| s.push(v));
    Ok(s.out.into_iter().map(|p| power_db(p, DB_FLOOR)).collect())
}

/// Smoothed error power per node, in linear units, possibly averaged over
/// several runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MseTrace {
    pub window: usize,
    pub decimation: usize,
    /// Number of runs averaged into the trace.
    pub runs: usize,
    /// `power[k][j]`, node `k`, point `j`.
    pub power: Vec<Vec<f64>>,
    /// Mean disturbance power over nodes and runs.
    pub disturbance_power: f64,
}

impl MseTrace {
    pub fn len(&self) -> usize {
        self.power.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.power.len()
    }

    /// Last sample index covered by point `j`.
    pub fn sample(&self, j: usize) -> usize {
        (j + 1) * self.decimation - 1
    }

    pub fn node_db(&self, k: usize) -> Vec<f64> {
        self.power[k].iter().map(|&p| power_db(p, DB_FLOOR)).collect()
    }

    pub fn mean_power(&self) -> Vec<f64> {
        let n = self.n_nodes() as f64;
        (0..self.len())
            .map(|j| self.power.iter().map(|p| p[j]).sum::<f64>() / n)
            .collect()
    }

    pub fn mean_db(&self) -> Vec<f64> {
        self.mean_power().into_iter().map(|p| power_db(p, DB_FLOOR)).collect()
    }

    fn tail_mean(values: &[f64]) -> f64 {
        let len = values.len();
        let tail = ((len as f64 * FINAL_FRACTION).ceil() as usize).clamp(1, len.max(1));
        values[len - tail..].iter().sum::<f64>() / tail as f64
    }

    /// Final MSE of node `k`: mean power over the last [`FINAL_FRACTION`]
    /// of the trace, dB.
    pub fn final_node_db(&self, k: usize) -> f64 {
        power_db(Self::tail_mean(&self.power[k]), DB_FLOOR)
    }

    /// Final MSE averaged over nodes, dB.
    pub fn final_mean_db(&self) -> f64 {
        power_db(Self::tail_mean(&self.mean_power()), DB_FLOOR)
    }

    pub fn disturbance_db(&self) -> f64 {
        power_db(self.disturbance_power, DB_FLOOR)
    }

    /// Disturbance power minus final mean MSE, dB.
    pub fn reduction_db(&self) -> f64 {
        self.disturbance_db() - self.final_mean_db()
    }
}

/// Result of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub run: usize,
    pub seed: u64,
    pub trace: MseTrace,
    /// Sample at which the run was stopped for divergence.
    pub diverged: Option<usize>,
    /// Global filters at the end of the run (`w_k`, or `W_m` for the
    /// centralized controller).
    pub global_filters: Vec<Vec<f64>>,
    /// Adapted filters (`psi_k`, or `W_m`).
    pub local_filters: Vec<Vec<f64>>,
    pub staleness: Option<StalenessStats>,
}

impl RunOutput {
    pub fn converged(&self) -> bool {
        self.diverged.is_none() && self.trace.reduction_db() >= CONVERGED_REDUCTION_DB
    }
}

/// Reference noise of run `run`.
pub fn reference(cfg: &ExperimentConfig, run: usize) -> Result<Vec<f64>> {
    Ok(bandlimited_noise_stream(
        cfg.seed.wrapping_add(run as u64),
        0,
        cfg.duration,
        cfg.noise_band.0,
        cfg.noise_band.1,
        cfg.fs,
    )?
    .samples)
}

fn run_policy(cfg: &ExperimentConfig, run: usize) -> Result<CommPolicy> {
    Ok(cfg.policy()?.with_seed(cfg.comm_seed.wrapping_add(run as u64)))
}

/// RMS of the disturbance over the first smoothing window, averaged over nodes.
fn initial_disturbance_rms(plant: &Plant, x: &[f64], window: usize) -> f64 {
    let head = &x[..window.min(x.len())];
    let n = plant.n_nodes();
    let p: f64 = (0..n)
        .map(|k| {
            let d = plant.primary(k).clone().process(head);
            dsp::energy(&d) / head.len() as f64
        })
        .sum::<f64>()
        / n as f64;
    p.sqrt()
}

/// One run of `cfg.algorithm` with reference seed `cfg.seed + run`.
pub fn run_once(cfg: &ExperimentConfig, setup: &Setup, run: usize) -> Result<RunOutput> {
    run_algorithm(cfg, setup, run, cfg.algorithm)
}

fn run_algorithm(cfg: &ExperimentConfig, setup: &Setup, run: usize, algorithm: Algorithm) -> Result<RunOutput> {
    cfg.validate()?;
    let x = reference(cfg, run)?;
    let mut engine = Engine::new(cfg, setup, algorithm, run_policy(cfg, run)?)?;
    let n_nodes = setup.plant.n_nodes();
    let limit = DIVERGENCE_FACTOR * initial_disturbance_rms(&setup.plant, &x, cfg.window).max(f64::MIN_POSITIVE);
    let mut smoothers = vec![PowerSmoother::new(cfg.window, cfg.decimation, cfg.duration); n_nodes];
    let mut d_energy = 0.0;
    let mut diverged = None;
    for (n, &xn) in x.iter().enumerate() {
        engine.respond(xn)?;
        if engine.e.iter().any(|v| !(v.abs() <= limit)) {
            log::warn!("{algorithm} run {run} diverged at sample {n}");
            diverged = Some(n);
            break;
        }
        for ((s, &e), &d) in smoothers.iter_mut().zip(&engine.e).zip(&engine.d) {
            s.push(e);
            d_energy += d * d;
        }
        engine.adapt(cfg.mu_psi)?;
    }
    let done = diverged.unwrap_or(cfg.duration).max(1);
    Ok(RunOutput {
        run,
        seed: cfg.seed.wrapping_add(run as u64),
        trace: MseTrace {
            window: cfg.window,
            decimation: cfg.decimation,
            runs: 1,
            power: smoothers.into_iter().map(|s| s.out).collect(),
            disturbance_power: d_energy / (done * n_nodes) as f64,
        },
        diverged,
        global_filters: engine.global_filters()?,
        local_filters: engine.local_filters(),
        staleness: engine.staleness(),
    })
}

/// Raw residuals `e[k][n]` of one run of `algorithm`, without the
/// divergence guard.
pub fn error_traces(cfg: &ExperimentConfig, setup: &Setup, run: usize, algorithm: Algorithm) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let x = reference(cfg, run)?;
    let mut engine = Engine::new(cfg, setup, algorithm, run_policy(cfg, run)?)?;
    let mut out = vec![Vec::with_capacity(cfg.duration); setup.plant.n_nodes()];
    for &xn in &x {
        engine.respond(xn)?;
        for (o, &e) in out.iter_mut().zip(&engine.e) {
            o.push(e);
        }
        engine.adapt(cfg.mu_psi)?;
    }
    Ok(out)
}

/// Monte Carlo average over `cfg.n_runs` runs.
#[derive(Debug, Clone)]
pub struct AveragedRun {
    pub algorithm: Algorithm,
    /// Linear mean of the completed runs' traces.
    pub trace: MseTrace,
    /// Coefficient-wise mean of the completed runs' final global filters.
    pub global_filters: Vec<Vec<f64>>,
    pub diverged_runs: Vec<(usize, usize)>,
    /// Mean peer-copy staleness over all runs, samples.
    pub mean_staleness: Option<f64>,
}

impl AveragedRun {
    pub fn converged(&self) -> bool {
        self.diverged_runs.is_empty() && self.trace.reduction_db() >= CONVERGED_REDUCTION_DB
    }
}

pub fn run_averaged(cfg: &ExperimentConfig, setup: &Setup) -> Result<AveragedRun> {
    average_algorithm(cfg, setup, cfg.algorithm, cfg!(feature = "parallel"))
}

/// [`run_averaged`] with explicit control over parallel execution. The
/// result does not depend on `parallel`.
pub fn run_averaged_with(cfg: &ExperimentConfig, setup: &Setup, parallel: bool) -> Result<AveragedRun> {
    average_algorithm(cfg, setup, cfg.algorithm, parallel)
}

fn average_algorithm(cfg: &ExperimentConfig, setup: &Setup, algorithm: Algorithm, parallel: bool) -> Result<AveragedRun> {
    cfg.validate()?;
    let job = |run: usize| run_algorithm(cfg, setup, run, algorithm);
    let outputs: Vec<Result<RunOutput>> = if parallel {
        par_map(cfg.n_runs, job)
    } else {
        (0..cfg.n_runs).map(job).collect()
    };
    let outputs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    average_outputs(algorithm, outputs)
}

#[cfg(feature = "parallel")]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

fn average_outputs(algorithm: Algorithm, outputs: Vec<RunOutput>) -> Result<AveragedRun> {
    let diverged_runs: Vec<(usize, usize)> = outputs.iter().filter_map(|o| o.diverged.map(|s| (o.run, s))).collect();
    let done: Vec<&RunOutput> = outputs.iter().filter(|o| o.diverged.is_none()).collect();
    let Some(first) = done.first() else {
        let (run, sample) = diverged_runs.first().copied().unwrap_or((0, 0));
        return Err(Error::Divergence {
            what: format!("every {algorithm} run (first: run {run})"),
            sample,
            detail: "no run completed".into(),
        });
    };
    if !diverged_runs.is_empty() {
        log::warn!(
            "{} of {} {algorithm} runs diverged; averaging the rest",
            diverged_runs.len(),
            outputs.len()
        );
    }
    let count = done.len() as f64;
    let mut power = vec![vec![0.0; first.trace.len()]; first.trace.n_nodes()];
    let mut filters: Vec<Vec<f64>> = first.global_filters.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut disturbance = 0.0;
    for o in &done {
        for (acc, p) in power.iter_mut().zip(&o.trace.power) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        for (acc, w) in filters.iter_mut().zip(&o.global_filters) {
            acc.iter_mut().zip(w).for_each(|(a, v)| *a += v);
        }
        disturbance += o.trace.disturbance_power;
    }
    power.iter_mut().flatten().for_each(|v| *v /= count);
    filters.iter_mut().flatten().for_each(|v| *v /= count);
    let stale: Vec<f64> = done.iter().filter_map(|o| o.staleness.as_ref().map(StalenessStats::mean)).collect();
    Ok(AveragedRun {
        algorithm,
        trace: MseTrace {
            window: first.trace.window,
            decimation: first.trace.decimation,
            runs: done.len(),
            power,
            disturbance_power: disturbance / count,
        },
        global_filters: filters,
        diverged_runs,
        mean_staleness: (!stale.is_empty()).then(|| stale.iter().sum::<f64>() / stale.len() as f64),
    })
}

/// Magnitude spectra of two sets of global filters and their largest
/// in-band disagreement per node.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraReport {
    pub freqs: Vec<f64>,
    /// `a_db[k][bin]`, amplitude in dB floored at [`DB_FLOOR`].
    pub a_db: Vec<Vec<f64>>,
    pub b_db: Vec<Vec<f64>>,
    /// Max `|a_db - b_db|` over [`SPECTRUM_BAND`] per node.
    pub deviation_db: Vec<f64>,
}

impl SpectraReport {
    pub fn max_deviation_db(&self) -> f64 {
        self.deviation_db.iter().copied().fold(0.0, f64::max)
    }
}

pub fn spectra_report(a: &[Vec<f64>], b: &[Vec<f64>], fs: f64) -> Result<SpectraReport> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::arg("spectra need the same, non-zero number of filters"));
    }
    let nfft = SPECTRUM_POINTS;
    if a.iter().chain(b).any(|w| w.len() > nfft) {
        return Err(Error::arg(format!("filters longer than {nfft} taps")));
    }
    let to_db = |w: &Vec<f64>| -> Vec<f64> {
        dsp::magnitude_response(w, nfft)
            .into_iter()
            .map(|m| amplitude_db(m, DB_FLOOR))
            .collect()
    };
    let a_db: Vec<Vec<f64>> = a.iter().map(to_db).collect();
    let b_db: Vec<Vec<f64>> = b.iter().map(to_db).collect();
    let lo = dsp::bin_of(SPECTRUM_BAND.0, nfft, fs);
    let hi = dsp::bin_of(SPECTRUM_BAND.1, nfft, fs);
    let deviation_db = a_db
        .iter()
        .zip(&b_db)
        .map(|(x, y)| (lo..=hi).map(|i| (x[i] - y[i]).abs()).fold(0.0, f64::max))
        .collect();
    Ok(SpectraReport {
        freqs: (0..=nfft / 2).map(|i| i as f64 * fs / nfft as f64).collect(),
        a_db,
        b_db,
        deviation_db,
    })
}

/// Centralized baseline against the distributed controller on the same
/// plant and seeds.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub centralized: AveragedRun,
    pub dmcanc: AveragedRun,
    /// `a` is centralized, `b` distributed.
    pub spectra: SpectraReport,
}

impl Comparison {
    /// Final mean MSE of the distributed minus the centralized controller, dB.
    pub fn final_gap_db(&self) -> f64 {
        self.dmcanc.trace.final_mean_db() - self.centralized.trace.final_mean_db()
    }
}

/// `setup` must carry compensation sets.
pub fn compare(cfg: &ExperimentConfig, setup: &Setup) -> Result<Comparison> {
    let parallel = cfg!(feature = "parallel");
    let centralized = average_algorithm(cfg, setup, Algorithm::Centralized, parallel)?;
    let dmcanc = average_algorithm(cfg, setup, Algorithm::Dmcanc, parallel)?;
    let spectra = spectra_report(&centralized.global_filters, &dmcanc.global_filters, cfg.fs)?;
    Ok(Comparison {
        centralized,
        dmcanc,
        spectra,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Fixed exchange delays, samples.
    Delay(Vec<usize>),
    /// Intermittent exchange rates, events per second.
    Rate { rates: Vec<f64>, schedule: Schedule },
}

impl SweepAxis {
    fn points(&self) -> Vec<(f64, CommPolicy)> {
        match self {
            SweepAxis::Delay(ps) => ps.iter().map(|&p| (p as f64, CommPolicy::Delay(p))).collect(),
            SweepAxis::Rate { rates, schedule } => rates
                .iter()
                .map(|&rate| {
                    (
                        rate,
                        CommPolicy::Intermittent {
                            rate,
                            seed: 0,
                            schedule: *schedule,
                        },
                    )
                })
                .collect(),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            SweepAxis::Delay(p) => p.is_empty(),
            SweepAxis::Rate { rates, .. } => rates.is_empty(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: f64,
    pub comm: String,
    /// `None` when every run at this point diverged.
    pub result: Option<AveragedRun>,
}

impl SweepRow {
    pub fn final_mean_db(&self) -> f64 {
        self.result.as_ref().map_or(f64::NAN, |r| r.trace.final_mean_db())
    }

    pub fn final_node_db(&self) -> Vec<f64> {
        self.result.as_ref().map_or_else(Vec::new, |r| {
            (0..r.trace.n_nodes()).map(|k| r.trace.final_node_db(k)).collect()
        })
    }

    pub fn converged(&self) -> bool {
        self.result.as_ref().is_some_and(AveragedRun::converged)
    }
}

/// One [`run_averaged`] per axis point; divergence is recorded per point.
pub fn sweep(cfg: &ExperimentConfig, setup: &Setup, axis: &SweepAxis) -> Result<Vec<SweepRow>> {
    if axis.is_empty() {
        return Err(Error::arg("sweep axis is empty"));
    }
    let mut rows = Vec::new();
    for (param, policy) in axis.points() {
        let point = ExperimentConfig {
            comm: policy.to_string(),
            ..cfg.clone()
        };
        log::info!("sweep point {}", point.comm);
        let result = match run_averaged(&point, setup) {
            Ok(r) => Some(r),
            Err(e) if e.is_divergence() => None,
            Err(e) => return Err(e),
        };
        rows.push(SweepRow {
            param,
            comm: point.comm,
            result,
        });
    }
    Ok(rows)
}

/// Largest deviation, per node, between the measured residual and its
/// expansion in the local filters, recorded with ideal exchange.
///
/// The controller adapts for `adapt` samples, then holds every filter for
/// `window` samples while the signals are recorded.
pub fn expansion_diagnostic(cfg: &ExperimentConfig, setup: &Setup, adapt: usize, window: usize) -> Result<Vec<f64>> {
    let total = adapt + window;
    let x = bandlimited_noise_stream(cfg.seed, 0, total, cfg.noise_band.0, cfg.noise_band.1, cfg.fs)?.samples;
    let mut engine = Engine::new(cfg, setup, Algorithm::Dmcanc, CommPolicy::Ideal)?;
    let n = setup.plant.n_nodes();
    let mut d = vec![Vec::with_capacity(window); n];
    let mut e = vec![Vec::with_capacity(window); n];
    for (i, &xn) in x.iter().enumerate() {
        engine.respond(xn)?;
        if i >= adapt {
            for k in 0..n {
                d[k].push(engine.d[k]);
                e[k].push(engine.e[k]);
            }
        }
        engine.adapt(if i + 1 < adapt { cfg.mu_psi } else { 0.0 })?;
    }
    let record = ExpansionRecord {
        x,
        psi: engine.local_filters(),
        start: adapt,
        d,
        e,
    };
    (0..n)
        .map(|k| crate::control::error_expansion_check(&record, &setup.plant, &setup.compensation, k))
        .collect()
}

fn fmt_db(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// `sample, mse_node_1_db, ..., mse_node_N_db, mse_mean_db`.
pub fn write_mse_csv(path: &Path, trace: &MseTrace) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["sample".to_string()];
    header.extend((1..=trace.n_nodes()).map(|k| format!("mse_node_{k}_db")));
    header.push("mse_mean_db".into());
    w.write_record(&header)?;
    let nodes: Vec<Vec<f64>> = (0..trace.n_nodes()).map(|k| trace.node_db(k)).collect();
    let mean = trace.mean_db();
    for j in 0..trace.len() {
        let mut row = vec![trace.sample(j).to_string()];
        row.extend(nodes.iter().map(|v| fmt_db(v[j])));
        row.push(fmt_db(mean[j]));
        w.write_record(&row)?;
    }
    flush(w, path)
}

/// Both controllers side by side, prefixed `centralized_` and `dmcanc_`.
pub fn write_mse_compare_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let (a, b) = (&cmp.centralized.trace, &cmp.dmcanc.trace);
    let mut w = csv_writer(path)?;
    let mut header = vec!["sample".to_string()];
    for name in ["centralized", "dmcanc"] {
        header.extend((1..=a.n_nodes()).map(|k| format!("{name}_mse_node_{k}_db")));
        header.push(format!("{name}_mse_mean_db"));
    }
    w.write_record(&header)?;
    let cols: Vec<Vec<f64>> = [a, b]
        .iter()
        .flat_map(|t| (0..t.n_nodes()).map(|k| t.node_db(k)).chain([t.mean_db()]))
        .collect();
    for j in 0..a.len().min(b.len()) {
        let mut row = vec![a.sample(j).to_string()];
        row.extend(cols.iter().map(|c| fmt_db(c[j])));
        w.write_record(&row)?;
    }
    flush(w, path)
}

/// `freq_hz, centralized_node_1_db, dmcanc_node_1_db, ...`.
pub fn write_spectra_csv(path: &Path, report: &SpectraReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["freq_hz".to_string()];
    for k in 1..=report.a_db.len() {
        header.push(format!("centralized_node_{k}_db"));
        header.push(format!("dmcanc_node_{k}_db"));
    }
    w.write_record(&header)?;
    for (i, f) in report.freqs.iter().enumerate() {
        let mut row = vec![format!("{f:.4}")];
        for (a, b) in report.a_db.iter().zip(&report.b_db) {
            row.push(fmt_db(a[i]));
            row.push(fmt_db(b[i]));
        }
        w.write_record(&row)?;
    }
    flush(w, path)
}

/// `param, final_mse_mean_db, converged`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["param", "final_mse_mean_db", "converged"])?;
    for r in rows {
        w.write_record([r.param.to_string(), fmt_db(r.final_mean_db()), r.converged().to_string()])?;
    }
    flush(w, path)
}

/// `<prefix>_k.txt` (1-based) in `dir`.
pub fn write_filters(dir: &Path, prefix: &str, filters: &[Vec<f64>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, f) in filters.iter().enumerate() {
        let path = dir.join(format!("{prefix}_{}.txt", k + 1));
        fs::write(&path, dsp::coeffs_to_text(f)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_nodes: 2,
            duration: 6000,
            psi_taps: 32,
            comp_taps: 8,
            self_taps: 32,
            cross_taps: 40,
            primary_taps: 40,
            comp_samples: 20_000,
            mu_psi: 5e-4,
            n_runs: 3,
            window: 500,
            decimation: 50,
            ..ExperimentConfig::ci()
        }
    }

    #[test]
    fn smoothing_examples() {
        let ones = Signal::new(vec![1.0; 100], 1.0).unwrap();
        assert!(mse_smooth(&ones, 10, 5).unwrap().iter().all(|&v| v == 0.0));
        let zeros = Signal::new(vec![0.0; 100], 1.0).unwrap();
        assert!(mse_smooth(&zeros, 10, 5).unwrap().iter().all(|&v| v == DB_FLOOR));
        let e = dsp::white_noise_stream(3, 0, 200, 1.0).unwrap();
        let got = mse_smooth(&Signal::new(e.clone(), 1.0).unwrap(), 1, 1).unwrap();
        for (g, v) in got.iter().zip(&e) {
            assert!((g - 10.0 * (v * v).log10()).abs() <= 1e-9);
        }
        assert!(mse_smooth(&ones, 101, 1).is_err());
        assert_eq!(mse_smooth(&ones, 10, 7).unwrap().len(), 100 / 7);
    }

    #[test]
    fn smoothing_matches_direct_window_mean() {
        let e = dsp::white_noise_stream(4, 0, 1000, 2.0).unwrap();
        let got = mse_smooth(&Signal::new(e.clone(), 1.0).unwrap(), 64, 10).unwrap();
        for (j, g) in got.iter().enumerate() {
            let end = (j + 1) * 10;
            let start = end.saturating_sub(64);
            let want = e[start..end].iter().map(|v| v * v).sum::<f64>() / (end - start) as f64;
            assert!((g - 10.0 * want.log10()).abs() <= 1e-9);
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig::full();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let parsed = ExperimentConfig::from_toml("comm = \"delay:3000\"\nn_runs = 2").unwrap();
        assert_eq!(parsed.policy().unwrap(), CommPolicy::Delay(3000));
        assert!(ExperimentConfig::from_toml("n_runs = 0").is_err());
        assert!(ExperimentConfig::from_toml("comm = \"sometimes\"").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("compensation = \"exact\"").is_err());
        assert!(ExperimentConfig::from_toml("window = 2000000").is_err());
    }

    #[test]
    fn frozen_controller_leaves_disturbance() {
        let cfg = ExperimentConfig {
            mu_psi: 0.0,
            ..tiny()
        };
        let setup = Setup::build(&cfg).unwrap();
        let out = run_once(&cfg, &setup, 0).unwrap();
        let x = reference(&cfg, 0).unwrap();
        for k in 0..cfg.n_nodes {
            let d = setup.plant.primary(k).clone().process(&x);
            let want = mse_smooth(&Signal::new(d, cfg.fs).unwrap(), cfg.window, cfg.decimation).unwrap();
            assert_eq!(out.trace.node_db(k), want);
        }
    }

    #[test]
    fn single_run_average_equals_run_once() {
        let cfg = ExperimentConfig { n_runs: 1, ..tiny() };
        let setup = Setup::build(&cfg).unwrap();
        let once = run_once(&cfg, &setup, 0).unwrap();
        let avg = run_averaged(&cfg, &setup).unwrap();
        assert_eq!(avg.trace.power, once.trace.power);
        assert_eq!(avg.global_filters, once.global_filters);
    }

    #[test]
    fn parallel_equals_serial() {
        let cfg = tiny();
        let setup = Setup::build(&cfg).unwrap();
        let a = run_averaged_with(&cfg, &setup, true).unwrap();
        let b = run_averaged_with(&cfg, &setup, false).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.global_filters, b.global_filters);
    }

    #[test]
    fn spectra_examples() {
        let w = vec![dsp::white_noise_stream(1, 0, 40, 1.0).unwrap()];
        let same = spectra_report(&w, &w, 8000.0).unwrap();
        assert_eq!(same.deviation_db, vec![0.0]);
        let zero = vec![vec![0.0; 40]];
        let r = spectra_report(&w, &zero, 8000.0).unwrap();
        let (lo, hi) = (dsp::bin_of(100.0, 4096, 8000.0), dsp::bin_of(1000.0, 4096, 8000.0));
        let want = (lo..=hi).map(|i| r.a_db[0][i] - DB_FLOOR).fold(0.0, f64::max);
        assert_eq!(r.deviation_db[0], want);
        assert_eq!(r.freqs.len(), 2049);
    }

    #[test]
    fn sweep_rejects_empty_axis() {
        let cfg = tiny();
        let setup = Setup::build(&cfg).unwrap();
        assert!(sweep(&cfg, &setup, &SweepAxis::Delay(vec![])).is_err());
    }

    #[test]
    fn huge_step_is_reported_as_divergence() {
        let cfg = ExperimentConfig {
            mu_psi: 1.0,
            n_runs: 2,
            ..tiny()
        };
        let setup = Setup::build(&cfg).unwrap();
        let out = run_once(&cfg, &setup, 0).unwrap();
        assert!(out.diverged.is_some());
        assert!(!out.converged());
        let err = run_averaged(&cfg, &setup).unwrap_err();
        assert!(err.is_divergence());
    }
}
