//! Offline identification of the compensation filters `c_km` that map a
//! node's self path onto each cross path, `s_km ≈ s_kk * c_km`.
//!
//! Identification is FxLMS on white Gaussian excitation: the excitation
//! through `s_km` is the desired signal, the excitation through `c_km` and
//! then `s_kk` is the model output, and the regressor is the excitation
//! filtered by the self-path estimate.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, convolve, noise_rng, DelayLine, FirFilter};
use crate::error::{Error, Result};
use crate::plant::{CrossFactors, Plant};

/// Samples per block of the modeling-error trace.
pub const BLOCK_LEN: usize = 1000;

/// Compensation filters held by one node: `filters[m] = c_km` for every `m != k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationSet {
    owner: usize,
    taps: usize,
    filters: BTreeMap<usize, FirFilter>,
    residual_db: BTreeMap<usize, f64>,
}

impl CompensationSet {
    pub fn new(owner: usize, taps: usize) -> Self {
        Self {
            owner,
            taps: taps.max(1),
            filters: BTreeMap::new(),
            residual_db: BTreeMap::new(),
        }
    }

    /// Zero filters for every peer of `owner` in an `n_nodes` system.
    pub fn zeros(owner: usize, n_nodes: usize, taps: usize) -> Self {
        let mut set = Self::new(owner, taps);
        for m in (0..n_nodes).filter(|&m| m != owner) {
            set.filters.insert(m, FirFilter::zeros(taps));
        }
        set
    }

    pub fn insert(&mut self, m: usize, filter: FirFilter, residual_db: f64) -> Result<()> {
        if m == self.owner {
            return Err(Error::arg(format!("node {m} cannot compensate for itself")));
        }
        if filter.len() != self.taps {
            return Err(Error::arg(format!(
                "compensation filter has {} taps, set expects {}",
                filter.len(),
                self.taps
            )));
        }
        self.filters.insert(m, filter);
        self.residual_db.insert(m, residual_db);
        Ok(())
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn get(&self, m: usize) -> Option<&FirFilter> {
        self.filters.get(&m)
    }

    pub fn peers(&self) -> impl Iterator<Item = usize> + '_ {
        self.filters.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &FirFilter)> {
        self.filters.iter().map(|(&m, f)| (m, f))
    }

    pub fn residual_db(&self, m: usize) -> Option<f64> {
        self.residual_db.get(&m).copied()
    }

    pub fn residuals(&self) -> &BTreeMap<usize, f64> {
        &self.residual_db
    }

    /// Sets built from the exact factors of a factored plant.
    pub fn from_factors(plant: &Plant, factors: &CrossFactors) -> Result<Vec<CompensationSet>> {
        let n = plant.n_nodes();
        let taps = factors.values().map(Vec::len).next().unwrap_or(1);
        let mut sets: Vec<_> = (0..n).map(|k| CompensationSet::new(k, taps)).collect();
        for (&(k, m), c) in factors {
            let filter = FirFilter::new(c.clone())?;
            let res = compensation_residual(plant.secondary(k, k), plant.secondary(k, m), &filter)?;
            sets[k].insert(m, filter, res)?;
        }
        Ok(sets)
    }
}

/// Step size, duration, length and seed of one identification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub mu: f64,
    pub n_samples: usize,
    pub taps: usize,
    pub seed: u64,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            mu: 1e-3,
            n_samples: 500_000,
            taps: 64,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationFitReport {
    /// Mean modeling-error power per block of [`BLOCK_LEN`] samples, dB.
    pub error_power_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final misfit of `s_kk * c_km` against `s_km`, dB.
    pub residual_db: f64,
}

/// `10 log10(||s_km - s_kk * c_km||^2 / ||s_km||^2)`, shorter sequence
/// zero-padded.
pub fn compensation_residual(s_kk: &FirFilter, s_km: &FirFilter, c_km: &FirFilter) -> Result<f64> {
    let target = s_km.coeffs();
    let norm = dsp::energy(target);
    if norm == 0.0 {
        return Err(Error::arg("cross path has zero energy"));
    }
    let model = convolve(s_kk.coeffs(), c_km.coeffs())?;
    let misfit = dsp::energy(&dsp::sub_padded(target, &model));
    Ok(if misfit == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (misfit / norm).log10()
    })
}

/// Least-squares `c` minimizing `||s_km - s_kk * c||` over `taps`
/// coefficients, solved through an SVD of the convolution matrix.
pub fn least_squares_compensation(s_kk: &[f64], s_km: &[f64], taps: usize) -> Result<Vec<f64>> {
    if s_kk.is_empty() || s_km.is_empty() || taps == 0 {
        return Err(Error::arg("least-squares fit needs non-empty paths and taps"));
    }
    let rows = s_km.len().max(s_kk.len() + taps - 1);
    let a = DMatrix::from_fn(rows, taps, |i, j| {
        if i >= j {
            s_kk.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(rows, |i, _| s_km.get(i).copied().unwrap_or(0.0));
    let svd = a.svd(true, true);
    let eps = svd.singular_values.max() * 1e-13;
    let c = svd.solve(&b, eps).map_err(|e| Error::arg(e.to_string()))?;
    Ok(c.iter().copied().collect())
}

fn pair_stream(k: usize, m: usize) -> u64 {
    0xc0_0000 + ((k as u64) << 16) + m as u64
}

/// Identify `c_km` for node `k` against peer `m`.
///
/// The excitation is white, unit variance, seeded per `(seed, k, m)`. The
/// filter starts at zero. Returns a divergence error when a block's error power
/// reaches ten times that of the first block.
pub fn fit_compensation(
    plant: &Plant,
    k: usize,
    m: usize,
    s_kk_est: &FirFilter,
    params: &FitParams,
) -> Result<(FirFilter, CompensationFitReport)> {
    let n_nodes = plant.n_nodes();
    if k >= n_nodes || m >= n_nodes {
        return Err(Error::arg(format!("node pair ({k}, {m}) out of range")));
    }
    if k == m {
        return Err(Error::arg("compensation filters exist only for m != k"));
    }
    if !(params.mu >= 0.0 && params.mu.is_finite()) {
        return Err(Error::arg(format!("step size must be non-negative, got {}", params.mu)));
    }
    if params.taps == 0 {
        return Err(Error::arg("compensation filter needs at least one tap"));
    }

    let mut cross = FirFilter::new(plant.secondary(k, m).coeffs().to_vec())?;
    let mut own = FirFilter::new(plant.secondary(k, k).coeffs().to_vec())?;
    let mut own_est = FirFilter::new(s_kk_est.coeffs().to_vec())?;
    let mut comp = FirFilter::zeros(params.taps);
    let mut regressor = DelayLine::new(params.taps);
    let mut rng = noise_rng(params.seed, pair_stream(k, m));

    let mut trace = Vec::with_capacity(params.n_samples / BLOCK_LEN + 1);
    let mut block = 0.0;
    let mut first_block: Option<f64> = None;

    for n in 0..params.n_samples {
        let v: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
        let desired = cross.process_sample(v);
        let modeled = own.process_sample(comp.process_sample(v));
        let err = desired - modeled;
        regressor.push(own_est.process_sample(v));
        dsp::axpy(comp.coeffs_mut(), params.mu * err, regressor.window());

        block += err * err;
        if (n + 1) % BLOCK_LEN == 0 {
            let p = block / BLOCK_LEN as f64;
            block = 0.0;
            let reference = *first_block.get_or_insert(p);
            if !p.is_finite() || (reference > 0.0 && p >= 10.0 * reference) {
                return Err(Error::Divergence {
                    what: format!("compensation fit ({k}, {m})"),
                    sample: n,
                    detail: format!("error power grew tenfold; reduce mu_c (currently {})", params.mu),
                });
            }
            trace.push(dsp::power_db(p, -400.0));
        }
    }

    let converged = is_settled(&trace);
    let filter = FirFilter::new(comp.coeffs().to_vec())?;
    let residual_db = compensation_residual(plant.secondary(k, k), plant.secondary(k, m), &filter)?;
    Ok((
        filter,
        CompensationFitReport {
            error_power_trace: trace,
            converged,
            iterations: params.n_samples,
            residual_db,
        },
    ))
}

/// Last ten blocks within 1 dB of the ten before them.
fn is_settled(trace: &[f64]) -> bool {
    if trace.len() < 20 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let t = trace.len();
    (mean(&trace[t - 10..]) - mean(&trace[t - 20..t - 10])).abs() <= 1.0
}

/// Fit every `c_km`, `k != m`, one source at a time.
///
/// `estimates[k]` is the self-path estimate used by node `k`.
pub fn fit_all(
    plant: &Plant,
    estimates: &[FirFilter],
    params: &FitParams,
) -> Result<(Vec<CompensationSet>, BTreeMap<(usize, usize), CompensationFitReport>)> {
    let n = plant.n_nodes();
    if estimates.len() != n {
        return Err(Error::arg(format!("expected {n} self-path estimates, got {}", estimates.len())));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|k| (0..n).filter(move |&m| m != k).map(move |m| (k, m)))
        .collect();
    let fit = |&(k, m): &(usize, usize)| {
        fit_compensation(plant, k, m, &estimates[k], params)
            .map(|r| ((k, m), r))
            .map_err(|e| Error::Pair {
                k,
                m,
                source: Box::new(e),
            })
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        pairs.par_iter().map(fit).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = pairs.iter().map(fit).collect();

    let mut sets: Vec<_> = (0..n).map(|k| CompensationSet::new(k, params.taps)).collect();
    let mut reports = BTreeMap::new();
    for r in results {
        let ((k, m), (filter, report)) = r?;
        sets[k].insert(m, filter, report.residual_db)?;
        reports.insert((k, m), report);
    }
    Ok((sets, reports))
}

#[derive(Debug, Serialize, Deserialize)]
struct CompensationManifest {
    n_nodes: usize,
    taps: usize,
    residuals: Vec<PairResidual>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairResidual {
    k: usize,
    m: usize,
    residual_db: f64,
}

/// Write `comp_k_m.txt` files (1-based) and `compensation.toml` with residuals.
pub fn save_sets(dir: &Path, sets: &[CompensationSet]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut residuals = Vec::new();
    for set in sets {
        for (m, f) in set.iter() {
            f.save(&dir.join(format!("comp_{}_{}.txt", set.owner + 1, m + 1)))?;
            residuals.push(PairResidual {
                k: set.owner + 1,
                m: m + 1,
                residual_db: set.residual_db(m).unwrap_or(f64::NAN),
            });
        }
    }
    let manifest = CompensationManifest {
        n_nodes: sets.len(),
        taps: sets.first().map_or(1, |s| s.taps),
        residuals,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
    let path = dir.join("compensation.toml");
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_sets(dir: &Path) -> Result<Vec<CompensationSet>> {
    let path = dir.join("compensation.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CompensationManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut sets: Vec<_> = (0..manifest.n_nodes)
        .map(|k| CompensationSet::new(k, manifest.taps))
        .collect();
    for r in &manifest.residuals {
        if r.k == 0 || r.m == 0 || r.k > manifest.n_nodes || r.m > manifest.n_nodes {
            return Err(Error::Parse {
                path,
                message: format!("pair ({}, {}) out of range", r.k, r.m),
            });
        }
        let f = FirFilter::load(&dir.join(format!("comp_{}_{}.txt", r.k, r.m)))?;
        sets[r.k - 1].insert(r.m - 1, f, r.residual_db)?;
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{synthesize_factored_plant, synthesize_plant, PlantSpec};

    fn small_spec() -> PlantSpec {
        PlantSpec {
            n_nodes: 3,
            self_taps: 64,
            cross_taps: 80,
            primary_taps: 80,
            band: (50.0, 3000.0),
            fs: 8000.0,
            seed: 2,
            ..PlantSpec::default()
        }
    }

    #[test]
    fn residual_of_zero_filter_is_zero_db() {
        let plant = synthesize_plant(&small_spec()).unwrap();
        let r = compensation_residual(plant.secondary(0, 0), plant.secondary(0, 1), &FirFilter::zeros(16)).unwrap();
        assert!(r.abs() < 1e-12);
        assert!(compensation_residual(plant.secondary(0, 0), &FirFilter::zeros(5), &FirFilter::zeros(3)).is_err());
    }

    #[test]
    fn least_squares_recovers_exact_factor() {
        let (plant, factors) = synthesize_factored_plant(&PlantSpec::default(), 64).unwrap();
        let s_kk = plant.secondary(2, 2).coeffs();
        let s_km = plant.secondary(2, 0).coeffs();
        let c = least_squares_compensation(s_kk, s_km, 64).unwrap();
        let r = compensation_residual(
            plant.secondary(2, 2),
            plant.secondary(2, 0),
            &FirFilter::new(c).unwrap(),
        )
        .unwrap();
        assert!(r <= -200.0, "residual {r} dB");
        let exact = &factors[&(2, 0)];
        let r_true = compensation_residual(
            plant.secondary(2, 2),
            plant.secondary(2, 0),
            &FirFilter::new(exact.clone()).unwrap(),
        )
        .unwrap();
        assert!(r_true <= -200.0);
    }

    #[test]
    fn frozen_adaptation_keeps_zero_filter() {
        let plant = synthesize_plant(&small_spec()).unwrap();
        let params = FitParams {
            mu: 0.0,
            n_samples: 50_000,
            taps: 16,
            seed: 1,
        };
        let (c, report) = fit_compensation(&plant, 0, 1, plant.secondary(0, 0), &params).unwrap();
        assert!(c.coeffs().iter().all(|&v| v == 0.0));
        assert!(report.residual_db.abs() < 1e-12);
        // Block power of v * s_01 for unit white v is ||s_01||^2.
        let expected = 10.0 * dsp::energy(plant.secondary(0, 1).coeffs()).log10();
        let mean = report.error_power_trace[1..].iter().sum::<f64>() / (report.error_power_trace.len() - 1) as f64;
        assert!((mean - expected).abs() < 0.2, "{mean} vs {expected}");
    }

    #[test]
    fn single_update_matches_hand_arithmetic() {
        // One FxLMS step from zero: c = mu * v_hat(0) * e(0) with histories
        // holding only the first sample.
        let plant = synthesize_plant(&small_spec()).unwrap();
        let params = FitParams {
            mu: 0.01,
            n_samples: 1,
            taps: 4,
            seed: 9,
        };
        let (c, _) = fit_compensation(&plant, 1, 2, plant.secondary(1, 1), &params).unwrap();
        let mut rng = noise_rng(9, pair_stream(1, 2));
        let v: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
        let e = v * plant.secondary(1, 2).coeffs()[0];
        let v_hat = v * plant.secondary(1, 1).coeffs()[0];
        assert_eq!(c.coeffs(), &[0.01 * e * v_hat, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_diagonal_and_flags_divergence() {
        let plant = synthesize_plant(&small_spec()).unwrap();
        let p = FitParams::default();
        assert!(fit_compensation(&plant, 1, 1, plant.secondary(1, 1), &p).is_err());
        let wild = FitParams {
            mu: 5.0,
            n_samples: 20_000,
            taps: 16,
            seed: 1,
        };
        let err = fit_compensation(&plant, 0, 1, plant.secondary(0, 0), &wild).unwrap_err();
        assert!(err.is_divergence());
        assert!(err.to_string().contains("mu_c"));
    }

    #[test]
    fn fit_all_shapes() {
        let spec = PlantSpec { n_nodes: 1, ..small_spec() };
        let plant = synthesize_plant(&spec).unwrap();
        let (sets, reports) = fit_all(&plant, &plant.self_path_estimates(None, 0), &FitParams::default()).unwrap();
        assert_eq!(sets.len(), 1);
        assert!(sets[0].is_empty());
        assert!(reports.is_empty());
    }

    #[test]
    fn set_rejects_self_entry_and_wrong_length() {
        let mut set = CompensationSet::new(1, 8);
        assert!(set.insert(1, FirFilter::zeros(8), 0.0).is_err());
        assert!(set.insert(0, FirFilter::zeros(7), 0.0).is_err());
        assert!(set.insert(0, FirFilter::zeros(8), 0.0).is_ok());
    }

    #[test]
    fn sets_round_trip_through_files() {
        let (plant, factors) = synthesize_factored_plant(&small_spec(), 16).unwrap();
        let sets = CompensationSet::from_factors(&plant, &factors).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sets(dir.path(), &sets).unwrap();
        assert!(dir.path().join("comp_1_2.txt").exists());
        assert_eq!(load_sets(dir.path()).unwrap(), sets);
    }
}
