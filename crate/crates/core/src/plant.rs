//! Synthetic acoustic world: primary paths from the noise reference to each
//! error sensor and the secondary-path matrix from every source to every
//! sensor.
//!
//! Paths are built as a shared band-pass prototype convolved with a random
//! "room" tail. A tail is a direct-path impulse at a bulk delay followed by
//! Gaussian reflections under an exponential envelope (time constant
//! `taps / 4`). The whole path is then normalized to a peak tap of one, and
//! cross paths are scaled down by `cross_gain_db` after that. Self
//! paths arrive first, cross paths later and the primary path last, so a
//! causal controller exists.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    self, convolve, design_bandpass, gaussian_vec, magnitude_response, noise_rng, DelayLine,
    FirFilter, Signal, NOISE_SHAPING_TAPS,
};
use crate::error::{Error, Result};

/// Everything needed to synthesize a plant deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    pub n_nodes: usize,
    pub self_taps: usize,
    pub cross_taps: usize,
    pub primary_taps: usize,
    /// Pass band of every acoustic path, Hz.
    pub band: (f64, f64),
    /// Band of the reference noise, used to scale the primary paths to unit
    /// disturbance power.
    pub reference_band: (f64, f64),
    pub fs: f64,
    pub seed: u64,
    /// Total reflection energy of a tail relative to its direct path, dB.
    pub reflection_db: f64,
    /// Peak tap of every cross path relative to the self paths, dB.
    pub cross_gain_db: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            n_nodes: 4,
            self_taps: 256,
            cross_taps: 320,
            primary_taps: 320,
            band: (50.0, 5000.0),
            reference_band: (100.0, 1000.0),
            fs: 16_000.0,
            seed: 1,
            reflection_db: -20.0,
            cross_gain_db: -20.0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::arg("plant needs at least one node"));
        }
        if self.self_taps < 4 || self.primary_taps < 4 {
            return Err(Error::arg("path lengths must be at least 4 taps"));
        }
        if self.self_taps > self.cross_taps {
            return Err(Error::arg(format!(
                "self path ({}) must not be longer than cross path ({})",
                self.self_taps, self.cross_taps
            )));
        }
        let p = self.prototype_taps();
        if p > self.primary_taps {
            return Err(Error::arg(format!(
                "primary path ({}) shorter than band-pass prototype ({p})",
                self.primary_taps
            )));
        }
        let (lo, hi) = self.band;
        design_bandpass(p, lo, hi, self.fs)?;
        let (rlo, rhi) = self.reference_band;
        design_bandpass(NOISE_SHAPING_TAPS, rlo, rhi, self.fs)?;
        if !self.reflection_db.is_finite() || !self.cross_gain_db.is_finite() {
            return Err(Error::arg("reflection and cross-path levels must be finite"));
        }
        Ok(())
    }

    /// Linear peak of the cross paths.
    pub fn cross_gain(&self) -> f64 {
        10f64.powf(self.cross_gain_db / 20.0)
    }

    /// Odd prototype length, about three quarters of the self-path length.
    pub fn prototype_taps(&self) -> usize {
        ((3 * self.self_taps / 4) | 1).max(3)
    }
}

/// Disturbance and residual error at every sensor for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantStepOutput {
    pub d: Vec<f64>,
    pub e: Vec<f64>,
}

/// Ground-truth acoustic plant with streaming state.
///
/// `secondary[k][m]` is the path from source `m` to sensor `k`. All secondary
/// paths share one length; all primary paths share another.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    fs: f64,
    primary: Vec<FirFilter>,
    secondary: Vec<Vec<FirFilter>>,
    spec: Option<PlantSpec>,
    x_line: DelayLine,
    y_lines: Vec<DelayLine>,
}

impl Plant {
    pub fn new(primary: Vec<FirFilter>, secondary: Vec<Vec<FirFilter>>, fs: f64) -> Result<Self> {
        let n = primary.len();
        if n == 0 {
            return Err(Error::arg("plant needs at least one node"));
        }
        if !(fs > 0.0) {
            return Err(Error::arg("sample rate must be positive"));
        }
        if secondary.len() != n || secondary.iter().any(|row| row.len() != n) {
            return Err(Error::arg(format!("secondary matrix must be {n}x{n}")));
        }
        let p_len = primary[0].len();
        if primary.iter().any(|p| p.len() != p_len) {
            return Err(Error::arg("primary paths must share one length"));
        }
        let s_len = secondary[0][0].len();
        if secondary.iter().flatten().any(|s| s.len() != s_len) {
            return Err(Error::arg("secondary paths must share one length"));
        }
        let strip = |f: &FirFilter| FirFilter::new(f.coeffs().to_vec()).expect("valid taps");
        Ok(Self {
            fs,
            primary: primary.iter().map(strip).collect(),
            secondary: secondary
                .iter()
                .map(|row| row.iter().map(strip).collect())
                .collect(),
            spec: None,
            x_line: DelayLine::new(p_len),
            y_lines: (0..n).map(|_| DelayLine::new(s_len)).collect(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.primary.len()
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn spec(&self) -> Option<&PlantSpec> {
        self.spec.as_ref()
    }

    pub fn primary(&self, k: usize) -> &FirFilter {
        &self.primary[k]
    }

    pub fn secondary(&self, k: usize, m: usize) -> &FirFilter {
        &self.secondary[k][m]
    }

    pub fn secondary_len(&self) -> usize {
        self.secondary[0][0].len()
    }

    pub fn primary_len(&self) -> usize {
        self.primary[0].len()
    }

    /// Clear all streaming state.
    pub fn reset(&mut self) {
        self.x_line.reset();
        self.y_lines.iter_mut().for_each(DelayLine::reset);
    }

    /// Advance one sample: feed `x(n)` and the control outputs `y_m(n)`, and
    /// write `d_k(n)` and `e_k(n) = d_k(n) - sum_m (y_m * s_km)(n)`.
    pub fn step_into(&mut self, x: f64, y: &[f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
        let n = self.n_nodes();
        if y.len() != n || d.len() != n || e.len() != n {
            return Err(Error::arg(format!(
                "plant step expects {n} control outputs, got {}",
                y.len()
            )));
        }
        self.x_line.push(x);
        for (line, &ym) in self.y_lines.iter_mut().zip(y) {
            line.push(ym);
        }
        let xw = self.x_line.window();
        for k in 0..n {
            let dk = dsp::dot(self.primary[k].coeffs(), xw);
            let mut anti = 0.0;
            for (s, line) in self.secondary[k].iter().zip(&self.y_lines) {
                anti += dsp::dot(s.coeffs(), line.window());
            }
            d[k] = dk;
            e[k] = dk - anti;
        }
        Ok(())
    }

    pub fn step(&mut self, x: f64, y: &[f64]) -> Result<PlantStepOutput> {
        let n = self.n_nodes();
        let mut out = PlantStepOutput {
            d: vec![0.0; n],
            e: vec![0.0; n],
        };
        self.step_into(x, y, &mut out.d, &mut out.e)?;
        Ok(out)
    }

    /// Cross-talk at sensor `k`: `sum_{m != k} (y_m * s_km)`, computed offline
    /// from recorded control signals.
    pub fn interference(&self, y_histories: &[Signal], k: usize) -> Result<Signal> {
        let n = self.n_nodes();
        if k >= n {
            return Err(Error::arg(format!("node index {k} out of range for {n} nodes")));
        }
        if y_histories.len() != n {
            return Err(Error::arg(format!("expected {n} control histories")));
        }
        let len = y_histories[0].len();
        let mut gamma = vec![0.0; len];
        for (m, y) in y_histories.iter().enumerate() {
            if m == k || y.is_empty() {
                continue;
            }
            let part = FirFilter::new(self.secondary[k][m].coeffs().to_vec())?.process(&y.samples);
            for (g, p) in gamma.iter_mut().zip(part) {
                *g += p;
            }
        }
        Signal::new(gamma, self.fs)
    }

    /// Secondary-path estimates: exact copies when `error_db` is `None`,
    /// otherwise each path plus white noise scaled so that
    /// `||s_hat - s||^2 / ||s||^2 = 10^(error_db / 10)`.
    pub fn secondary_estimates(&self, error_db: Option<f64>, seed: u64) -> Vec<Vec<FirFilter>> {
        let n = self.n_nodes();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut row = Vec::with_capacity(n);
            for m in 0..n {
                let s = self.secondary[k][m].coeffs();
                let mut est = s.to_vec();
                if let Some(db) = error_db {
                    let mut rng = noise_rng(seed, 0x5e57_0000 + (k * n + m) as u64);
                    let noise = gaussian_vec(&mut rng, s.len(), 1.0);
                    let scale = (dsp::energy(s) * 10f64.powf(db / 10.0) / dsp::energy(&noise)).sqrt();
                    dsp::axpy(&mut est, scale, &noise);
                }
                row.push(FirFilter::new(est).expect("finite estimate"));
            }
            out.push(row);
        }
        out
    }

    pub fn self_path_estimates(&self, error_db: Option<f64>, seed: u64) -> Vec<FirFilter> {
        self.secondary_estimates(error_db, seed)
            .into_iter()
            .enumerate()
            .map(|(k, mut row)| row.swap_remove(k))
            .collect()
    }

    /// Write `primary_k.txt`, `secondary_k_m.txt` (1-based indices) and
    /// `manifest.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.n_nodes();
        for k in 0..n {
            self.primary[k].save(&dir.join(format!("primary_{}.txt", k + 1)))?;
            for m in 0..n {
                self.secondary[k][m].save(&dir.join(format!("secondary_{}_{}.txt", k + 1, m + 1)))?;
            }
        }
        let manifest = PlantManifest {
            n_nodes: n,
            fs: self.fs,
            primary_taps: self.primary_len(),
            secondary_taps: self.secondary_len(),
            spec: self.spec.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: PlantManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let n = manifest.n_nodes;
        let primary = (0..n)
            .map(|k| FirFilter::load(&dir.join(format!("primary_{}.txt", k + 1))))
            .collect::<Result<Vec<_>>>()?;
        let secondary = (0..n)
            .map(|k| {
                (0..n)
                    .map(|m| FirFilter::load(&dir.join(format!("secondary_{}_{}.txt", k + 1, m + 1))))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut plant = Plant::new(primary, secondary, manifest.fs)?;
        if plant.primary_len() != manifest.primary_taps || plant.secondary_len() != manifest.secondary_taps {
            return Err(Error::Parse {
                path,
                message: "tap lengths disagree with coefficient files".into(),
            });
        }
        plant.spec = manifest.spec;
        Ok(plant)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PlantManifest {
    n_nodes: usize,
    fs: f64,
    primary_taps: usize,
    secondary_taps: usize,
    spec: Option<PlantSpec>,
}

enum PathKind {
    SelfPath,
    Cross,
    Primary,
}

fn bulk_delay(rng: &mut impl Rng, kind: PathKind, self_taps: usize, tail_len: usize) -> usize {
    let (lo, hi) = match kind {
        PathKind::SelfPath => (0, self_taps / 64),
        PathKind::Cross => (self_taps / 32, self_taps / 12),
        PathKind::Primary => (self_taps / 8, self_taps / 4),
    };
    let hi = hi.max(lo).min(tail_len.saturating_sub(1));
    let lo = lo.min(hi);
    rng.random_range(lo..=hi)
}

fn room_tail(rng: &mut impl Rng, len: usize, delay: usize, reflection_db: f64, tau: f64) -> Vec<f64> {
    let mut tail = vec![0.0; len];
    tail[delay] = 1.0;
    let n_refl = len - delay - 1;
    if n_refl > 0 {
        let mut refl: Vec<f64> = (1..=n_refl)
            .map(|j| rng.sample::<f64, _>(rand_distr::StandardNormal) * (-(j as f64) / tau).exp())
            .collect();
        let scale = (10f64.powf(reflection_db / 10.0) / dsp::energy(&refl)).sqrt();
        refl.iter_mut().for_each(|v| *v *= scale);
        tail[delay + 1..].copy_from_slice(&refl);
    }
    tail
}

fn peak_normalize(mut h: Vec<f64>) -> Vec<f64> {
    let peak = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        h.iter_mut().for_each(|v| *v /= peak);
    }
    h
}

fn synth_path(
    rng: &mut impl Rng,
    proto: &[f64],
    taps: usize,
    kind: PathKind,
    spec: &PlantSpec,
) -> Vec<f64> {
    let tail_len = taps - proto.len() + 1;
    let delay = bulk_delay(rng, kind, spec.self_taps, tail_len);
    let tail = room_tail(rng, tail_len, delay, spec.reflection_db, taps as f64 / 4.0);
    peak_normalize(convolve(proto, &tail).expect("non-empty operands"))
}

/// Expected disturbance power for unit-power reference noise in `band`.
fn disturbance_power(primary: &[f64], band: (f64, f64), fs: f64) -> f64 {
    let nfft = 8192;
    let shaper = design_bandpass(NOISE_SHAPING_TAPS, band.0, band.1, fs).expect("validated band");
    let b = magnitude_response(shaper.coeffs(), nfft);
    let p = magnitude_response(primary, nfft);
    // Interior bins count twice in the two-sided spectrum; the ratio only needs
    // consistent weighting.
    let num: f64 = b.iter().zip(&p).map(|(b, p)| (b * p).powi(2)).sum();
    let den: f64 = b.iter().map(|b| b * b).sum();
    num / den
}

/// Build a plant from `spec`. Deterministic in `spec.seed`.
pub fn synthesize_plant(spec: &PlantSpec) -> Result<Plant> {
    spec.validate()?;
    let n = spec.n_nodes;
    let proto = design_bandpass(spec.prototype_taps(), spec.band.0, spec.band.1, spec.fs)?;
    let proto = proto.coeffs();
    let mut rng = noise_rng(spec.seed, 0x9a7_0001);

    let mut primary = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = synth_path(&mut rng, proto, spec.primary_taps, PathKind::Primary, spec);
        let g = disturbance_power(&p, spec.reference_band, spec.fs).sqrt().recip();
        p.iter_mut().for_each(|v| *v *= g);
        primary.push(FirFilter::new(p)?);
    }
    let mut secondary = Vec::with_capacity(n);
    for k in 0..n {
        let mut row = Vec::with_capacity(n);
        for m in 0..n {
            let mut s = if k == m {
                synth_path(&mut rng, proto, spec.self_taps, PathKind::SelfPath, spec)
            } else {
                let g = spec.cross_gain();
                let mut s = synth_path(&mut rng, proto, spec.cross_taps, PathKind::Cross, spec);
                s.iter_mut().for_each(|v| *v *= g);
                s
            };
            s.resize(spec.cross_taps, 0.0);
            row.push(FirFilter::new(s)?);
        }
        secondary.push(row);
    }
    let mut plant = Plant::new(primary, secondary, spec.fs)?;
    plant.spec = Some(spec.clone());
    Ok(plant)
}

/// Exact cross-path factors: `(k, m) -> c_km` with `s_km = s_kk * c_km`.
pub type CrossFactors = BTreeMap<(usize, usize), Vec<f64>>;

/// Plant whose cross paths are built as `s_km = s_kk * c_km` from random
/// `comp_taps`-tap factors, so an exact compensation filter exists.
///
/// Needs `self_taps + comp_taps - 1 <= cross_taps`.
pub fn synthesize_factored_plant(spec: &PlantSpec, comp_taps: usize) -> Result<(Plant, CrossFactors)> {
    if comp_taps == 0 || spec.self_taps + comp_taps - 1 > spec.cross_taps {
        return Err(Error::arg(format!(
            "self ({}) + compensation ({comp_taps}) - 1 taps must fit in cross path ({})",
            spec.self_taps, spec.cross_taps
        )));
    }
    let base = synthesize_plant(spec)?;
    let n = spec.n_nodes;
    let mut rng = noise_rng(spec.seed, 0x9a7_0002);
    let mut factors = CrossFactors::new();
    let mut secondary: Vec<Vec<FirFilter>> = (0..n)
        .map(|k| (0..n).map(|m| base.secondary(k, m).clone()).collect())
        .collect();
    for k in 0..n {
        let s_kk = &base.secondary(k, k).coeffs()[..spec.self_taps];
        for m in 0..n {
            if m == k {
                continue;
            }
            let delay = rng.random_range(0..=(comp_taps / 4).max(1).min(comp_taps - 1));
            let mut c = room_tail(&mut rng, comp_taps, delay, spec.reflection_db, comp_taps as f64 / 4.0);
            let raw = convolve(s_kk, &c)?;
            let g = spec.cross_gain() / raw.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            c.iter_mut().for_each(|v| *v *= g);
            let mut s_km = convolve(s_kk, &c)?;
            s_km.resize(spec.cross_taps, 0.0);
            secondary[k][m] = FirFilter::new(s_km)?;
            factors.insert((k, m), c);
        }
    }
    let primary = (0..n).map(|k| base.primary(k).clone()).collect();
    let mut plant = Plant::new(primary, secondary, spec.fs)?;
    plant.spec = Some(spec.clone());
    Ok((plant, factors))
}
