//! The two controllers: the distributed node that adapts only its local filter
//! `psi_k`, and the centralized multichannel FxLMS baseline.
//!
//! A distributed node drives its source with the global filter
//!
//! ```text
//! w_k = psi_k - sum_{m != k} psi_m * c_km
//! ```
//!
//! built from its own local filter and the latest copies of its peers'. The
//! local filter follows the LMS step `psi_k += mu * x_hat_k * e_k`, where the
//! filtered reference is
//!
//! ```text
//! x_hat_k = x * s_hat_kk * (delta - sum_{m != k} c_mk * c_km)
//! ```
//!
//! With the default [`WeightSync::Factored`] the output is evaluated as
//! `psi_k . x - sum_m psi_m . (x * c_km)`, which equals `w_k . x` for the
//! current coefficients while costing `N * L_psi` instead of
//! `(N - 1) * L_psi * L_c` operations per sample. [`WeightSync::Cached`] keeps
//! an explicit `w_k` instead.

use serde::{Deserialize, Serialize};

use crate::compensation::CompensationSet;
use crate::dsp::{self, convolve, DelayLine, FirFilter};
use crate::error::{Error, Result};
use crate::network::PeerUpdate;
use crate::plant::Plant;

/// Combine a local filter with peer copies: `psi_k - sum_m psi_m * c_km`,
/// `L_psi + L_c - 1` taps.
pub fn global_filter(psi_k: &[f64], peers: &[(usize, &[f64])], comp: &CompensationSet) -> Result<Vec<f64>> {
    let mut keys: Vec<usize> = peers.iter().map(|(m, _)| *m).collect();
    keys.sort_unstable();
    keys.dedup();
    let expected: Vec<usize> = comp.peers().collect();
    if keys.len() != peers.len() || keys != expected {
        return Err(Error::config(format!(
            "peer copies {keys:?} do not match compensation filters {expected:?}"
        )));
    }
    let len = psi_k.len() + comp.taps() - 1;
    let mut w = psi_k.to_vec();
    w.resize(len, 0.0);
    for &(m, psi_m) in peers {
        let c = comp.get(m).expect("keys checked");
        let part = convolve(psi_m, c.coeffs())?;
        for (wi, pi) in w.iter_mut().zip(part) {
            *wi -= pi;
        }
    }
    Ok(w)
}

/// Taps of the filtered-reference path `s_hat_kk * (delta - sum_m c_mk * c_km)`.
///
/// With no peers this is `s_hat_kk` itself.
pub fn filtered_reference_filter(k: usize, s_kk_est: &FirFilter, sets: &[CompensationSet]) -> Result<FirFilter> {
    let own = &sets[k];
    if own.is_empty() {
        return FirFilter::new(s_kk_est.coeffs().to_vec());
    }
    let mut shaping = vec![0.0; 2 * own.taps() - 1];
    shaping[0] = 1.0;
    for (m, c_km) in own.iter() {
        let c_mk = sets[m]
            .get(k)
            .ok_or_else(|| Error::config(format!("node {m} has no compensation filter for node {k}")))?;
        let prod = convolve(c_mk.coeffs(), c_km.coeffs())?;
        for (g, p) in shaping.iter_mut().zip(prod) {
            *g -= p;
        }
    }
    FirFilter::new(convolve(s_kk_est.coeffs(), &shaping)?)
}

/// How a node turns its local filter and peer copies into control output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSync {
    /// Evaluate `w_k . x` in factored form from the current coefficients.
    Factored,
    /// Keep an explicit `w_k`, recomputed after a change at most every
    /// `refresh` samples.
    Cached { refresh: usize },
}

#[derive(Debug, Clone)]
struct Peer {
    m: usize,
    psi: Vec<f64>,
    stamp: u64,
    /// `x * c_km`, streaming.
    comp_path: FirFilter,
    comp_out: DelayLine,
}

#[derive(Debug, Clone)]
struct Cache {
    refresh: usize,
    w: Vec<f64>,
    x_long: DelayLine,
    dirty: bool,
    since: usize,
}

/// One distributed controller node.
#[derive(Debug, Clone)]
pub struct NodeState {
    k: usize,
    psi: Vec<f64>,
    comp: CompensationSet,
    peers: Vec<Peer>,
    s_kk_est: FirFilter,
    fx_path: FirFilter,
    fx_hist: DelayLine,
    x_hist: DelayLine,
    cache: Option<Cache>,
}

impl NodeState {
    /// `sets[m]` holds node `m`'s compensation filters; node `k` uses its own
    /// `c_km` and every peer's `c_mk`.
    pub fn new(k: usize, taps: usize, s_kk_est: FirFilter, sets: &[CompensationSet], sync: WeightSync) -> Result<Self> {
        let n = sets.len();
        if k >= n {
            return Err(Error::arg(format!("node {k} out of range for {n} compensation sets")));
        }
        if taps == 0 {
            return Err(Error::arg("local filter needs at least one tap"));
        }
        let comp = sets[k].clone();
        let expected: Vec<usize> = (0..n).filter(|&m| m != k).collect();
        if comp.peers().collect::<Vec<_>>() != expected {
            return Err(Error::config(format!("node {k} needs compensation filters for {expected:?}")));
        }
        let fx_path = filtered_reference_filter(k, &s_kk_est, sets)?;
        let peers = comp
            .iter()
            .map(|(m, c)| Peer {
                m,
                psi: vec![0.0; taps],
                stamp: 0,
                comp_path: FirFilter::new(c.coeffs().to_vec()).expect("valid taps"),
                comp_out: DelayLine::new(taps),
            })
            .collect();
        let cache = match sync {
            WeightSync::Factored => None,
            WeightSync::Cached { refresh } => Some(Cache {
                refresh: refresh.max(1),
                w: vec![0.0; taps + comp.taps() - 1],
                x_long: DelayLine::new(taps + comp.taps() - 1),
                dirty: false,
                since: 0,
            }),
        };
        Ok(Self {
            k,
            psi: vec![0.0; taps],
            comp,
            peers,
            s_kk_est,
            fx_path,
            fx_hist: DelayLine::new(taps),
            x_hist: DelayLine::new(taps),
            cache,
        })
    }

    pub fn index(&self) -> usize {
        self.k
    }

    pub fn taps(&self) -> usize {
        self.psi.len()
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn set_psi(&mut self, psi: &[f64]) -> Result<()> {
        if psi.len() != self.psi.len() {
            return Err(Error::arg("local filter length mismatch"));
        }
        self.psi.copy_from_slice(psi);
        self.mark_dirty();
        Ok(())
    }

    pub fn compensation(&self) -> &CompensationSet {
        &self.comp
    }

    pub fn self_path_estimate(&self) -> &FirFilter {
        &self.s_kk_est
    }

    pub fn filtered_reference_path(&self) -> &FirFilter {
        &self.fx_path
    }

    /// `(m, psi_m copy, stamp)` for every peer.
    pub fn peer_copies(&self) -> impl Iterator<Item = (usize, &[f64], u64)> {
        self.peers.iter().map(|p| (p.m, p.psi.as_slice(), p.stamp))
    }

    /// Latest `L_psi` filtered-reference samples, newest first.
    pub fn filtered_history(&self) -> &[f64] {
        self.fx_hist.window()
    }

    fn mark_dirty(&mut self) {
        if let Some(c) = self.cache.as_mut() {
            c.dirty = true;
        }
    }

    /// Feed `x(n)` into every internal stream and return `x_hat_k(n)`.
    pub fn filtered_reference_step(&mut self, x: f64) -> f64 {
        self.x_hist.push(x);
        for p in &mut self.peers {
            let u = p.comp_path.process_sample(x);
            p.comp_out.push(u);
        }
        if let Some(c) = self.cache.as_mut() {
            c.x_long.push(x);
        }
        let xf = self.fx_path.process_sample(x);
        self.fx_hist.push(xf);
        xf
    }

    /// Apply the peer versions delivered by a snapshot.
    pub fn receive(&mut self, updates: &[PeerUpdate<'_>]) -> Result<()> {
        let mut changed = false;
        for u in updates {
            let peer = self
                .peers
                .iter_mut()
                .find(|p| p.m == u.sender)
                .ok_or_else(|| Error::config(format!("node {} has no peer {}", self.k, u.sender)))?;
            if u.stamp < peer.stamp {
                return Err(Error::Contract(format!(
                    "stamp for peer {} went back from {} to {}",
                    u.sender, peer.stamp, u.stamp
                )));
            }
            if let Some(c) = u.coeffs {
                if c.len() != peer.psi.len() {
                    return Err(Error::arg("peer filter length mismatch"));
                }
                peer.psi.copy_from_slice(c);
                changed = true;
            }
            peer.stamp = u.stamp;
        }
        if changed {
            self.mark_dirty();
        }
        Ok(())
    }

    /// Control output `y_k(n)` for the reference already pushed this sample.
    pub fn output(&mut self) -> f64 {
        match self.cache.as_mut() {
            None => {
                let mut y = dsp::dot(&self.psi, self.x_hist.window());
                for p in &self.peers {
                    y -= dsp::dot(&p.psi, p.comp_out.window());
                }
                y
            }
            Some(_) => {
                let refresh_due = {
                    let c = self.cache.as_mut().expect("cached");
                    c.since += 1;
                    c.dirty && c.since >= c.refresh
                };
                if refresh_due {
                    let w = self.global_filter().expect("peer set fixed at construction");
                    let c = self.cache.as_mut().expect("cached");
                    c.w = w;
                    c.dirty = false;
                    c.since = 0;
                }
                let c = self.cache.as_ref().expect("cached");
                dsp::dot(&c.w, c.x_long.window())
            }
        }
    }

    /// `x(n)` in, `y_k(n)` out.
    pub fn node_output(&mut self, x: f64) -> f64 {
        self.filtered_reference_step(x);
        self.output()
    }

    /// `psi_k += mu * e_k(n) * x_hat_k`. Peer copies are untouched.
    pub fn local_update(&mut self, e: f64, mu: f64) -> Result<()> {
        if !e.is_finite() {
            return Err(Error::Divergence {
                what: format!("node {}", self.k),
                sample: 0,
                detail: format!("non-finite error signal {e}"),
            });
        }
        dsp::axpy(&mut self.psi, mu * e, self.fx_hist.window());
        self.mark_dirty();
        Ok(())
    }

    /// Global filter from the current local filter and held peer copies.
    pub fn global_filter(&self) -> Result<Vec<f64>> {
        let peers: Vec<(usize, &[f64])> = self.peers.iter().map(|p| (p.m, p.psi.as_slice())).collect();
        global_filter(&self.psi, &peers, &self.comp)
    }

    /// The explicit `w_k` kept by [`WeightSync::Cached`].
    pub fn cached_global_filter(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.w.as_slice())
    }
}

/// Centralized multichannel FxLMS: one controller owning every source filter.
#[derive(Debug, Clone)]
pub struct CentralizedState {
    weights: Vec<Vec<f64>>,
    x_hist: DelayLine,
    /// `fx_paths[k][m] = s_hat_km`, streaming the reference.
    fx_paths: Vec<Vec<FirFilter>>,
    fx_hist: Vec<Vec<DelayLine>>,
}

impl CentralizedState {
    /// `estimates[k][m]` is the estimate of the path from source `m` to sensor `k`.
    pub fn new(taps: usize, estimates: &[Vec<FirFilter>]) -> Result<Self> {
        let n = estimates.len();
        if n == 0 || estimates.iter().any(|r| r.len() != n) {
            return Err(Error::arg("secondary-path estimates must form a non-empty square matrix"));
        }
        if taps == 0 {
            return Err(Error::arg("control filter needs at least one tap"));
        }
        Ok(Self {
            weights: vec![vec![0.0; taps]; n],
            x_hist: DelayLine::new(taps),
            fx_paths: estimates
                .iter()
                .map(|row| row.iter().map(|s| FirFilter::new(s.coeffs().to_vec()).expect("valid")).collect())
                .collect(),
            fx_hist: (0..n).map(|_| (0..n).map(|_| DelayLine::new(taps)).collect()).collect(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn set_weights(&mut self, m: usize, w: &[f64]) -> Result<()> {
        let slot = self
            .weights
            .get_mut(m)
            .ok_or_else(|| Error::arg(format!("source {m} out of range")))?;
        if slot.len() != w.len() {
            return Err(Error::arg("control filter length mismatch"));
        }
        slot.copy_from_slice(w);
        Ok(())
    }

    /// Latest filtered-reference window for sensor `k`, source `m`.
    pub fn filtered_history(&self, k: usize, m: usize) -> &[f64] {
        self.fx_hist[k][m].window()
    }

    /// Feed `x(n)` and write `y_m(n)` for every source.
    pub fn push_reference(&mut self, x: f64, y: &mut [f64]) {
        self.x_hist.push(x);
        for (paths, hists) in self.fx_paths.iter_mut().zip(&mut self.fx_hist) {
            for (p, h) in paths.iter_mut().zip(hists.iter_mut()) {
                h.push(p.process_sample(x));
            }
        }
        for (ym, w) in y.iter_mut().zip(&self.weights) {
            *ym = dsp::dot(w, self.x_hist.window());
        }
    }

    /// `W_m += mu * sum_k e_k * x_hat_km` for every source `m`.
    pub fn update(&mut self, e: &[f64], mu: f64) -> Result<()> {
        if e.len() != self.weights.len() {
            return Err(Error::arg("error vector has the wrong length"));
        }
        if let Some(v) = e.iter().find(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                what: "centralized controller".into(),
                sample: 0,
                detail: format!("non-finite error signal {v}"),
            });
        }
        for (m, w) in self.weights.iter_mut().enumerate() {
            for (k, &ek) in e.iter().enumerate() {
                dsp::axpy(w, mu * ek, self.fx_hist[k][m].window());
            }
        }
        Ok(())
    }

    /// One full step: outputs for `x(n)`, then the update with `e`, where
    /// `e` comes from a closure given the outputs.
    pub fn centralized_step(
        &mut self,
        x: f64,
        mu: f64,
        plant_response: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.weights.len()];
        self.push_reference(x, &mut y);
        let e = plant_response(&y)?;
        self.update(&e, mu)?;
        Ok(y)
    }
}

/// Signals recorded while every filter is frozen, for checking the residual
/// expansion of the distributed controller.
#[derive(Debug, Clone)]
pub struct ExpansionRecord {
    /// Reference from sample 0 through the end of the window.
    pub x: Vec<f64>,
    /// Frozen local filters.
    pub psi: Vec<Vec<f64>>,
    /// First sample of the window.
    pub start: usize,
    /// `d[k][i]`, `e[k][i]` for sample `start + i`.
    pub d: Vec<Vec<f64>>,
    pub e: Vec<Vec<f64>>,
}

/// Largest `|e_k(n) - rhs(n)|` over the settled part of the window, where
///
/// ```text
/// rhs = d_k - x * [ (psi_k - sum_{m != k} psi_k * c_mk * c_km) * s_kk
///                   - sum_{m != k} sum_{l != k, m} psi_l * c_ml * s_km ]
/// ```
///
/// The two agree exactly when `s_km = s_kk * c_km` holds for every pair.
pub fn error_expansion_check(record: &ExpansionRecord, plant: &Plant, sets: &[CompensationSet], k: usize) -> Result<f64> {
    let n = plant.n_nodes();
    if k >= n || sets.len() != n || record.psi.len() != n {
        return Err(Error::arg("record, plant and compensation sets disagree on node count"));
    }
    let s_kk = plant.secondary(k, k).coeffs();
    let psi_k = &record.psi[k];

    // Own-path bracket: psi_k - sum_m psi_k * c_mk * c_km.
    let mut own = psi_k.clone();
    for m in (0..n).filter(|&m| m != k) {
        let c_mk = comp(sets, m, k)?;
        let c_km = comp(sets, k, m)?;
        let t = convolve(&convolve(psi_k, c_mk)?, c_km)?;
        own = dsp::sub_padded(&own, &t);
    }
    let mut total = convolve(&own, s_kk)?;
    for m in (0..n).filter(|&m| m != k) {
        for l in (0..n).filter(|&l| l != k && l != m) {
            let t = convolve(&convolve(&record.psi[l], comp(sets, m, l)?)?, plant.secondary(k, m).coeffs())?;
            total = dsp::sub_padded(&total, &t);
        }
    }

    let comp_taps = sets[k].taps();
    let settle = psi_k.len() + comp_taps - 1 + plant.secondary_len() - 1;
    let window = record.e[k].len();
    let end = record.start + window;
    if record.x.len() < end {
        return Err(Error::arg("reference record shorter than the window"));
    }
    let mut filter = FirFilter::new(total)?;
    let mut worst: f64 = 0.0;
    for n_abs in 0..end {
        let v = filter.process_sample(record.x[n_abs]);
        if n_abs >= record.start + settle {
            let i = n_abs - record.start;
            let rhs = record.d[k][i] - v;
            worst = worst.max((record.e[k][i] - rhs).abs());
        }
    }
    Ok(worst)
}

fn comp(sets: &[CompensationSet], k: usize, m: usize) -> Result<&[f64]> {
    sets[k]
        .get(m)
        .map(FirFilter::coeffs)
        .ok_or_else(|| Error::config(format!("missing compensation filter c_{k}{m}")))
}
