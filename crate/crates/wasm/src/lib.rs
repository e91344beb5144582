//! Browser bindings for the demo page in `www/`.
//!
//! Every function runs a small three-node plant at 8 kHz and returns flat
//! `Float64Array`s that the page draws on canvases.

use dmcanc::compensation::{fit_compensation, FitParams};
use dmcanc::dsp::{amplitude_db, magnitude_response};
use dmcanc::harness::{compare, Algorithm, ExperimentConfig, Setup, DB_FLOOR};
use dmcanc::plant::synthesize_plant;
use wasm_bindgen::prelude::*;

const NFFT: usize = 1024;

fn demo_config(seed: u64, cross_gain_db: f64) -> ExperimentConfig {
    ExperimentConfig {
        plant_seed: seed,
        cross_gain_db,
        n_runs: 1,
        duration: 40_000,
        window: 1000,
        decimation: 200,
        comp_samples: 50_000,
        ..ExperimentConfig::ci()
    }
}

fn js(e: dmcanc::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Number of points per spectrum returned by [`path_spectra`].
#[wasm_bindgen]
pub fn spectrum_bins() -> usize {
    NFFT / 2 + 1
}

/// Magnitude responses (dB) of the three paths arriving at sensor 1, then
/// its primary path, each [`spectrum_bins`] long, 0 to 4 kHz.
#[wasm_bindgen]
pub fn path_spectra(seed: u32, cross_gain_db: f64) -> Result<Vec<f64>, JsError> {
    let plant = synthesize_plant(&demo_config(seed.into(), cross_gain_db).plant_spec()).map_err(js)?;
    let mut out = Vec::with_capacity(4 * spectrum_bins());
    let paths = (0..plant.n_nodes())
        .map(|m| plant.secondary(0, m))
        .chain([plant.primary(0)]);
    for p in paths {
        out.extend(
            magnitude_response(p.coeffs(), NFFT)
                .into_iter()
                .map(|m| amplitude_db(m, DB_FLOOR)),
        );
    }
    Ok(out)
}

/// Mean MSE traces (dB) of the centralized and the distributed controller,
/// concatenated, followed by the two final values. `comm` is `ideal`,
/// `delay:<samples>` or `intermittent:<events per second>`.
#[wasm_bindgen]
pub fn compare_mse(seed: u32, cross_gain_db: f64, mu: f64, comm: &str) -> Result<Vec<f64>, JsError> {
    let cfg = ExperimentConfig {
        mu_psi: mu,
        comm: comm.to_string(),
        algorithm: Algorithm::Dmcanc,
        ..demo_config(seed.into(), cross_gain_db)
    };
    cfg.validate().map_err(js)?;
    let setup = Setup::build(&cfg).map_err(js)?;
    let c = compare(&cfg, &setup).map_err(js)?;
    let mut out = c.centralized.trace.mean_db();
    out.extend(c.dmcanc.trace.mean_db());
    out.push(c.centralized.trace.final_mean_db());
    out.push(c.dmcanc.trace.final_mean_db());
    Ok(out)
}

/// Block error power (dB) while identifying `c_12` offline, followed by the
/// final misfit of `s_11 * c_12` against `s_12`.
#[wasm_bindgen]
pub fn compensation_trace(seed: u32, mu_c: f64, taps: usize) -> Result<Vec<f64>, JsError> {
    let cfg = demo_config(seed.into(), -20.0);
    let plant = synthesize_plant(&cfg.plant_spec()).map_err(js)?;
    let params = FitParams {
        mu: mu_c,
        n_samples: cfg.comp_samples,
        taps,
        seed: cfg.comp_seed,
    };
    let (_, report) = fit_compensation(&plant, 0, 1, plant.secondary(0, 0), &params).map_err(js)?;
    let mut out = report.error_power_trace;
    out.push(report.residual_db);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectra_layout() {
        let s = path_spectra(1, -10.0).unwrap();
        assert_eq!(s.len(), 4 * spectrum_bins());
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn compensation_trace_settles() {
        let t = compensation_trace(1, 1e-3, 16).unwrap();
        let residual = *t.last().unwrap();
        assert!(residual < -15.0, "{residual}");
        assert!(t[t.len() - 2] < t[0]);
    }
}
