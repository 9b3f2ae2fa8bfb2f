//! Browser bindings. Each export takes plain numbers and returns a JSON
//! string; failures come back as `{"error": "..."}`.

use nvstrain::analysis::{fit_odmr, odmr_to_maps, synth_odmr, OdmrConfig};
use nvstrain::noise::{noise_report, APDConfig, FloorInputs};
use nvstrain::scan::{calibrate, ScanConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Sweep {
    delta_cm: Vec<f64>,
    nu_cm: Vec<f64>,
    delta_diff: Vec<f64>,
    nu_diff: Vec<f64>,
    amplitude: f64,
    period: f64,
    operating_point: f64,
    diff_amplitude: f64,
}

#[derive(Serialize)]
struct Spectrum {
    frequencies: Vec<f64>,
    contrast: Vec<f64>,
    fit: Vec<f64>,
    centers: Vec<f64>,
    mz: f64,
    bz: f64,
    reduced_chi2: f64,
}

#[derive(Serialize)]
struct Budget {
    name: String,
    value: f64,
    unit: String,
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())) {
        Ok(s) => s,
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

/// Strain-CPMG visibility against δcm and δdiff on a strain-free ensemble.
pub fn calibration_sweep(
    tau1_us: f64,
    td_us: f64,
    contrast: f64,
    n_swaps: usize,
    points: usize,
) -> Result<impl Serialize, String> {
    let mut cfg = ScanConfig { seed: Some(0), ..Default::default() };
    cfg.sequence.tau1 = tau1_us * 1e-6;
    cfg.sequence.contrast = contrast;
    cfg.sequence.n_swaps = n_swaps;
    cfg.ensemble.td = td_us * 1e-6;
    cfg.ensemble.strata = 65;
    cfg.calibration.points = points;
    let r = calibrate(&cfg).map_err(|e| e.to_string())?;
    Ok(Sweep {
        delta_cm: r.cm_sweep.x,
        nu_cm: r.cm_sweep.y,
        delta_diff: r.diff_sweep.x,
        nu_diff: r.diff_sweep.y,
        amplitude: r.curve.amplitude,
        period: r.curve.period(),
        operating_point: r.curve.operating_point,
        diff_amplitude: r.diff_amplitude,
    })
}

/// Four-class CW-ODMR spectrum for one Mz, noisy, with its fit.
pub fn odmr_fit(mz_khz: f64, bz_mt: f64, noise: f64, seed: u64) -> Result<impl Serialize, String> {
    let cfg = OdmrConfig { bz: bz_mt * 1e-3, noise, ..OdmrConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = synth_odmr(&cfg, &[(mz_khz * 1e3, 1.0)], Some(&mut rng));
    let fit = fit_odmr(&spec, 2, cfg.hyperfine).map_err(|e| e.to_string())?;
    let (fp, fm) = fit.aligned().ok_or("fewer than two line groups")?;
    let (mz, bz) = odmr_to_maps(fp, fm, cfg.d, cfg.gamma).map_err(|e| e.to_string())?;
    let curve: Vec<f64> = spec
        .frequencies
        .iter()
        .map(|&f| {
            fit.baseline
                - fit
                    .groups
                    .iter()
                    .map(|g| {
                        [-cfg.hyperfine, 0.0, cfg.hyperfine]
                            .iter()
                            .map(|h| nvstrain::analysis::lorentzian_dip(f, g.center + h, g.fwhm, g.depth))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
        })
        .collect();
    Ok(Spectrum {
        centers: fit.groups.iter().map(|g| g.center).collect(),
        reduced_chi2: fit.reduced_chi2(),
        frequencies: spec.frequencies,
        contrast: spec.contrast,
        fit: curve,
        mz,
        bz,
    })
}

/// APD noise chain down to the strain floor.
pub fn noise_budget(signal_mv: f64, rep_rate: f64, amplitude: f64, tau1_us: f64) -> Result<impl Serialize, String> {
    let inputs = FloorInputs {
        signal_voltage: signal_mv * 1e-3,
        rep_rate,
        amplitude,
        tau1: tau1_us * 1e-6,
        ..FloorInputs::default()
    };
    let r = noise_report(&APDConfig::default(), &inputs).map_err(|e| e.to_string())?;
    Ok(r.into_iter().map(|e| Budget { name: e.name, value: e.value, unit: e.unit }).collect::<Vec<_>>())
}

#[wasm_bindgen(js_name = calibrationSweep)]
pub fn calibration_sweep_js(tau1_us: f64, td_us: f64, contrast: f64, n_swaps: usize, points: usize) -> String {
    to_json(calibration_sweep(tau1_us, td_us, contrast, n_swaps, points))
}

#[wasm_bindgen(js_name = odmrFit)]
pub fn odmr_fit_js(mz_khz: f64, bz_mt: f64, noise: f64, seed: u32) -> String {
    to_json(odmr_fit(mz_khz, bz_mt, noise, seed as u64))
}

#[wasm_bindgen(js_name = noiseBudget)]
pub fn noise_budget_js(signal_mv: f64, rep_rate: f64, amplitude: f64, tau1_us: f64) -> String {
    to_json(noise_budget(signal_mv, rep_rate, amplitude, tau1_us))
}
