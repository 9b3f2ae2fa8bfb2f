use super::{calibrate, measure, point_rng, ScanConfig, ScanError};
use crate::analysis::{visibility, visibility_to_mz, xy_visibility, CalibrationCurve, StrainMap};
use crate::noise::{apd_noise, sample_reading, visibility_uncertainty};
use crate::sample::{voxel_ensemble, ConfocalPSF, Footprint};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    /// XY-normalized when the grid has more than one depth.
    Auto,
    X,
    Xy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfocalConfig {
    pub psf: ConfocalPSF,
    /// PSF sample nodes per axis.
    pub nodes: [usize; 3],
    pub readout: ReadoutMode,
    pub noise: bool,
    /// Cells below this fraction of the median fringe amplitude are masked.
    pub mask_fraction: f64,
}

impl Default for ConfocalConfig {
    fn default() -> Self {
        Self {
            psf: ConfocalPSF::default(),
            nodes: [5, 5, 5],
            readout: ReadoutMode::Auto,
            noise: true,
            mask_fraction: 0.2,
        }
    }
}

struct Cell {
    mz: f64,
    sigma: f64,
    amplitude: f64,
    ok: bool,
}

fn xy_curve(curve: &CalibrationCurve) -> CalibrationCurve {
    CalibrationCurve::xy(curve.tau1, curve.phi0).with_operating_point(curve.operating_point)
}

/// Confocal map: PSF-weighted ensemble per point, strain-CPMG at the
/// calibrated operating point, noisy APD readings, visibility → Mz.
pub fn run_confocal_scan(cfg: &ScanConfig) -> Result<StrainMap, ScanError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let geo = cfg.grid.geometry()?;
    let cc = &cfg.confocal;
    if cc.psf.sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(ScanError::Config("PSF widths must be positive".into()));
    }
    let xy = match cc.readout {
        ReadoutMode::Auto => geo.dims[2] > 1,
        ReadoutMode::X => false,
        ReadoutMode::Xy => true,
    };
    let cal = calibrate(cfg)?;
    let curve = cal.curve.clone();
    let s = &cfg.sequence;
    let footprint = Footprint::psf(&cc.psf, cc.nodes);
    let pairs = if xy { s.pairs(s.dwell / 2.0) } else { s.pairs(s.dwell) };
    let idx: Vec<usize> = (0..geo.len()).collect();
    let cells = crate::par::map(&idx, |&k| -> Result<Cell, ScanError> {
        let pos = geo.position(k);
        let ens = voxel_ensemble::<ChaCha8Rng>(pos, &footprint, &cfg.scene, &cfg.ensemble, cfg.nv, None)?;
        let fl = measure(cfg, &ens, curve.operating_point, cfg.profiles.mw_scale(pos[2]))?;
        let v = s.signal_voltage * cfg.profiles.laser_scale(pos[0], pos[1]);
        let budget = apd_noise(&cfg.apd, cfg.apd.optical_power(v))?;
        let mut rng = point_rng(seed, STREAM, k as u64);
        let mut read = |f: f64| if cc.noise { sample_reading(v * f, &budget, pairs, &mut rng) } else { v * f };
        let (fxp, fxm) = (read(fl.f_x_plus), read(fl.f_x_minus));
        let sigma_nu = visibility_uncertainty(&budget, v, v)? / (pairs as f64).sqrt();
        if xy {
            let (fyp, fym) = (read(fl.f_y_plus), read(fl.f_y_minus));
            let (nu, r) = xy_visibility(fxp, fxm, fyp, fym)?;
            let fi = 0.25 * (fxp + fxm + fyp + fym);
            let amplitude = r / (2.0 * fi);
            // σθ = σΔ/r with σΔ the noise on one difference
            let sigma_theta = (2f64.sqrt() * budget.v_total / (pairs as f64).sqrt()) / r;
            let sigma = sigma_theta / (2.0 * PI * curve.tau1);
            Ok(match visibility_to_mz(nu, &xy_curve(&curve), 0.0) {
                Ok(e) => Cell { mz: e.mz, sigma, amplitude, ok: true },
                Err(_) => Cell { mz: 0.0, sigma, amplitude, ok: false },
            })
        } else {
            let nu = visibility(fxp, fxm)?;
            Ok(match visibility_to_mz(nu, &curve, 0.0) {
                Ok(e) => Cell { mz: e.mz, sigma: e.sigma(sigma_nu), amplitude: curve.amplitude, ok: true },
                Err(_) => Cell { mz: 0.0, sigma: 0.0, amplitude: curve.amplitude, ok: false },
            })
        }
    });
    let mut map = StrainMap::new(geo);
    for (k, c) in cells.into_iter().enumerate() {
        let c = c?;
        if c.ok {
            map.set(k, c.mz, c.sigma, c.amplitude);
        } else {
            map.amplitude[k] = c.amplitude;
            map.mask(k);
        }
    }
    if xy {
        map.apply_amplitude_mask(cc.mask_fraction);
    }
    map.metadata = cfg.metadata(map.len() as f64 * s.dwell);
    map.metadata.extra = serde_json::json!({
        "mode": "confocal",
        "readout": if xy { "xy" } else { "x" },
        "dwell_s": s.dwell,
        "pairs_per_readout": pairs,
        "calibration": { "amplitude": curve.amplitude, "tau1": curve.tau1, "phi0": curve.phi0, "operating_point_hz": curve.operating_point },
    });
    Ok(map)
}
