use super::{point_rng, ScanConfig, ScanError};
use crate::analysis::{fit_odmr, odmr_to_maps, synth_odmr, OdmrConfig, StrainMap};
use crate::sample::{footprint_samples, merge_offsets, Footprint};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdmrScanConfig {
    /// Spectrum settings; `d` and `gamma` are taken from `nv`.
    pub spectrum: OdmrConfig,
    /// PSF sample nodes per axis (the confocal PSF is used).
    pub nodes: [usize; 3],
    /// Mz samples closer than this are merged, Hz.
    pub merge_resolution: f64,
    pub n_classes: usize,
    /// Cells whose reduced χ² exceeds this are masked; 0 disables.
    pub max_reduced_chi2: f64,
}

impl Default for OdmrScanConfig {
    fn default() -> Self {
        Self {
            spectrum: OdmrConfig { noise: 2e-4, ..OdmrConfig::default() },
            nodes: [3, 3, 3],
            merge_resolution: 1e3,
            n_classes: 2,
            max_reduced_chi2: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdmrMapResult {
    pub map: StrainMap,
    /// Aligned-class field per cell, T.
    pub bz: Vec<f64>,
    pub reduced_chi2: Vec<f64>,
}

struct Cell {
    mz: f64,
    sigma: f64,
    depth: f64,
    bz: f64,
    chi2: f64,
    ok: bool,
}

/// Conventional ODMR strain map: synthetic spectrum from the PSF-weighted Mz
/// distribution, multi-Lorentzian fit, outer pair → (Mz, Bz).
pub fn run_odmr_map(cfg: &ScanConfig) -> Result<OdmrMapResult, ScanError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let geo = cfg.grid.geometry()?;
    let o = &cfg.odmr;
    if o.n_classes == 0 || o.spectrum.n_points < 8 || !(o.spectrum.f_stop > o.spectrum.f_start) {
        return Err(ScanError::Config("ODMR needs n_classes ≥ 1 and an ascending sweep of ≥ 8 points".into()));
    }
    let spec_cfg = OdmrConfig { d: cfg.nv.d, gamma: cfg.nv.gamma, ..o.spectrum.clone() };
    let footprint = Footprint::psf(&cfg.confocal.psf, o.nodes);
    let idx: Vec<usize> = (0..geo.len()).collect();
    let cells = crate::par::map(&idx, |&k| -> Result<Cell, ScanError> {
        let pos = geo.position(k);
        let samples = footprint_samples::<ChaCha8Rng>(pos, &footprint, &cfg.scene, None)?;
        let samples = merge_offsets(&samples, o.merge_resolution);
        let mut rng = point_rng(seed, STREAM, k as u64);
        let spec = synth_odmr(&spec_cfg, &samples, Some(&mut rng));
        let failed = |chi2: f64| Cell { mz: 0.0, sigma: 0.0, depth: 0.0, bz: f64::NAN, chi2, ok: false };
        let Ok(fit) = fit_odmr(&spec, o.n_classes, spec_cfg.hyperfine) else {
            return Ok(failed(f64::NAN));
        };
        let chi2 = fit.reduced_chi2();
        let Some((fp, fm)) = fit.aligned() else {
            return Ok(failed(chi2));
        };
        let Ok((mz, bz)) = odmr_to_maps(fp, fm, spec_cfg.d, spec_cfg.gamma) else {
            return Ok(failed(chi2));
        };
        let (gp, gm) = (fit.groups[fit.groups.len() - 1], fit.groups[0]);
        let sigma = 0.5 * gp.sigma_center.hypot(gm.sigma_center);
        let ok = fit.converged && (o.max_reduced_chi2 <= 0.0 || chi2 <= o.max_reduced_chi2);
        Ok(Cell { mz, sigma, depth: 0.5 * (gp.depth + gm.depth), bz, chi2, ok })
    });
    let mut map = StrainMap::new(geo.clone());
    let mut bz = vec![f64::NAN; geo.len()];
    let mut reduced_chi2 = vec![f64::NAN; geo.len()];
    for (k, c) in cells.into_iter().enumerate() {
        let c = c?;
        reduced_chi2[k] = c.chi2;
        if c.ok {
            map.set(k, c.mz, c.sigma, c.depth);
            bz[k] = c.bz;
        } else {
            map.mask(k);
        }
    }
    let sweep_time = cfg.sequence.dwell * geo.len() as f64;
    map.metadata = cfg.metadata(sweep_time);
    map.metadata.extra = serde_json::json!({
        "mode": "odmr",
        "n_points": spec_cfg.n_points,
        "sweep_hz": [spec_cfg.f_start, spec_cfg.f_stop],
        "noise": spec_cfg.noise,
    });
    Ok(OdmrMapResult { map, bz, reduced_chi2 })
}
