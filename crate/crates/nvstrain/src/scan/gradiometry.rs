use super::{calibrate, measure, point_rng, ScanConfig, ScanError};
use crate::analysis::{visibility, visibility_to_mz, MzEstimate, StrainMap};
use crate::noise::{apd_noise, sample_reading, visibility_uncertainty, NoiseBudget};
use crate::sample::{d_shift, voxel_ensemble, Footprint};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradiometryConfig {
    /// Reference position (µm, physical depth); none runs single-position mode.
    pub reference: Option<[f64; 3]>,
    /// Reference/scan alternations per grid point.
    pub cycles_per_point: usize,
    /// Per-update forgetting factor of the drift tracker (1 = keep all history).
    pub forgetting: f64,
    pub noise: bool,
}

impl Default for GradiometryConfig {
    fn default() -> Self {
        Self { reference: None, cycles_per_point: 10, forgetting: 1.0, noise: true }
    }
}

/// Recursive least-squares fit of an (offset, rate) drift model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriftTracker {
    forgetting: f64,
    t0: f64,
    w: f64,
    st: f64,
    stt: f64,
    sy: f64,
    sty: f64,
}

impl DriftTracker {
    pub fn new(forgetting: f64) -> Self {
        Self { forgetting, t0: f64::NAN, ..Default::default() }
    }

    pub fn update(&mut self, t: f64, y: f64) {
        if self.t0.is_nan() {
            self.t0 = t;
        }
        let l = self.forgetting;
        let x = t - self.t0;
        self.w = l * self.w + 1.0;
        self.st = l * self.st + x;
        self.stt = l * self.stt + x * x;
        self.sy = l * self.sy + y;
        self.sty = l * self.sty + x * y;
    }

    /// (offset at `t0`, rate); rate is zero until two distinct times are seen.
    fn line(&self) -> Option<(f64, f64)> {
        if self.w == 0.0 {
            return None;
        }
        let (mt, my) = (self.st / self.w, self.sy / self.w);
        let var = self.stt / self.w - mt * mt;
        let rate = if var > 1e-12 * (1.0 + mt * mt) { (self.sty / self.w - mt * my) / var } else { 0.0 };
        Some((my - rate * mt, rate))
    }

    pub fn predict(&self, t: f64) -> Option<f64> {
        self.line().map(|(a, b)| a + b * (t - self.t0))
    }

    pub fn rate(&self) -> f64 {
        self.line().map_or(0.0, |l| l.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftLogEntry {
    pub t: f64,
    /// Servo correction applied to the drive, Hz.
    pub correction: f64,
    /// Injected shift of D, Hz.
    pub injected: f64,
    /// Reference reading relative to the drive, Hz.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub index: usize,
    pub t: f64,
    pub mz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradiometryResult {
    /// Gradiometry mode: Mz relative to the reference. Single-position mode:
    /// Mz including any drift.
    pub map: StrainMap,
    pub log: Vec<DriftLogEntry>,
    pub series: Vec<SeriesPoint>,
    /// Analytic 1σ of one scan reading, Hz.
    pub reading_sigma: f64,
}

/// Noiseless fringe of one voxel around the operating point:
/// ν(c) = a·sin(θ + 2π·c·τ1) for drive offset c.
struct Fringe {
    a: f64,
    theta: f64,
    voltage: f64,
    budget: NoiseBudget,
}

fn fringe(cfg: &ScanConfig, pos: [f64; 3], op: f64) -> Result<Fringe, ScanError> {
    let fp = Footprint::psf(&cfg.confocal.psf, cfg.confocal.nodes);
    let ens = voxel_ensemble::<ChaCha8Rng>(pos, &fp, &cfg.scene, &cfg.ensemble, cfg.nv, None)?;
    let fl = measure(cfg, &ens, op, cfg.profiles.mw_scale(pos[2]))?;
    let nx = visibility(fl.f_x_plus, fl.f_x_minus)?;
    let ny = visibility(fl.f_y_plus, fl.f_y_minus)?;
    let voltage = cfg.sequence.signal_voltage * cfg.profiles.laser_scale(pos[0], pos[1]);
    let budget = apd_noise(&cfg.apd, cfg.apd.optical_power(voltage))?;
    Ok(Fringe { a: nx.hypot(ny), theta: nx.atan2(ny), voltage, budget })
}

fn in_grid(cfg: &ScanConfig, p: [f64; 3]) -> bool {
    let g = &cfg.grid;
    let zs: Vec<f64> = g.depths.iter().map(|d| d * g.depth_scale).collect();
    (0..2).all(|k| p[k] >= g.origin[k] - 1e-9 && p[k] <= g.origin[k] + g.extent[k] + 1e-9)
        && p[2] >= zs[0] - 1e-9
        && p[2] <= zs[zs.len() - 1] + 1e-9
}

/// Alternates reference and scan readings with a drive-frequency servo on the
/// reference; without a reference, reads each point directly.
pub fn run_gradiometry_scan(cfg: &ScanConfig) -> Result<GradiometryResult, ScanError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let gc = &cfg.gradiometry;
    if gc.cycles_per_point == 0 || !(gc.forgetting > 0.0 && gc.forgetting <= 1.0) {
        return Err(ScanError::Config("cycles_per_point ≥ 1 and forgetting in (0, 1] required".into()));
    }
    if let Some(r) = gc.reference {
        if !in_grid(cfg, r) {
            return Err(ScanError::Config(format!("reference {r:?} lies outside the grid")));
        }
    }
    let geo = cfg.grid.geometry()?;
    let curve = calibrate(cfg)?.curve;
    let s = &cfg.sequence;
    let tau1 = curve.tau1;
    let pairs = s.pairs(s.dwell);
    let limit = 0.25 / tau1;
    let idx: Vec<usize> = (0..geo.len()).collect();
    let fringes = crate::par::map(&idx, |&k| fringe(cfg, geo.position(k), curve.operating_point));
    let fringes = fringes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reference = gc.reference.map(|p| fringe(cfg, p, curve.operating_point)).transpose()?;
    let mut rng = point_rng(seed, STREAM, 0);
    let read = |f: &Fringe, c: f64, t: f64, rng: &mut ChaCha8Rng| -> Result<MzEstimate, ScanError> {
        let nu = f.a * (f.theta + 2.0 * PI * (c - d_shift(t, &cfg.profiles)) * tau1).sin();
        let (ep, em) = (f.voltage * (1.0 + nu), f.voltage * (1.0 - nu));
        let (fp, fm) = if gc.noise {
            (sample_reading(ep, &f.budget, pairs, rng), sample_reading(em, &f.budget, pairs, rng))
        } else {
            (ep, em)
        };
        Ok(visibility_to_mz(visibility(fp, fm)?, &curve, 0.0)?)
    };
    let mut tracker = DriftTracker::new(gc.forgetting);
    let mut log = Vec::new();
    let mut series = Vec::new();
    let mut map = StrainMap::new(geo.clone());
    let mut t = 0.0;
    for (k, f) in fringes.iter().enumerate() {
        let mut acc = Vec::with_capacity(gc.cycles_per_point);
        for _ in 0..gc.cycles_per_point {
            let mut c = 0.0;
            if let Some(r) = &reference {
                c = tracker.predict(t).unwrap_or(0.0);
                // the reference fringe is lost once a reading reaches its extremum
                let est = read(r, c, t, &mut rng).map_err(|_| ScanError::ServoDivergence {
                    time: t,
                    residual: f64::NAN,
                    limit,
                })?;
                let residual = est.shift;
                if est.saturated || residual.abs() > limit {
                    return Err(ScanError::ServoDivergence { time: t, residual, limit });
                }
                tracker.update(t, residual + c);
                log.push(DriftLogEntry { t, correction: c, injected: d_shift(t, &cfg.profiles), residual });
                t += s.dwell;
                c = tracker.predict(t).unwrap_or(0.0);
            }
            if let Ok(v) = read(f, c, t, &mut rng).map(|e| e.shift) {
                acc.push(v);
                series.push(SeriesPoint { index: k, t, mz: v });
            }
            t += s.dwell;
        }
        let sigma_nu = visibility_uncertainty(&f.budget, f.voltage, f.voltage)? / (pairs as f64).sqrt();
        let sigma1 = sigma_nu / (2.0 * PI * tau1 * f.a);
        if acc.is_empty() {
            map.mask(k);
        } else {
            let mean = acc.iter().sum::<f64>() / acc.len() as f64;
            map.set(k, mean, sigma1 / (acc.len() as f64).sqrt(), f.a);
        }
    }
    let reading_sigma = fringes
        .first()
        .map(|f| {
            visibility_uncertainty(&f.budget, f.voltage, f.voltage)
                .map(|s| s / (pairs as f64).sqrt() / (2.0 * PI * tau1 * f.a))
        })
        .transpose()?
        .unwrap_or(0.0);
    map.metadata = cfg.metadata(t);
    map.metadata.extra = serde_json::json!({
        "mode": if reference.is_some() { "gradiometry" } else { "single_position" },
        "dwell_s": s.dwell,
        "cycles_per_point": gc.cycles_per_point,
        "drift_hz_per_s": cfg.profiles.drift_hz_per_s(),
        "tracker_rate_hz_per_s": tracker.rate(),
    });
    Ok(GradiometryResult { map, log, series, reading_sigma })
}
