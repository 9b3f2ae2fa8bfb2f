use super::{calibrate, measure, point_rng, ScanConfig, ScanError};
use crate::analysis::{visibility_to_mz, xy_visibility_from_differences, CalibrationCurve, GridGeometry, StrainMap};
use crate::noise::{lockin_acquire, LockInCameraConfig, LockInFrame};
use crate::sample::{d_shift, strain_from_mz, voxel_ensemble, Footprint};
use crate::sequence::FluorescenceResult;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const STREAM_ACQ: u64 = 3;
const STREAM_OFFSETS: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QdmConfig {
    /// Field of view edge, µm.
    pub fov: f64,
    pub pixels: usize,
    /// Lower-left corner of each FOV, acquired in this order.
    pub origins: Vec<[f64; 2]>,
    /// Depth of the imaged layer, µm.
    pub depth: f64,
    /// Pixel footprint nodes per axis.
    pub footprint_nodes: [usize; 3],
    /// Acquisition time at each of the two drive frequencies, s.
    pub dwell_per_frequency: f64,
    /// Idle time between FOVs, s.
    pub fov_overhead: f64,
    /// Photoelectrons per exposure at the laser centre.
    pub flux: f64,
    /// Range of random fixed exposure offsets, LSB (used when the camera
    /// config lists none).
    pub random_offsets: i32,
    pub noise: bool,
    pub mask_fraction: f64,
    pub histogram_bins: usize,
}

impl Default for QdmConfig {
    fn default() -> Self {
        Self {
            fov: 150.0,
            pixels: 32,
            origins: vec![[0.0, 0.0]],
            depth: 0.0,
            footprint_nodes: [5, 5, 1],
            dwell_per_frequency: 0.5,
            fov_overhead: 0.0,
            flux: 1e5,
            random_offsets: 20,
            noise: true,
            mask_fraction: 0.2,
            histogram_bins: 20,
        }
    }
}

impl QdmConfig {
    pub fn pixel_size(&self) -> f64 {
        self.fov / self.pixels as f64
    }

    pub fn geometry(&self, origin: [f64; 2]) -> GridGeometry {
        let p = self.pixel_size();
        GridGeometry::plane([origin[0] + 0.5 * p, origin[1] + 0.5 * p], [p, p], [self.pixels, self.pixels], self.depth)
    }

    pub fn fov_time(&self) -> f64 {
        2.0 * self.dwell_per_frequency
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QdmFov {
    /// Mz includes the D drift at acquisition time (removed by stitching).
    pub map: StrainMap,
    /// Per-pixel 1 s Allan-equivalent strain sensitivity, 1/√Hz.
    pub allan_1s: Vec<f64>,
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
    pub start_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QdmResult {
    pub fovs: Vec<QdmFov>,
    pub frame_rate: f64,
    pub frames_per_frequency: usize,
    /// Virtual acquisition time per FOV, s.
    pub fov_time: f64,
    /// FOV area per second of acquisition, µm²/s.
    pub survey_rate: f64,
}

fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    if v.is_empty() || bins == 0 {
        return (Vec::new(), Vec::new());
    }
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|k| lo + w * k as f64).collect();
    let mut counts = vec![0; bins];
    for x in v {
        counts[(((x - lo) / w) as usize).min(bins - 1)] += 1;
    }
    (edges, counts)
}

struct Block {
    x: LockInFrame,
    y: LockInFrame,
    /// Per-pixel sum and sum of squares of frame means.
    x_moments: Vec<(f64, f64)>,
    y_moments: Vec<(f64, f64)>,
}

fn acquire_block(
    fl: &[FluorescenceResult],
    flux: &[f64],
    camera: &LockInCameraConfig,
    frames: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Block, ScanError> {
    let n = fl.len();
    let empty = || LockInFrame { sums: vec![0; n], count: 0 };
    let mut b = Block { x: empty(), y: empty(), x_moments: vec![(0.0, 0.0); n], y_moments: vec![(0.0, 0.0); n] };
    let xa: Vec<f64> = (0..n).map(|i| flux[i] * fl[i].f_x_plus).collect();
    let xb: Vec<f64> = (0..n).map(|i| flux[i] * fl[i].f_x_minus).collect();
    let ya: Vec<f64> = (0..n).map(|i| flux[i] * fl[i].f_y_plus).collect();
    let yb: Vec<f64> = (0..n).map(|i| flux[i] * fl[i].f_y_minus).collect();
    let mut rng = rng;
    for k in 0..frames {
        let is_x = k % 2 == 0;
        let (a, bb) = if is_x { (&xa, &xb) } else { (&ya, &yb) };
        let f = lockin_acquire(a, bb, camera, rng.as_deref_mut())?;
        let (acc, mom) = if is_x { (&mut b.x, &mut b.x_moments) } else { (&mut b.y, &mut b.y_moments) };
        for i in 0..n {
            acc.sums[i] += f.sums[i];
            let m = f.sums[i] as f64 / f.count as f64;
            mom[i].0 += m;
            mom[i].1 += m * m;
        }
        acc.count += f.count;
    }
    Ok(b)
}

/// Variance of the mean of `frames` frame means.
fn var_of_mean(m: (f64, f64), frames: usize) -> f64 {
    if frames < 2 {
        return 0.0;
    }
    let n = frames as f64;
    let mean = m.0 / n;
    ((m.1 / n - mean * mean) * n / (n - 1.0)).max(0.0) / n
}

/// Widefield imaging: per-pixel footprint ensembles, lock-in frames at two
/// drive frequencies δop ± 1/(4τ1) in X and Y readout, offset-free
/// differences → νXY → Mz, fringe amplitude and 1 s sensitivity.
pub fn run_qdm_imaging(cfg: &ScanConfig) -> Result<QdmResult, ScanError> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let q = &cfg.qdm;
    if q.pixels == 0 || !(q.fov > 0.0) || !(q.dwell_per_frequency > 0.0) || !(q.flux > 0.0) || q.origins.is_empty() {
        return Err(ScanError::Config(
            "QDM needs pixels ≥ 1, positive fov, dwell and flux, and at least one origin".into(),
        ));
    }
    let npx = q.pixels * q.pixels;
    let mut camera = cfg.camera.clone();
    camera.validate(npx)?;
    if camera.offsets.is_empty() && q.random_offsets > 0 {
        let mut r = point_rng(seed, STREAM_OFFSETS, 0);
        camera.offsets =
            (0..npx).map(|_| [0; 4].map(|_: i32| r.random_range(-q.random_offsets..=q.random_offsets))).collect();
    }
    let curve = calibrate(cfg)?.curve;
    let xy = CalibrationCurve::xy(curve.tau1, curve.phi0).with_operating_point(curve.operating_point);
    let quarter = 0.25 / curve.tau1;
    let frames = (q.dwell_per_frequency * camera.frame_rate()).floor() as usize;
    if frames < 2 {
        return Err(ScanError::Config("dwell per frequency shorter than two camera frames".into()));
    }
    let footprint = Footprint::pixel([q.pixel_size(); 2], 0.0, q.footprint_nodes);
    let fov_period = q.fov_time() + q.fov_overhead;
    let mut fovs = Vec::with_capacity(q.origins.len());
    for (fi, &origin) in q.origins.iter().enumerate() {
        let geo = q.geometry(origin);
        let t0 = fi as f64 * fov_period;
        let shifts = [d_shift(t0, &cfg.profiles), d_shift(t0 + q.dwell_per_frequency, &cfg.profiles)];
        let idx: Vec<usize> = (0..npx).collect();
        let fl = crate::par::map(&idx, |&k| -> Result<[FluorescenceResult; 2], ScanError> {
            let pos = geo.position(k);
            let ens = voxel_ensemble::<ChaCha8Rng>(pos, &footprint, &cfg.scene, &cfg.ensemble, cfg.nv, None)?;
            let mw = cfg.profiles.mw_scale(pos[2]);
            Ok([
                measure(cfg, &ens, curve.operating_point + quarter - shifts[0], mw)?,
                measure(cfg, &ens, curve.operating_point - quarter - shifts[1], mw)?,
            ])
        });
        let fl = fl.into_iter().collect::<Result<Vec<_>, _>>()?;
        let flux: Vec<f64> = (0..npx)
            .map(|k| {
                let p = geo.position(k);
                q.flux * cfg.profiles.laser_scale(p[0], p[1])
            })
            .collect();
        let mut rng = point_rng(seed, STREAM_ACQ, fi as u64);
        let blocks: Vec<Block> = (0..2)
            .map(|b| {
                let f: Vec<FluorescenceResult> = fl.iter().map(|p| p[b]).collect();
                acquire_block(&f, &flux, &camera, frames, if q.noise { Some(&mut rng) } else { None })
            })
            .collect::<Result<_, _>>()?;
        let dx = blocks[0].x.difference(&blocks[1].x)?;
        let dy = blocks[0].y.difference(&blocks[1].y)?;
        let (nxf, nyf) = (frames.div_ceil(2), frames / 2);
        let mut map = StrainMap::new(geo.clone());
        let mut allan = vec![f64::NAN; npx];
        for k in 0..npx {
            let var_x = var_of_mean(blocks[0].x_moments[k], nxf) + var_of_mean(blocks[1].x_moments[k], nxf);
            let var_y = var_of_mean(blocks[0].y_moments[k], nyf) + var_of_mean(blocks[1].y_moments[k], nyf);
            let sigma_d = (0.5 * (var_x + var_y)).sqrt();
            // D_X ∝ 2cosθ, D_Y ∝ −2sinθ
            let Ok((nu, r)) = xy_visibility_from_differences(-dy[k], dx[k]) else {
                map.mask(k);
                continue;
            };
            let amplitude = r * camera.lsb / (4.0 * q.flux);
            let sigma = sigma_d / r / (2.0 * PI * curve.tau1);
            match visibility_to_mz(nu, &xy, 0.0) {
                Ok(e) => {
                    map.set(k, e.mz, sigma, amplitude);
                    allan[k] = strain_from_mz(sigma).abs() * q.fov_time().sqrt();
                }
                Err(_) => {
                    map.amplitude[k] = amplitude;
                    map.mask(k);
                }
            }
        }
        map.apply_amplitude_mask(q.mask_fraction);
        for k in 0..npx {
            if map.masked[k] {
                allan[k] = f64::NAN;
            }
        }
        let (edges, counts) = histogram(&allan, q.histogram_bins);
        map.metadata = cfg.metadata(q.fov_time());
        map.metadata.extra = serde_json::json!({
            "mode": "qdm",
            "fov_index": fi,
            "start_time_s": t0,
            "frame_rate_hz": camera.frame_rate(),
            "frames_per_frequency": frames,
            "dwell_per_frequency_s": q.dwell_per_frequency,
            "drive_offsets_hz": [curve.operating_point + quarter, curve.operating_point - quarter],
            "allan_1s_histogram": { "edges": edges, "counts": counts },
        });
        fovs.push(QdmFov { map, allan_1s: allan, histogram_edges: edges, histogram_counts: counts, start_time: t0 });
    }
    Ok(QdmResult {
        fovs,
        frame_rate: camera.frame_rate(),
        frames_per_frequency: frames,
        fov_time: q.fov_time(),
        survey_rate: q.fov * q.fov / q.fov_time(),
    })
}
