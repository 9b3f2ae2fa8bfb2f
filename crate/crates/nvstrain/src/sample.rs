//! Synthetic diamond: strain fields, spin-bath widths, PSF/pixel footprints
//! and instrument profiles.

use crate::sequence::{lorentzian_nodes, EnsembleMember};
use crate::spin::{NVParams, DEFAULT_HYPERFINE};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Mz coupling to ε_zz, Hz per unit strain.
pub const A1: f64 = -8.0e9;
/// Mz coupling to ε_xx + ε_yy, Hz per unit strain.
pub const A2: f64 = -12.4e9;
/// Weighted-average coupling: ε̄ = −Mz / 10.9 GHz.
pub const WEIGHTED_COUPLING: f64 = 10.9e9;
/// Field values are clamped to this magnitude.
pub const MAX_STRAIN: f64 = 1e-2;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("degenerate footprint: width {0} on axis {1}")]
    DegenerateFootprint(f64, usize),
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("invalid scene: {0}")]
    Scene(String),
}

/// Pure-strain tensor. Shear components are carried but do not enter Mz.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrainTensor {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
    pub xz: f64,
    pub yz: f64,
}

impl StrainTensor {
    pub fn from_array(a: [f64; 6]) -> Self {
        Self { xx: a[0], yy: a[1], zz: a[2], xy: a[3], xz: a[4], yz: a[5] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.xx, self.yy, self.zz, self.xy, self.xz, self.yz]
    }

    pub fn isotropic(e: f64) -> Self {
        Self { xx: e, yy: e, zz: e, ..Default::default() }
    }

    /// Isotropic tensor whose Mz equals that of weighted-average strain `ebar`.
    pub fn equivalent(ebar: f64) -> Self {
        Self::isotropic(ebar * WEIGHTED_COUPLING / -(A1 + 2.0 * A2))
    }

    pub fn scale(self, k: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * k))
    }

    pub fn add(self, o: Self) -> Self {
        let (a, b) = (self.to_array(), o.to_array());
        Self::from_array([0, 1, 2, 3, 4, 5].map(|i| a[i] + b[i]))
    }

    pub fn max_abs(self) -> f64 {
        self.to_array().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn clamped(self) -> Self {
        Self::from_array(self.to_array().map(|v| v.clamp(-MAX_STRAIN, MAX_STRAIN)))
    }
}

pub fn mz_from_strain(t: &StrainTensor) -> f64 {
    A1 * t.zz + A2 * (t.xx + t.yy)
}

pub fn strain_from_mz(mz: f64) -> f64 {
    -mz / WEIGHTED_COUPLING
}

/// Primitive amplitude: a weighted-average strain ε̄ (isotropic equivalent)
/// or an explicit tensor `[xx, yy, zz, xy, xz, yz]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Amplitude {
    Equivalent(f64),
    Tensor([f64; 6]),
}

impl Amplitude {
    pub fn tensor(self) -> StrainTensor {
        match self {
            Amplitude::Equivalent(e) => StrainTensor::equivalent(e),
            Amplitude::Tensor(a) => StrainTensor::from_array(a),
        }
    }
}

/// Strain primitives. Positions in µm, z is depth below the surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Uniform {
        strain: Amplitude,
    },
    GaussianBump {
        center: [f64; 3],
        sigma: [f64; 3],
        strain: Amplitude,
    },
    /// Surface scratch along a segment; its transverse width grows with depth
    /// as `width + growth·z` and its strength decays as `exp(−z/decay)`.
    Scratch {
        start: [f64; 2],
        end: [f64; 2],
        width: f64,
        #[serde(default)]
        growth: f64,
        #[serde(default = "infinite")]
        decay: f64,
        strain: Amplitude,
    },
    /// `strain` per µm along `direction`, zero at `origin`.
    LinearGradient {
        origin: [f64; 3],
        direction: [f64; 3],
        strain: Amplitude,
    },
}

fn infinite() -> f64 {
    f64::INFINITY
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

impl Primitive {
    fn weight(&self, r: [f64; 3]) -> f64 {
        match self {
            Primitive::Uniform { .. } => 1.0,
            Primitive::GaussianBump { center, sigma, .. } => {
                (0..3).map(|k| -0.5 * ((r[k] - center[k]) / sigma[k]).powi(2)).sum::<f64>().exp()
            }
            Primitive::Scratch { start, end, width, growth, decay, .. } => {
                let z = r[2].max(0.0);
                let w = width + growth * z;
                let d = segment_distance([r[0], r[1]], *start, *end);
                (-0.5 * (d / w).powi(2) - z / decay).exp()
            }
            Primitive::LinearGradient { origin, direction, .. } => {
                let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                (0..3).map(|k| (r[k] - origin[k]) * direction[k] / n).sum()
            }
        }
    }

    fn amplitude(&self) -> Amplitude {
        match self {
            Primitive::Uniform { strain }
            | Primitive::GaussianBump { strain, .. }
            | Primitive::Scratch { strain, .. }
            | Primitive::LinearGradient { strain, .. } => *strain,
        }
    }

    fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Scene(m.into()));
        if self.amplitude().tensor().max_abs() >= MAX_STRAIN {
            return bad("strain amplitude must stay below 1e-2");
        }
        match self {
            Primitive::GaussianBump { sigma, .. } if sigma.iter().any(|s| !(*s > 0.0)) => {
                bad("bump widths must be positive")
            }
            Primitive::Scratch { width, growth, decay, .. } if !(*width > 0.0) || *growth < 0.0 || !(*decay > 0.0) => {
                bad("scratch needs width > 0, growth ≥ 0, decay > 0")
            }
            Primitive::LinearGradient { direction, .. } if direction.iter().all(|v| *v == 0.0) => {
                bad("gradient direction must be nonzero")
            }
            _ => Ok(()),
        }
    }
}

/// A strain field as a sum of primitives; also the scene-file schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainField {
    #[serde(default, rename = "primitive")]
    pub primitives: Vec<Primitive>,
}

impl StrainField {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, SampleError> {
        let f = Self { primitives };
        f.validate()?;
        Ok(f)
    }

    pub fn uniform(ebar: f64) -> Self {
        Self { primitives: vec![Primitive::Uniform { strain: Amplitude::Equivalent(ebar) }] }
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Strain tensor at `r` (µm), each component clamped to ±1e-2.
    pub fn eval(&self, r: [f64; 3]) -> StrainTensor {
        self.primitives
            .iter()
            .fold(StrainTensor::default(), |acc, p| acc.add(p.amplitude().tensor().scale(p.weight(r))))
            .clamped()
    }

    pub fn mz(&self, r: [f64; 3]) -> f64 {
        mz_from_strain(&self.eval(r))
    }

    pub fn from_toml(s: &str) -> Result<Self, SampleError> {
        let f: Self = toml::from_str(s).map_err(|e| SampleError::Scene(e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    pub fn to_toml(&self) -> Result<String, SampleError> {
        toml::to_string(self).map_err(|e| SampleError::Scene(e.to_string()))
    }
}

/// 3D Gaussian confocal PSF, widths in µm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfocalPSF {
    pub sigma: [f64; 3],
}

impl ConfocalPSF {
    /// σx = σy = s and σz = aspect·s with the given effective volume.
    pub fn from_volume(volume: f64, aspect: f64) -> Self {
        let s = (volume / ((2.0 * PI).powf(1.5) * aspect)).cbrt();
        Self { sigma: [s, s, aspect * s] }
    }
}

impl Default for ConfocalPSF {
    fn default() -> Self {
        Self::from_volume(0.54, 3.0)
    }
}

/// Integral of the peak-normalized Gaussian, µm³.
pub fn psf_volume(psf: &ConfocalPSF) -> f64 {
    (2.0 * PI).powf(1.5) * psf.sigma.iter().product::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Width is σ.
    Gaussian,
    /// Width is the FWHM.
    Lorentzian,
    /// Width is the full extent.
    Box,
    Delta,
}

/// Per-axis weighting of the sampled volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Footprint {
    pub profile: [Profile; 3],
    pub width: [f64; 3],
    pub nodes: [usize; 3],
}

impl Footprint {
    pub fn delta() -> Self {
        Self { profile: [Profile::Delta; 3], width: [0.0; 3], nodes: [1; 3] }
    }

    pub fn psf(psf: &ConfocalPSF, nodes: [usize; 3]) -> Self {
        Self { profile: [Profile::Gaussian; 3], width: psf.sigma, nodes }
    }

    /// Lateral pixel of the given extent, Lorentzian-weighted with FWHM equal
    /// to the extent; `depth` is the box thickness of the sensing layer.
    pub fn pixel(extent: [f64; 2], depth: f64, nodes: [usize; 3]) -> Self {
        Self {
            profile: [
                Profile::Lorentzian,
                Profile::Lorentzian,
                if depth > 0.0 { Profile::Box } else { Profile::Delta },
            ],
            width: [extent[0], extent[1], depth],
            nodes,
        }
    }

    fn validate(&self) -> Result<(), SampleError> {
        for k in 0..3 {
            if self.profile[k] != Profile::Delta && self.nodes[k] > 1 && !(self.width[k] > 0.0) {
                return Err(SampleError::DegenerateFootprint(self.width[k], k));
            }
        }
        Ok(())
    }
}

/// Offsets, weights and node spacing along one axis.
fn axis_nodes(profile: Profile, width: f64, n: usize) -> (Vec<(f64, f64)>, f64) {
    if profile == Profile::Delta || n <= 1 || width <= 0.0 {
        return (vec![(0.0, 1.0)], 0.0);
    }
    let grid = |half: f64, n: usize| -> (Vec<f64>, f64) {
        let h = 2.0 * half / n as f64;
        ((0..n).map(|i| -half + (i as f64 + 0.5) * h).collect(), h)
    };
    let (pts, h) = match profile {
        Profile::Lorentzian => {
            let nodes = lorentzian_nodes(width, n);
            let h = if nodes.len() > 1 { nodes[1].0 - nodes[0].0 } else { 0.0 };
            return (nodes, h);
        }
        Profile::Gaussian => grid(4.0 * width, n),
        Profile::Box => grid(0.5 * width, n),
        Profile::Delta => unreachable!(),
    };
    let w: Vec<f64> = match profile {
        Profile::Gaussian => pts.iter().map(|x| (-0.5 * (x / width).powi(2)).exp()).collect(),
        _ => vec![1.0; pts.len()],
    };
    let total: f64 = w.iter().sum();
    (pts.into_iter().zip(w).map(|(x, w)| (x, w / total)).collect(), h)
}

/// Spin-bath description of one voxel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    /// Common-mode dephasing time, s.
    pub td: f64,
    /// Differential-mode dephasing time, s. Ramsey decays at 1/TD + 1/Tmag.
    pub tmag: f64,
    /// ¹⁴N hyperfine splitting, Hz.
    pub hyperfine: f64,
    /// Common-mode bath strata.
    pub strata: usize,
    /// Differential bath strata.
    pub diff_strata: usize,
    pub include_hyperfine: bool,
    /// Merge common-mode offsets into bins of this width (Hz); 0 keeps all.
    pub merge_resolution: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            td: 20e-6,
            // T2* = 7.5 µs with the default TD
            tmag: 12e-6,
            hyperfine: DEFAULT_HYPERFINE,
            strata: 255,
            diff_strata: 33,
            include_hyperfine: true,
            merge_resolution: 0.0,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.td > 0.0) || !(self.tmag > 0.0) {
            return Err(SampleError::InvalidSpec("TD and Tmag must be positive".into()));
        }
        if self.strata < 8 {
            return Err(SampleError::InvalidSpec(format!("strata {} < 8", self.strata)));
        }
        if self.diff_strata == 0 || self.merge_resolution < 0.0 {
            return Err(SampleError::InvalidSpec("diff_strata ≥ 1 and merge_resolution ≥ 0 required".into()));
        }
        Ok(())
    }

    /// Common-mode Lorentzian FWHM giving an e^{−τ/TD} envelope.
    pub fn cm_fwhm(&self) -> f64 {
        1.0 / (PI * self.td)
    }

    pub fn diff_fwhm(&self) -> f64 {
        1.0 / (PI * self.tmag)
    }
}

/// Footprint-weighted samples of Mz(position) with their weights.
pub fn footprint_samples<R: Rng>(
    position: [f64; 3],
    footprint: &Footprint,
    field: &StrainField,
    mut rng: Option<&mut R>,
) -> Result<Vec<(f64, f64)>, SampleError> {
    footprint.validate()?;
    let axes: Vec<(Vec<(f64, f64)>, f64)> =
        (0..3).map(|k| axis_nodes(footprint.profile[k], footprint.width[k], footprint.nodes[k])).collect();
    let mut out = Vec::with_capacity(axes.iter().map(|a| a.0.len()).product());
    for &(ox, wx) in &axes[0].0 {
        for &(oy, wy) in &axes[1].0 {
            for &(oz, wz) in &axes[2].0 {
                let mut r = [position[0] + ox, position[1] + oy, position[2] + oz];
                if let Some(rng) = rng.as_deref_mut() {
                    for k in 0..3 {
                        if axes[k].1 > 0.0 {
                            r[k] += (rng.random::<f64>() - 0.5) * axes[k].1;
                        }
                    }
                }
                out.push((field.mz(r), wx * wy * wz));
            }
        }
    }
    Ok(out)
}

/// Merges `(offset, weight)` pairs into bins of width `res`, keeping the
/// weighted mean offset of each bin.
pub fn merge_offsets(samples: &[(f64, f64)], res: f64) -> Vec<(f64, f64)> {
    if res <= 0.0 {
        return samples.to_vec();
    }
    let mut bins: std::collections::BTreeMap<i64, (f64, f64)> = std::collections::BTreeMap::new();
    for &(x, w) in samples {
        let e = bins.entry((x / res).round() as i64).or_insert((0.0, 0.0));
        e.0 += x * w;
        e.1 += w;
    }
    bins.into_values().filter(|b| b.1 > 0.0).map(|(xw, w)| (xw / w, w)).collect()
}

/// Ensemble for the voxel at `position`: footprint samples of Mz convolved
/// with the common-mode bath, times the differential bath and hyperfine lines.
/// Member `params` carry `base` with Mz = 0; all strain enters `cm_offset`.
pub fn voxel_ensemble<R: Rng>(
    position: [f64; 3],
    footprint: &Footprint,
    field: &StrainField,
    spec: &EnsembleSpec,
    base: NVParams,
    rng: Option<&mut R>,
) -> Result<Vec<EnsembleMember>, SampleError> {
    spec.validate()?;
    let spatial = footprint_samples(position, footprint, field, rng)?;
    let spatial = merge_offsets(&spatial, spec.merge_resolution);
    let bath = lorentzian_nodes(spec.cm_fwhm(), spec.strata);
    let mut cm = Vec::with_capacity(spatial.len() * bath.len());
    for &(m, ws) in &spatial {
        for &(b, wb) in &bath {
            cm.push((m + b, ws * wb));
        }
    }
    let cm = merge_offsets(&cm, spec.merge_resolution);
    let diff =
        if spec.diff_strata > 1 { lorentzian_nodes(spec.diff_fwhm(), spec.diff_strata) } else { vec![(0.0, 1.0)] };
    let hf: Vec<f64> = if spec.include_hyperfine { vec![-spec.hyperfine, 0.0, spec.hyperfine] } else { vec![] };
    let params = NVParams { mz: 0.0, ..base };
    let mut members = crate::sequence::product_ensemble(params, &cm, &diff, &hf);
    let total: f64 = members.iter().map(|m| m.weight).sum();
    for m in &mut members {
        m.weight /= total;
    }
    Ok(members)
}

/// Spatial MW/laser profiles and the temperature drift of D.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstrumentProfiles {
    /// MW amplitude ∝ 1/(1 + z/z0), µm.
    pub mw_z0: f64,
    /// Laser power at radius `laser_radius` relative to the centre.
    pub laser_edge_fraction: f64,
    pub laser_radius: f64,
    pub laser_center: [f64; 2],
    /// Temperature drift, K/hour.
    pub temp_drift_rate: f64,
    /// dD/dT, Hz/K.
    pub dd_dt: f64,
    /// Optional slow sinusoidal D wander: amplitude (Hz) and period (s).
    pub wander_amplitude: f64,
    pub wander_period: f64,
}

impl Default for InstrumentProfiles {
    fn default() -> Self {
        Self {
            mw_z0: 50.0,
            laser_edge_fraction: 0.4,
            laser_radius: 75.0,
            laser_center: [0.0, 0.0],
            temp_drift_rate: 0.1,
            dd_dt: -74e3,
            wander_amplitude: 0.0,
            wander_period: 3600.0,
        }
    }
}

impl InstrumentProfiles {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.mw_z0 > 0.0) || !(self.laser_edge_fraction > 0.0) || !(self.laser_radius > 0.0) {
            return Err(SampleError::InvalidSpec("profile scales must be positive".into()));
        }
        if self.wander_amplitude != 0.0 && !(self.wander_period > 0.0) {
            return Err(SampleError::InvalidSpec("wander period must be positive".into()));
        }
        Ok(())
    }

    /// Sets the temperature drift so that D moves by `rate` Hz/s.
    pub fn with_drift_hz_per_s(mut self, rate: f64) -> Self {
        self.temp_drift_rate = rate * 3600.0 / self.dd_dt;
        self
    }

    pub fn drift_hz_per_s(&self) -> f64 {
        self.dd_dt * self.temp_drift_rate / 3600.0
    }

    pub fn mw_scale(&self, depth: f64) -> f64 {
        1.0 / (1.0 + depth.max(0.0) / self.mw_z0)
    }

    pub fn laser_scale(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.laser_center[0]).powi(2) + (y - self.laser_center[1]).powi(2);
        (self.laser_edge_fraction.ln() * r2 / self.laser_radius.powi(2)).exp()
    }
}

/// Shift of D at time `t` (s), identical at every position.
pub fn d_shift(t: f64, profiles: &InstrumentProfiles) -> f64 {
    let mut d = profiles.drift_hz_per_s() * t;
    if profiles.wander_amplitude != 0.0 {
        d += profiles.wander_amplitude * (2.0 * PI * t / profiles.wander_period).sin();
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mz_examples() {
        let t = StrainTensor { zz: 1e-6, ..Default::default() };
        assert_relative_eq!(mz_from_strain(&t), -8.0e3, max_relative = 1e-12);
        let t = StrainTensor { xx: 5e-7, yy: 5e-7, ..Default::default() };
        assert_relative_eq!(mz_from_strain(&t), -12.4e3, max_relative = 1e-12);
        assert_eq!(mz_from_strain(&StrainTensor::default()), 0.0);
        let shear = StrainTensor { xy: 1e-5, xz: 1e-5, yz: 1e-5, ..Default::default() };
        assert_eq!(mz_from_strain(&shear), 0.0);
    }

    #[test]
    fn strain_from_mz_examples() {
        assert_relative_eq!(strain_from_mz(-10.9e3), 1e-6, max_relative = 1e-12);
        assert_eq!(strain_from_mz(0.0), 0.0);
        let e = 2e-6;
        let mz = mz_from_strain(&StrainTensor::isotropic(e));
        assert_relative_eq!(strain_from_mz(mz), (A1 + 2.0 * A2) / -10.9e9 * e, max_relative = 1e-12);
        assert_relative_eq!(mz_from_strain(&StrainTensor::equivalent(1e-6)), -10.9e3, max_relative = 1e-12);
    }

    #[test]
    fn psf_volumes() {
        assert_relative_eq!(psf_volume(&ConfocalPSF::default()), 0.54, max_relative = 1e-12);
        assert_relative_eq!(psf_volume(&ConfocalPSF { sigma: [1.0; 3] }), 15.7496, max_relative = 1e-4);
        let p = ConfocalPSF { sigma: [0.3, 0.4, 1.1] };
        let q = ConfocalPSF { sigma: p.sigma.map(|s| 2.0 * s) };
        assert_relative_eq!(psf_volume(&q), 8.0 * psf_volume(&p), max_relative = 1e-12);
    }

    #[test]
    fn drift() {
        let p = InstrumentProfiles::default();
        assert_eq!(d_shift(0.0, &p), 0.0);
        assert_relative_eq!(d_shift(3600.0, &p), -7.4e3, max_relative = 1e-12);
        assert_relative_eq!(p.with_drift_hz_per_s(20.0).drift_hz_per_s(), 20.0, max_relative = 1e-12);
    }

    #[test]
    fn profiles() {
        let p = InstrumentProfiles::default();
        assert_eq!(p.mw_scale(0.0), 1.0);
        assert_relative_eq!(p.mw_scale(50.0), 0.5);
        assert_relative_eq!(p.laser_scale(75.0, 0.0), 0.4, max_relative = 1e-12);
    }

    #[test]
    fn scene_round_trip() {
        let f = StrainField::new(vec![
            Primitive::Uniform { strain: Amplitude::Equivalent(1.5e-7) },
            Primitive::GaussianBump {
                center: [1.0, -2.0, 3.0],
                sigma: [2.0, 2.0, 4.0],
                strain: Amplitude::Tensor([1e-7, 0.0, 2e-7, 0.0, 1e-8, 0.0]),
            },
            Primitive::Scratch {
                start: [-10.0, 0.1],
                end: [10.0, 0.3],
                width: 1.3,
                growth: 0.2,
                decay: f64::INFINITY,
                strain: Amplitude::Equivalent(-3e-6),
            },
            Primitive::LinearGradient {
                origin: [0.0; 3],
                direction: [1.0, 0.0, 0.0],
                strain: Amplitude::Equivalent(0.1 / 3.0 * 1e-6),
            },
        ])
        .unwrap();
        let s = f.to_toml().unwrap();
        let back = StrainField::from_toml(&s).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_toml().unwrap(), s);
    }

    #[test]
    fn scene_rejects_bad_input() {
        assert!(StrainField::from_toml("[[primitive]]\nkind = \"uniform\"\nstrain = 0.5\n").is_err());
        assert!(StrainField::from_toml("[[primitive]]\nkind = \"uniform\"\nstrain = 1e-6\ncolour = 1\n").is_err());
        assert!(StrainField::from_toml("[[primitive]]\nkind = \"blob\"\n").is_err());
    }

    #[test]
    fn uniform_field_offsets_equal_point_value() {
        let f = StrainField::uniform(1e-6);
        let spec = EnsembleSpec { strata: 9, diff_strata: 1, include_hyperfine: false, ..Default::default() };
        let fp = Footprint::psf(&ConfocalPSF::default(), [3, 3, 3]);
        let s = footprint_samples::<ChaCha8Rng>([0.0; 3], &fp, &f, None).unwrap();
        assert!(s.iter().all(|(m, _)| (m - -10.9e3).abs() < 1e-6));
        let e = voxel_ensemble::<ChaCha8Rng>([0.0; 3], &fp, &f, &spec, NVParams::default(), None).unwrap();
        let mean: f64 = e.iter().map(|m| m.weight * m.cm_offset).sum();
        assert_relative_eq!(mean, -10.9e3, max_relative = 1e-9);
    }

    #[test]
    fn degenerate_footprint_rejected() {
        let fp = Footprint { profile: [Profile::Gaussian; 3], width: [0.1, 0.0, 0.1], nodes: [3; 3] };
        let r = voxel_ensemble::<ChaCha8Rng>(
            [0.0; 3],
            &fp,
            &StrainField::default(),
            &EnsembleSpec::default(),
            NVParams::default(),
            None,
        );
        assert!(matches!(r, Err(SampleError::DegenerateFootprint(_, 1))));
        let spec = EnsembleSpec { strata: 4, ..Default::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn merging_preserves_mean_and_mass() {
        let s: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 * 3.7, 0.01)).collect();
        let m = merge_offsets(&s, 50.0);
        assert!(m.len() < 20);
        assert_relative_eq!(m.iter().map(|x| x.1).sum::<f64>(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(
            m.iter().map(|x| x.0 * x.1).sum::<f64>(),
            s.iter().map(|x| x.0 * x.1).sum::<f64>(),
            max_relative = 1e-12
        );
    }
}
