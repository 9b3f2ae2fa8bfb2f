//! APD voltage-noise chain and the lock-in camera difference-imaging model.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const BOLTZMANN: f64 = 1.380649e-23;
pub const ELECTRON_CHARGE: f64 = 1.602176634e-19;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NoiseError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("zero denominator: {0}")]
    ZeroDenominator(String),
    #[error("fringe amplitude must be positive, got {0}")]
    ZeroAmplitude(f64),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct APDConfig {
    /// Responsivity at unit gain, A/W.
    pub responsivity_m1: f64,
    pub gain_m: f64,
    /// Excess noise factor F ≥ 1.
    pub excess_noise_f: f64,
    /// Transimpedance (and Johnson resistor), V/A.
    pub transimpedance: f64,
    pub bandwidth: f64,
    /// Surface dark current, A.
    pub dark_surface: f64,
    /// Bulk dark current before gain, A.
    pub dark_bulk: f64,
    pub temperature: f64,
}

impl Default for APDConfig {
    fn default() -> Self {
        Self {
            responsivity_m1: 0.45,
            gain_m: 100.0,
            excess_noise_f: 4.0,
            transimpedance: 250e3,
            bandwidth: 700e3,
            dark_surface: 200e-12,
            dark_bulk: 2e-12,
            temperature: 300.0,
        }
    }
}

impl APDConfig {
    pub fn validate(&self) -> Result<(), NoiseError> {
        let pos = [self.responsivity_m1, self.gain_m, self.transimpedance, self.temperature];
        if pos.iter().any(|v| !(*v > 0.0)) || self.bandwidth < 0.0 || self.dark_surface < 0.0 || self.dark_bulk < 0.0 {
            return Err(NoiseError::InvalidConfig("APD parameters must be positive".into()));
        }
        if !(self.excess_noise_f >= 1.0) {
            return Err(NoiseError::InvalidConfig(format!("excess noise factor {} < 1", self.excess_noise_f)));
        }
        Ok(())
    }

    /// Output voltage for optical power `p` (W).
    pub fn output_voltage(&self, p: f64) -> f64 {
        self.responsivity_m1 * self.gain_m * self.transimpedance * p
    }

    pub fn optical_power(&self, v: f64) -> f64 {
        v / (self.responsivity_m1 * self.gain_m * self.transimpedance)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBudget {
    /// RMS APD noise current, A.
    pub i_n: f64,
    /// Shot-noise voltage, V.
    pub v_sn: f64,
    /// Johnson noise voltage, V.
    pub v_jn: f64,
    /// Quadrature sum, V.
    pub v_total: f64,
}

impl NoiseBudget {
    pub fn zero() -> Self {
        Self { i_n: 0.0, v_sn: 0.0, v_jn: 0.0, v_total: 0.0 }
    }
}

/// Noise terms for optical power `p` (W) on the APD.
pub fn apd_noise(cfg: &APDConfig, p: f64) -> Result<NoiseBudget, NoiseError> {
    cfg.validate()?;
    if !(p >= 0.0) {
        return Err(NoiseError::InvalidConfig(format!("optical power {p} < 0")));
    }
    let m2 = cfg.gain_m * cfg.gain_m;
    let current = cfg.dark_surface + (cfg.dark_bulk * m2 + cfg.responsivity_m1 * m2 * p) * cfg.excess_noise_f;
    let i_n = (2.0 * ELECTRON_CHARGE * current * cfg.bandwidth).sqrt();
    let v_sn = i_n * cfg.transimpedance;
    let v_jn = (4.0 * BOLTZMANN * cfg.temperature * cfg.transimpedance * cfg.bandwidth).sqrt();
    Ok(NoiseBudget { i_n, v_sn, v_jn, v_total: v_sn.hypot(v_jn) })
}

/// Small-visibility approximation `√2·v/(f+ + f−)`.
pub fn visibility_uncertainty(budget: &NoiseBudget, f_plus: f64, f_minus: f64) -> Result<f64, NoiseError> {
    let s = f_plus + f_minus;
    if !(s > 0.0) {
        return Err(NoiseError::ZeroDenominator(format!("f+ + f− = {s}")));
    }
    Ok(2f64.sqrt() * budget.v_total / s)
}

/// Full propagation through ν = (f+ − f−)/(f+ + f−).
pub fn visibility_uncertainty_exact(budget: &NoiseBudget, f_plus: f64, f_minus: f64) -> Result<f64, NoiseError> {
    let s = f_plus + f_minus;
    if !(s > 0.0) {
        return Err(NoiseError::ZeroDenominator(format!("f+ + f− = {s}")));
    }
    let nu = (f_plus - f_minus) / s;
    let v = budget.v_total;
    Ok((((1.0 - nu) / s * v).powi(2) + ((1.0 + nu) / s * v).powi(2)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloor {
    /// Per-shot frequency uncertainty, Hz.
    pub sigma_f: f64,
    /// Strain per √Hz.
    pub strain_per_root_hz: f64,
}

impl NoiseFloor {
    /// Normalized to the sensing volume (µm³): per √(Hz·µm⁻³).
    pub fn volume_normalized(&self, volume: f64) -> f64 {
        self.strain_per_root_hz * volume.sqrt()
    }
}

pub fn strain_noise_floor(
    sigma_nu: f64,
    tau1: f64,
    amplitude: f64,
    rep_rate: f64,
    coupling: f64,
) -> Result<NoiseFloor, NoiseError> {
    if !(amplitude > 0.0) {
        return Err(NoiseError::ZeroAmplitude(amplitude));
    }
    if !(tau1 > 0.0) || !(rep_rate > 0.0) || !(coupling > 0.0) {
        return Err(NoiseError::InvalidConfig("tau1, repetition rate and coupling must be positive".into()));
    }
    let sigma_f = sigma_nu / (2.0 * PI * tau1 * amplitude);
    Ok(NoiseFloor { sigma_f, strain_per_root_hz: sigma_f / (coupling * rep_rate.sqrt()) })
}

/// Repetition rate at which the floor equals `floor` (strain/√Hz).
pub fn rep_rate_for_floor(
    sigma_nu: f64,
    tau1: f64,
    amplitude: f64,
    coupling: f64,
    floor: f64,
) -> Result<f64, NoiseError> {
    let f = strain_noise_floor(sigma_nu, tau1, amplitude, 1.0, coupling)?;
    Ok((f.strain_per_root_hz / floor).powi(2))
}

/// One noisy reading averaged over `shots` repetitions.
pub fn sample_reading<R: Rng + ?Sized>(expected: f64, budget: &NoiseBudget, shots: usize, rng: &mut R) -> f64 {
    let sigma = budget.v_total / (shots.max(1) as f64).sqrt();
    if sigma == 0.0 {
        return expected;
    }
    let z: f64 = StandardNormal.sample(rng);
    expected + sigma * z
}

/// One line of the noise-budget report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloorInputs {
    /// Typical APD voltage per readout, V.
    pub signal_voltage: f64,
    pub tau1: f64,
    pub amplitude: f64,
    pub rep_rate: f64,
    pub coupling: f64,
    /// Sensing volume, µm³.
    pub volume: f64,
}

impl Default for FloorInputs {
    fn default() -> Self {
        Self { signal_voltage: 5.2e-3, tau1: 21e-6, amplitude: 0.01, rep_rate: 3.8e3, coupling: 10.9e9, volume: 0.54 }
    }
}

/// Every term of the chain from optical power to volume-normalized floor.
pub fn noise_report(cfg: &APDConfig, inputs: &FloorInputs) -> Result<Vec<ReportEntry>, NoiseError> {
    let p = cfg.optical_power(inputs.signal_voltage);
    let b = apd_noise(cfg, p)?;
    let sigma_nu = visibility_uncertainty(&b, inputs.signal_voltage, inputs.signal_voltage)?;
    let floor = strain_noise_floor(sigma_nu, inputs.tau1, inputs.amplitude, inputs.rep_rate, inputs.coupling)?;
    let m2 = cfg.gain_m * cfg.gain_m;
    let e = |name: &str, value: f64, unit: &str| ReportEntry { name: name.into(), value, unit: unit.into() };
    Ok(vec![
        e("signal_voltage", inputs.signal_voltage, "V"),
        e("optical_power", p, "W"),
        e("photocurrent_term", cfg.responsivity_m1 * m2 * p, "A"),
        e("dark_surface", cfg.dark_surface, "A"),
        e("dark_bulk_gained", cfg.dark_bulk * m2, "A"),
        e("i_n", b.i_n, "A"),
        e("v_sn", b.v_sn, "V"),
        e("v_jn", b.v_jn, "V"),
        e("v_total", b.v_total, "V"),
        e("sigma_nu", sigma_nu, "1"),
        e("sigma_f_per_shot", floor.sigma_f, "Hz"),
        e("rep_rate", inputs.rep_rate, "Hz"),
        e("strain_floor", floor.strain_per_root_hz, "1/sqrt(Hz)"),
        e("strain_floor_volume_normalized", floor.volume_normalized(inputs.volume), "1/sqrt(Hz*um^-3)"),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockInCameraConfig {
    pub f_demod: f64,
    pub n_demod: usize,
    /// Signal units per least-significant bit of the difference output.
    pub lsb: f64,
    /// Shot-noise variance per exposure is `flux·noise_gain` (signal units²).
    pub noise_gain: f64,
    /// Fixed per-pixel offsets for the four exposure slots, in LSB.
    pub offsets: Vec<[i32; 4]>,
}

impl Default for LockInCameraConfig {
    fn default() -> Self {
        Self { f_demod: 6.5e3, n_demod: 24, lsb: 10.0, noise_gain: 1.0, offsets: Vec::new() }
    }
}

impl LockInCameraConfig {
    pub fn frame_rate(&self) -> f64 {
        self.f_demod / self.n_demod as f64
    }

    pub fn frame_period(&self) -> f64 {
        self.n_demod as f64 / self.f_demod
    }

    pub fn validate(&self, pixels: usize) -> Result<(), NoiseError> {
        if !(self.f_demod > 0.0) || self.n_demod == 0 || !(self.lsb > 0.0) || self.noise_gain < 0.0 {
            return Err(NoiseError::InvalidConfig("f_demod > 0, n_demod ≥ 1, lsb > 0 required".into()));
        }
        if !self.offsets.is_empty() && self.offsets.len() != pixels {
            return Err(NoiseError::ShapeMismatch(self.offsets.len(), pixels));
        }
        Ok(())
    }
}

/// Accumulated 10-bit difference samples; `sums[i] / count` is the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockInFrame {
    pub sums: Vec<i64>,
    pub count: usize,
}

impl LockInFrame {
    pub fn mean(&self) -> Vec<f64> {
        self.sums.iter().map(|s| *s as f64 / self.count as f64).collect()
    }

    /// `self − other` per pixel; fixed offsets cancel exactly.
    pub fn difference(&self, other: &LockInFrame) -> Result<Vec<f64>, NoiseError> {
        if self.sums.len() != other.sums.len() || self.count != other.count {
            return Err(NoiseError::ShapeMismatch(self.sums.len(), other.sums.len()));
        }
        Ok(self.sums.iter().zip(&other.sums).map(|(a, b)| (a - b) as f64 / self.count as f64).collect())
    }
}

const ADC_MIN: i64 = -512;
const ADC_MAX: i64 = 511;

/// One camera frame: `n_demod` cycles of four exposures (A, B, A, B), two
/// digitized differences per cycle.
pub fn lockin_acquire<R: Rng + ?Sized>(
    flux_a: &[f64],
    flux_b: &[f64],
    cfg: &LockInCameraConfig,
    mut rng: Option<&mut R>,
) -> Result<LockInFrame, NoiseError> {
    if flux_a.len() != flux_b.len() {
        return Err(NoiseError::ShapeMismatch(flux_a.len(), flux_b.len()));
    }
    cfg.validate(flux_a.len())?;
    let mut sums = vec![0i64; flux_a.len()];
    let expose = |flux: f64, rng: &mut Option<&mut R>| -> f64 {
        match rng.as_deref_mut() {
            Some(r) if cfg.noise_gain > 0.0 && flux > 0.0 => {
                Normal::new(flux, (flux * cfg.noise_gain).sqrt()).map(|d| d.sample(r)).unwrap_or(flux)
            }
            _ => flux,
        }
    };
    for _ in 0..cfg.n_demod {
        for (i, s) in sums.iter_mut().enumerate() {
            let off = cfg.offsets.get(i).copied().unwrap_or([0; 4]);
            for pair in 0..2 {
                let a = expose(flux_a[i], &mut rng);
                let b = expose(flux_b[i], &mut rng);
                let q = ((a - b) / cfg.lsb).round() as i64 + (off[2 * pair] - off[2 * pair + 1]) as i64;
                *s += q.clamp(ADC_MIN, ADC_MAX);
            }
        }
    }
    Ok(LockInFrame { sums, count: 2 * cfg.n_demod })
}
