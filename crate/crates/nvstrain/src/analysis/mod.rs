//! Visibility, fitting, fringe inversion, Allan deviation and ODMR analysis.

mod allan;
mod calibration;
pub mod fit;
mod map;
mod odmr;
mod spectrum;

pub use allan::{allan_deviation, allan_deviation_direct, AllanPoint, AllanResult};
pub use calibration::{
    disambiguate, fit_calibration, fit_envelope, fit_ramsey_triplet, fit_sinusoid, visibility_to_mz, CalibrationCurve,
    EnvelopeFit, MzEstimate, RamseyFit,
};
pub use map::{read_trace, sidecar_path, write_trace, GridGeometry, MapMetadata, StrainMap};
pub use odmr::{
    fit_odmr, lorentzian_dip, odmr_line_groups, odmr_to_maps, synth_odmr, LineGroup, ODMRSpectrum, OdmrConfig,
};
pub use spectrum::{count_peaks, periodogram};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("zero denominator")]
    ZeroDenominator,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("fit did not converge: {0}")]
    NonConvergence(String),
    #[error("sweep too narrow: span {span} Hz is below one period {period} Hz")]
    SweepTooNarrow { span: f64, period: f64 },
    #[error("fitted amplitude {amplitude} is consistent with zero (σ = {sigma})")]
    AmplitudeZero { amplitude: f64, sigma: f64 },
    #[error("visibility {value} outside fringe amplitude {amplitude}")]
    OutOfRange { value: f64, amplitude: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("io: {0}")]
    Io(String),
}

/// Sampled curve with per-point uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Trace {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: Vec<f64>) -> Result<Self, AnalysisError> {
        if x.len() != y.len() || x.len() != sigma.len() {
            return Err(AnalysisError::LengthMismatch(format!("x {}, y {}, sigma {}", x.len(), y.len(), sigma.len())));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(AnalysisError::InvalidInput("sigma must be non-negative".into()));
        }
        Ok(Self { x, y, sigma })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Least-squares weights; unit weights when every σ is zero.
    pub fn weights(&self) -> Vec<f64> {
        if self.sigma.iter().all(|s| *s == 0.0) {
            return vec![1.0; self.len()];
        }
        let floor = self.sigma.iter().cloned().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
        self.sigma.iter().map(|s| 1.0 / s.max(floor).powi(2)).collect()
    }
}

/// ν = (f⁺ − f⁻)/(f⁺ + f⁻).
pub fn visibility(f_plus: f64, f_minus: f64) -> Result<f64, AnalysisError> {
    let den = f_plus + f_minus;
    if den == 0.0 || !den.is_finite() {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok((f_plus - f_minus) / den)
}

/// XY-normalized visibility and fringe amplitude `√(ΔfX² + ΔfY²)`.
pub fn xy_visibility(fxp: f64, fxm: f64, fyp: f64, fym: f64) -> Result<(f64, f64), AnalysisError> {
    xy_visibility_from_differences(fxp - fxm, fyp - fym)
}

pub fn xy_visibility_from_differences(dx: f64, dy: f64) -> Result<(f64, f64), AnalysisError> {
    let amp = dx.hypot(dy);
    if amp == 0.0 || !amp.is_finite() {
        return Err(AnalysisError::ZeroDenominator);
    }
    Ok((dx / amp, amp))
}
