//! Envelope and calibration-curve fits, and visibility → Mz inversion.

use super::fit::{levenberg_marquardt, LmOptions, LmResult};
use super::spectrum::periodogram;
use super::{AnalysisError, Trace};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const STARTS: usize = 8;

fn wrap_phase(p: f64) -> f64 {
    let mut r = p.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

fn covariance_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn check_variation(y: &[f64]) -> Result<(), AnalysisError> {
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max - min > 1e-14 * (1.0 + max.abs())) {
        return Err(AnalysisError::Degenerate("trace is constant".into()));
    }
    Ok(())
}

/// Covariance in data units: the fit's (JᵀWJ)⁻¹ when σ is supplied, scaled by
/// the reduced χ² when the trace carries no uncertainties.
fn data_covariance(trace: &Trace, r: &LmResult) -> nalgebra::DMatrix<f64> {
    if trace.sigma.iter().all(|s| *s == 0.0) {
        r.scaled_covariance()
    } else {
        r.covariance.clone()
    }
}

/// Strongest frequency (in cycles per unit of `u`) from a fine periodogram.
fn dominant_frequency(u: &[f64], y: &[f64]) -> f64 {
    let n = u.len();
    let span = u[n - 1] - u[0];
    let mut du: Vec<f64> = u.windows(2).map(|w| w[1] - w[0]).collect();
    du.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let nyq = 0.5 / du[du.len() / 2];
    let df = 1.0 / (16.0 * span);
    let nf = (nyq / df).ceil() as usize;
    let freqs: Vec<f64> = (1..=nf).map(|k| k as f64 * df).collect();
    let p = periodogram(u, y, &freqs);
    let k = (0..p.len()).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap_or(0);
    freqs[k]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub amplitude: f64,
    /// Decay time, s.
    pub td: f64,
    /// Fringe frequency, Hz.
    pub delta: f64,
    pub phi0: f64,
    /// Standard errors of (A, T_D, δ, φ0).
    pub sigma: [f64; 4],
    /// Covariance of (A, T_D, δ, φ0).
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
}

impl EnvelopeFit {
    pub fn eval(&self, tau: f64) -> f64 {
        self.amplitude * (-tau / self.td).exp() * (2.0 * PI * self.delta * tau + self.phi0).sin()
    }
}

/// Weighted fit of `A·e^{−τ/T_D}·sin(2πδτ + φ0)` with phase multistart.
pub fn fit_envelope(trace: &Trace) -> Result<EnvelopeFit, AnalysisError> {
    fit_decaying(trace, &[0.0]).map(|(r, s, cov)| envelope_from(r, s, cov))
}

fn envelope_from(r: LmResult, s: f64, cov: nalgebra::DMatrix<f64>) -> EnvelopeFit {
    let p = &r.params;
    let d = [1.0, -s / (p[1] * p[1]), 1.0 / s, 1.0];
    let mut c = cov.clone();
    for i in 0..4 {
        for j in 0..4 {
            c[(i, j)] = cov[(i, j)] * d[i] * d[j];
        }
    }
    let sigma = [0, 1, 2, 3].map(|i| c[(i, i)].max(0.0).sqrt());
    EnvelopeFit {
        amplitude: p[0],
        td: s / p[1],
        delta: p[2] / s,
        phi0: wrap_phase(p[3]),
        sigma,
        covariance: covariance_rows(&c),
        chi2: r.chi2,
        dof: r.dof,
    }
}

/// Fits `A·e^{−k u}·mean_j sin(2π(d + o_j)u + φ)` on `u = τ/s`; `offsets` are
/// fixed frequency offsets in Hz.
fn fit_decaying(trace: &Trace, offsets: &[f64]) -> Result<(LmResult, f64, nalgebra::DMatrix<f64>), AnalysisError> {
    if trace.len() < 10 {
        return Err(AnalysisError::InsufficientData(format!("{} points, need 10", trace.len())));
    }
    check_variation(&trace.y)?;
    let s = trace.x.iter().cloned().fold(0.0, f64::max);
    if !(s > 0.0) {
        return Err(AnalysisError::InvalidInput("τ values must be positive".into()));
    }
    let u: Vec<f64> = trace.x.iter().map(|t| t / s).collect();
    let span = u[u.len() - 1] - u[0];
    let off: Vec<f64> = offsets.iter().map(|o| o * s).collect();
    // the dominant peak may be any line of the multiplet
    let dom = dominant_frequency(&u, &trace.y);
    let centres: Vec<f64> = off.iter().map(|o| dom - o).filter(|c| *c > 0.0).collect();
    if centres.iter().all(|c| c * span < 1.0) {
        return Err(AnalysisError::InsufficientData("trace spans less than one fringe period".into()));
    }
    let ymax = trace.y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let nlines = off.len() as f64;
    let model = |p: &[f64], x: f64| {
        let env = p[0] * (-p[1] * x).exp();
        let s: f64 = off.iter().map(|o| (2.0 * PI * (p[2] + o) * x + p[3]).sin()).sum();
        env * s / nlines
    };
    let w = trace.weights();
    let opts = LmOptions::default();
    let mut best: Option<LmResult> = None;
    for &dc in &centres {
        let res_bin = 1.0 / span;
        let lo = [0.0, 1e-4, (dc - 2.0 * res_bin).max(0.0), -3.0 * PI];
        let hi = [100.0 * ymax, 1e3, dc + 2.0 * res_bin, 3.0 * PI];
        for k0 in [0.3, 3.0] {
            for j in 0..STARTS {
                let phi = -PI + 2.0 * PI * j as f64 / STARTS as f64;
                let p0 = [1.5 * ymax, k0, dc, phi];
                let Ok(r) = levenberg_marquardt(&u, &trace.y, &w, &model, &p0, &lo, &hi, &opts) else {
                    continue;
                };
                if best.as_ref().is_none_or(|b| r.chi2 < b.chi2) {
                    best = Some(r);
                }
            }
        }
    }
    let best = best.ok_or_else(|| AnalysisError::NonConvergence("no start converged".into()))?;
    if !best.chi2.is_finite() {
        return Err(AnalysisError::NonConvergence("non-finite χ²".into()));
    }
    let cov = data_covariance(trace, &best);
    Ok((best, s, cov))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RamseyFit {
    pub amplitude: f64,
    /// Inhomogeneous dephasing time, s.
    pub t2star: f64,
    /// Detuning of the centre hyperfine line, Hz.
    pub detuning: f64,
    pub phi0: f64,
    pub sigma: [f64; 4],
    pub chi2: f64,
    pub dof: usize,
}

/// Fits a Ramsey trace as three equal-weight lines split by `hyperfine`,
/// sharing one exponential envelope.
pub fn fit_ramsey_triplet(trace: &Trace, hyperfine: f64) -> Result<RamseyFit, AnalysisError> {
    let (r, s, cov) = fit_decaying(trace, &[-hyperfine, 0.0, hyperfine])?;
    let e = envelope_from(r, s, cov);
    Ok(RamseyFit {
        amplitude: e.amplitude,
        t2star: e.td,
        detuning: e.delta,
        phi0: e.phi0,
        sigma: e.sigma,
        chi2: e.chi2,
        dof: e.dof,
    })
}

/// `ν(δ) = amplitude·sin(2πδ·tau1 + phi0) + offset` with an operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub amplitude: f64,
    /// Evolution time setting the fringe period 1/tau1, s.
    pub tau1: f64,
    pub phi0: f64,
    pub offset: f64,
    /// Drive common-mode detuning used for measurements, Hz.
    pub operating_point: f64,
    /// Covariance of (amplitude, tau1, phi0, offset).
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
}

impl CalibrationCurve {
    pub fn ideal(amplitude: f64, tau1: f64, phi0: f64) -> Self {
        let mut c = Self {
            amplitude,
            tau1,
            phi0,
            offset: 0.0,
            operating_point: 0.0,
            covariance: vec![vec![0.0; 4]; 4],
            chi2: 0.0,
        };
        c.operating_point = c.zero_crossing_near(0.0);
        c
    }

    /// Unit-amplitude curve for XY-normalized visibilities.
    pub fn xy(tau1: f64, phi0: f64) -> Self {
        Self::ideal(1.0, tau1, phi0)
    }

    pub fn eval(&self, delta: f64) -> f64 {
        self.amplitude * (2.0 * PI * delta * self.tau1 + self.phi0).sin() + self.offset
    }

    /// dν/dδ at the operating point.
    pub fn slope(&self) -> f64 {
        self.amplitude * 2.0 * PI * self.tau1 * (2.0 * PI * self.operating_point * self.tau1 + self.phi0).cos()
    }

    /// Positive-slope zero crossing closest to `delta`.
    pub fn zero_crossing_near(&self, delta: f64) -> f64 {
        let k = ((2.0 * PI * delta * self.tau1 + self.phi0) / (2.0 * PI)).round();
        (2.0 * PI * k - self.phi0) / (2.0 * PI * self.tau1)
    }

    pub fn with_operating_point(mut self, delta: f64) -> Self {
        self.operating_point = delta;
        self
    }

    pub fn period(&self) -> f64 {
        1.0 / self.tau1
    }
}

/// Free-period sinusoid fit used for calibration sweeps; no amplitude checks.
pub fn fit_sinusoid(trace: &Trace, tau1: f64) -> Result<CalibrationCurve, AnalysisError> {
    if trace.len() < 6 {
        return Err(AnalysisError::InsufficientData(format!("{} points", trace.len())));
    }
    if !(tau1 > 0.0) {
        return Err(AnalysisError::InvalidInput("tau1 must be positive".into()));
    }
    let u: Vec<f64> = trace.x.iter().map(|d| d * tau1).collect();
    let ymax = trace.y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let mean = trace.y.iter().sum::<f64>() / trace.len() as f64;
    let model = |p: &[f64], x: f64| p[0] * (2.0 * PI * x * p[1] + p[2]).sin() + p[3];
    let lo = [0.0, 0.98, -3.0 * PI, -2.0 * ymax];
    let hi = [10.0 * ymax, 1.02, 3.0 * PI, 2.0 * ymax];
    let w = trace.weights();
    let mut best: Option<LmResult> = None;
    for j in 0..STARTS {
        let phi = -PI + 2.0 * PI * j as f64 / STARTS as f64;
        let p0 = [ymax, 1.0, phi, mean];
        if let Ok(r) = levenberg_marquardt(&u, &trace.y, &w, &model, &p0, &lo, &hi, &LmOptions::default()) {
            if best.as_ref().is_none_or(|b| r.chi2 < b.chi2) {
                best = Some(r);
            }
        }
    }
    let r = best.ok_or_else(|| AnalysisError::NonConvergence("no start converged".into()))?;
    let cov = data_covariance(trace, &r);
    let d = [1.0, tau1, 1.0, 1.0];
    let mut c = cov.clone();
    for i in 0..4 {
        for j in 0..4 {
            c[(i, j)] = cov[(i, j)] * d[i] * d[j];
        }
    }
    let centre = 0.5 * (trace.x[0] + trace.x[trace.len() - 1]);
    let mut curve = CalibrationCurve {
        amplitude: r.params[0],
        tau1: r.params[1] * tau1,
        phi0: wrap_phase(r.params[2]),
        offset: r.params[3],
        operating_point: 0.0,
        covariance: covariance_rows(&c),
        chi2: r.chi2,
    };
    curve.operating_point = curve.zero_crossing_near(centre);
    Ok(curve)
}

/// Calibration fit of ν against δcm at fixed τ1 (period refined within ±2%).
pub fn fit_calibration(trace: &Trace, tau1: f64) -> Result<CalibrationCurve, AnalysisError> {
    if trace.is_empty() {
        return Err(AnalysisError::InsufficientData("empty sweep".into()));
    }
    let span = trace.x[trace.len() - 1] - trace.x[0];
    if span < 1.0 / tau1 {
        return Err(AnalysisError::SweepTooNarrow { span, period: 1.0 / tau1 });
    }
    let c = fit_sinusoid(trace, tau1)?;
    let sa = c.covariance[0][0].max(0.0).sqrt();
    if c.amplitude <= 2.0 * sa || c.amplitude < 1e-9 {
        return Err(AnalysisError::AmplitudeZero { amplitude: c.amplitude, sigma: sa });
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MzEstimate {
    /// Absolute Mz (reference + shift), Hz.
    pub mz: f64,
    /// Mz relative to the reference, Hz.
    pub shift: f64,
    /// dν/dMz at the inferred phase, 1/Hz.
    pub slope: f64,
    /// |shift| reached half a fringe period; the value may be wrapped.
    pub ambiguous: bool,
    /// |ν| near the fringe extremum, where the monotonic branch ends.
    pub saturated: bool,
}

impl MzEstimate {
    /// Propagates a visibility uncertainty to Mz.
    pub fn sigma(&self, sigma_nu: f64) -> f64 {
        sigma_nu / self.slope.abs().max(f64::MIN_POSITIVE)
    }
}

/// Inverts the calibration on the monotonic branch through the operating point.
///
/// A positive Mz shift raises both transitions, which the fixed drive sees as
/// a lower common-mode detuning.
pub fn visibility_to_mz(nu: f64, curve: &CalibrationCurve, reference: f64) -> Result<MzEstimate, AnalysisError> {
    if !(curve.amplitude > 0.0) || !(curve.tau1 > 0.0) {
        return Err(AnalysisError::InvalidInput("curve amplitude and tau1 must be positive".into()));
    }
    let x = (nu - curve.offset) / curve.amplitude;
    if !x.is_finite() || x.abs() > 1.0 + 1e-9 {
        return Err(AnalysisError::OutOfRange { value: nu, amplitude: curve.amplitude });
    }
    let x = x.clamp(-1.0, 1.0);
    let psi_op = 2.0 * PI * curve.operating_point * curve.tau1 + curve.phi0;
    let base = if psi_op.cos() >= 0.0 { x.asin() } else { PI - x.asin() };
    let k = ((psi_op - base) / (2.0 * PI)).round();
    let theta = base + 2.0 * PI * k;
    let delta_eff = (theta - curve.phi0) / (2.0 * PI * curve.tau1);
    let shift = curve.operating_point - delta_eff;
    let slope = -curve.amplitude * 2.0 * PI * curve.tau1 * theta.cos();
    Ok(MzEstimate {
        mz: reference + shift,
        shift,
        slope,
        ambiguous: shift.abs() >= 0.5 / curve.tau1 * (1.0 - 1e-12),
        saturated: x.abs() > 0.98,
    })
}

/// Unwraps a long-τ estimate using a coarse short-τ estimate: returns
/// `long + k/tau_long` with the integer k that best matches `short`.
pub fn disambiguate(short: f64, long: f64, tau_long: f64) -> f64 {
    let k = ((short - long) * tau_long).round();
    long + k / tau_long
}
