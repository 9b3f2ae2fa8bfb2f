//! Ground-state three-level spin: Hamiltonian parameters, two-tone drive,
//! analytic and numeric propagators in the drive frame.
//!
//! Basis order is `(|+1>, |0>, |-1>)`. Drive amplitudes are field-equivalent
//! frequencies `γB±` in Hz. All propagators are expressed in the frame rotating
//! with the two drive tones, with counter-rotating terms dropped.

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};
use thiserror::Error;

pub type C64 = Complex64;
pub type Mat3 = Matrix3<C64>;

/// Zero-field splitting, Hz.
pub const DEFAULT_D: f64 = 2.870e9;
/// Electron gyromagnetic ratio, Hz/T.
pub const DEFAULT_GAMMA: f64 = 28.024e9;
/// 14N hyperfine splitting, Hz.
pub const DEFAULT_HYPERFINE: f64 = 2.16e6;
/// π-pulse duration, s.
pub const DEFAULT_TPI: f64 = 50e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("transition frequencies must be positive (f+ = {0} Hz, f- = {1} Hz)")]
    NonPositiveFrequency(f64, f64),
    #[error("analytic propagator requires zero detunings (δcm = {0} Hz, δdiff = {1} Hz)")]
    Detuned(f64, f64),
    #[error("step size {dt} s exceeds limit {limit} s")]
    StepSize { dt: f64, limit: f64 },
    #[error("numeric propagation did not converge (max element change {0:e})")]
    NonConvergence(f64),
    #[error("state is not normalized (norm² = {0})")]
    NotNormalized(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinState {
    pub plus: C64,
    pub zero: C64,
    pub minus: C64,
}

impl SpinState {
    pub fn new(plus: C64, zero: C64, minus: C64) -> Self {
        Self { plus, zero, minus }
    }

    /// The optically polarized state |0>.
    pub fn ground() -> Self {
        Self::new(C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.plus.norm_sqr() + self.zero.norm_sqr() + self.minus.norm_sqr()
    }

    pub fn check_normalized(&self) -> Result<(), SpinError> {
        let n = self.norm_sqr();
        if (n - 1.0).abs() > 1e-9 || !n.is_finite() {
            return Err(SpinError::NotNormalized(n));
        }
        Ok(())
    }

    pub fn apply(&self, u: &Mat3) -> Self {
        let v = [self.plus, self.zero, self.minus];
        let mut out = [C64::new(0.0, 0.0); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = u[(i, 0)] * v[0] + u[(i, 1)] * v[1] + u[(i, 2)] * v[2];
        }
        Self::new(out[0], out[1], out[2])
    }
}

/// Squared moduli `(p+1, p0, p-1)`.
pub fn populations(state: &SpinState) -> (f64, f64, f64) {
    (state.plus.norm_sqr(), state.zero.norm_sqr(), state.minus.norm_sqr())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NVParams {
    /// Zero-field splitting, Hz.
    pub d: f64,
    /// Axial stress shift, Hz.
    pub mz: f64,
    /// Gyromagnetic ratio, Hz/T.
    pub gamma: f64,
    /// Axial bias field, T.
    pub bz: f64,
    /// Effective-field shift of this hyperfine line, Hz.
    pub hyperfine_offset: f64,
}

impl Default for NVParams {
    fn default() -> Self {
        Self { d: DEFAULT_D, mz: 0.0, gamma: DEFAULT_GAMMA, bz: 0.0, hyperfine_offset: 0.0 }
    }
}

impl NVParams {
    pub fn with_bz(mut self, bz: f64) -> Self {
        self.bz = bz;
        self
    }

    pub fn with_mz(mut self, mz: f64) -> Self {
        self.mz = mz;
        self
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        let all = [self.d, self.mz, self.gamma, self.bz, self.hyperfine_offset];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SpinError::InvalidParams("non-finite value".into()));
        }
        if self.d <= 0.0 {
            return Err(SpinError::InvalidParams(format!("D must be positive, got {}", self.d)));
        }
        if self.gamma <= 0.0 {
            return Err(SpinError::InvalidParams(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Diagonal of the lab-frame Hamiltonian in Hz: `(D+Mz+γBz+h, 0, D+Mz−γBz−h)`.
    pub fn energies(&self) -> [f64; 3] {
        let split = self.gamma * self.bz + self.hyperfine_offset;
        [self.d + self.mz + split, 0.0, self.d + self.mz - split]
    }
}

/// `(f+, f-)` of the two allowed transitions, Hz.
pub fn transition_frequencies(params: &NVParams) -> Result<(f64, f64), SpinError> {
    params.validate()?;
    let split = params.gamma * params.bz + params.hyperfine_offset;
    let fp = params.d + params.mz + split;
    let fm = params.d + params.mz - split;
    if fp <= 0.0 || fm <= 0.0 {
        return Err(SpinError::NonPositiveFrequency(fp, fm));
    }
    Ok((fp, fm))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DriveTones {
    /// Field-equivalent amplitude of the (+) tone, Hz.
    pub amp_plus: f64,
    /// Field-equivalent amplitude of the (−) tone, Hz.
    pub amp_minus: f64,
    pub phase_plus: f64,
    pub phase_minus: f64,
    /// Common-mode detuning, Hz.
    pub delta_cm: f64,
    /// Differential detuning, Hz.
    pub delta_diff: f64,
}

impl DriveTones {
    pub fn resonant(amp_plus: f64, amp_minus: f64) -> Self {
        Self { amp_plus, amp_minus, ..Default::default() }
    }

    pub fn with_phases(mut self, phase_plus: f64, phase_minus: f64) -> Self {
        self.phase_plus = phase_plus;
        self.phase_minus = phase_minus;
        self
    }

    pub fn with_detunings(mut self, delta_cm: f64, delta_diff: f64) -> Self {
        self.delta_cm = delta_cm;
        self.delta_diff = delta_diff;
        self
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        let all = [self.amp_plus, self.amp_minus, self.phase_plus, self.phase_minus, self.delta_cm, self.delta_diff];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SpinError::InvalidParams("non-finite drive value".into()));
        }
        if self.amp_plus < 0.0 || self.amp_minus < 0.0 {
            return Err(SpinError::InvalidParams("drive amplitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// Effective Rabi rate `ω_e = 2π·√(a+² + a−²)/(2√2)` in rad/s.
    pub fn rabi_rate(&self) -> f64 {
        2.0 * PI * self.amp_plus.hypot(self.amp_minus) / (2.0 * SQRT_2)
    }
}

/// Single-tone amplitude (Hz) whose π pulse lasts `tpi`.
pub fn pi_amplitude(tpi: f64) -> f64 {
    1.0 / (SQRT_2 * tpi)
}

/// Closed-form propagator for a resonant two-tone pulse of duration `t`.
pub fn resonant_propagator(tones: &DriveTones, t: f64) -> Result<Mat3, SpinError> {
    tones.validate()?;
    if tones.delta_cm != 0.0 || tones.delta_diff != 0.0 {
        return Err(SpinError::Detuned(tones.delta_cm, tones.delta_diff));
    }
    let b2 = tones.amp_plus * tones.amp_plus + tones.amp_minus * tones.amp_minus;
    if b2 == 0.0 || t == 0.0 {
        return Ok(Mat3::identity());
    }
    let b = b2.sqrt();
    let wt = tones.rabi_rate() * t;
    let (s, c) = wt.sin_cos();
    let (bp, bm) = (tones.amp_plus, tones.amp_minus);
    let ep = C64::from_polar(1.0, -tones.phase_plus);
    let em = C64::from_polar(1.0, -tones.phase_minus);
    let mi = C64::new(0.0, -1.0);
    let cross = ep * em.conj() * ((c - 1.0) * bp * bm / b2);
    let u = Mat3::new(
        C64::from((bm * bm + bp * bp * c) / b2),
        mi * ep * (s * bp / b),
        cross,
        mi * ep.conj() * (s * bp / b),
        C64::from(c),
        mi * em.conj() * (s * bm / b),
        cross.conj(),
        mi * em * (s * bm / b),
        C64::from((bp * bp + bm * bm * c) / b2),
    );
    Ok(u)
}

/// Drive-frame Hamiltonian in rad/s, `U = exp(−iHt)`.
///
/// Diagonal is `−2πΔ±` with `Δ± = δcm ± (δdiff − h)`; off-diagonal couplings
/// are `2π·a±/(2√2)·e^{∓iφ±}`.
pub fn drive_frame_hamiltonian(tones: &DriveTones, hyperfine_offset: f64) -> Mat3 {
    let two_pi = 2.0 * PI;
    let dp = tones.delta_cm + tones.delta_diff - hyperfine_offset;
    let dm = tones.delta_cm - tones.delta_diff + hyperfine_offset;
    let wp = C64::from_polar(two_pi * tones.amp_plus / (2.0 * SQRT_2), -tones.phase_plus);
    let wm = C64::from_polar(two_pi * tones.amp_minus / (2.0 * SQRT_2), -tones.phase_minus);
    let z = C64::new(0.0, 0.0);
    Mat3::new(C64::from(-two_pi * dp), wp, z, wp.conj(), z, wm.conj(), z, wm, C64::from(-two_pi * dm))
}

/// Matrix exponential by scaling and squaring of a Taylor series.
pub fn expm(a: &Mat3) -> Mat3 {
    let norm = (0..3).map(|j| (0..3).map(|i| a[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max);
    let mut s = 0u32;
    if norm > 0.25 {
        s = (norm / 0.25).log2().ceil() as u32;
    }
    let scaled = a.map(|z| z / 2f64.powi(s as i32));
    let mut sum = Mat3::identity();
    let mut term = Mat3::identity();
    for k in 1..=24 {
        term = term * scaled / C64::from(k as f64);
        sum += term;
        if term.iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

/// Exact drive-frame propagator for a constant drive over `t`.
pub fn drive_frame_propagator(tones: &DriveTones, hyperfine_offset: f64, t: f64) -> Mat3 {
    if t == 0.0 {
        return Mat3::identity();
    }
    let h = drive_frame_hamiltonian(tones, hyperfine_offset);
    expm(&(h * C64::new(0.0, -t)))
}

/// Free evolution in the drive frame: `diag(e^{i2πΔ+t}, 1, e^{i2πΔ−t})`.
pub fn free_evolution(delta_plus: f64, delta_minus: f64, t: f64) -> Mat3 {
    let z = C64::new(0.0, 0.0);
    Mat3::new(
        C64::from_polar(1.0, 2.0 * PI * delta_plus * t),
        z,
        z,
        z,
        C64::new(1.0, 0.0),
        z,
        z,
        z,
        C64::from_polar(1.0, 2.0 * PI * delta_minus * t),
    )
}

fn step_product(step: &Mat3, n: usize) -> Mat3 {
    let mut u = Mat3::identity();
    for _ in 0..n {
        u = step * u;
    }
    u
}

/// Fixed-step propagator for arbitrary detunings.
///
/// The generator is piecewise constant; each step is exponentiated exactly, so
/// the product is unitary by construction. A run at half the step size checks
/// convergence.
pub fn numeric_propagator(params: &NVParams, tones: &DriveTones, t: f64, dt: f64) -> Result<Mat3, SpinError> {
    params.validate()?;
    tones.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(SpinError::InvalidParams(format!("duration must be non-negative, got {t}")));
    }
    if t == 0.0 {
        return Ok(Mat3::identity());
    }
    if !(dt > 0.0) {
        return Err(SpinError::StepSize { dt, limit: t / 100.0 });
    }
    let h_off = params.hyperfine_offset;
    let dp = (tones.delta_cm + tones.delta_diff - h_off).abs();
    let dm = (tones.delta_cm - tones.delta_diff + h_off).abs();
    let f_max = dp.max(dm).max(tones.rabi_rate() / (2.0 * PI));
    let mut limit = t / 100.0;
    if f_max > 0.0 {
        limit = limit.min(1.0 / (50.0 * f_max));
    }
    if dt > limit * (1.0 + 1e-12) {
        return Err(SpinError::StepSize { dt, limit });
    }
    let n = (t / dt).ceil() as usize;
    let h = drive_frame_hamiltonian(tones, h_off);
    let coarse = step_product(&expm(&(h * C64::new(0.0, -t / n as f64))), n);
    let fine = step_product(&expm(&(h * C64::new(0.0, -t / (2 * n) as f64))), 2 * n);
    let change = (coarse - fine).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if change > 1e-8 {
        return Err(SpinError::NonConvergence(change));
    }
    Ok(fine)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Minus,
    Plus,
}

impl Manifold {
    pub fn other(self) -> Self {
        match self {
            Manifold::Minus => Manifold::Plus,
            Manifold::Plus => Manifold::Minus,
        }
    }
}

/// Resonant single-tone π pulse on `tone` with drive phase `phase`.
pub fn pi_pulse(tone: Manifold, phase: f64, tpi: f64) -> Mat3 {
    let a = pi_amplitude(tpi);
    let tones = match tone {
        Manifold::Plus => DriveTones::resonant(a, 0.0).with_phases(phase, 0.0),
        Manifold::Minus => DriveTones::resonant(0.0, a).with_phases(0.0, phase),
    };
    resonant_propagator(&tones, tpi).expect("resonant tones")
}

/// Propagator of one swap triplet with ideal resonant π pulses.
///
/// `startManifold = Minus` gives π(−) π(+) π(−); `Plus` the mirror ordering.
/// `minus_phase` is applied to every pulse on the (−) tone.
pub fn swap_propagator(start: Manifold, minus_phase: f64, tpi: f64) -> Mat3 {
    let phase = |m: Manifold| if m == Manifold::Minus { minus_phase } else { 0.0 };
    let outer = pi_pulse(start, phase(start), tpi);
    let inner = pi_pulse(start.other(), phase(start.other()), tpi);
    outer * inner * outer
}

/// Exchanges the |+1> and |−1> populations with a π-pulse triplet.
/// `phase_sign = -1` inverts the (−) tone phase, flipping the readout sign.
pub fn apply_swap(state: &SpinState, start: Manifold, phase_sign: i8, tpi: f64) -> Result<SpinState, SpinError> {
    state.check_normalized()?;
    if !(tpi > 0.0) {
        return Err(SpinError::InvalidParams(format!("tPi must be positive, got {tpi}")));
    }
    let phase = if phase_sign < 0 { PI } else { 0.0 };
    Ok(state.apply(&swap_propagator(start, phase, tpi)))
}

/// Largest element of `U†U − I`.
pub fn unitarity_error(u: &Mat3) -> f64 {
    (u.adjoint() * u - Mat3::identity()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_field_degenerate() {
        let (fp, fm) = transition_frequencies(&NVParams::default()).unwrap();
        assert_eq!(fp, 2.87e9);
        assert_eq!(fm, 2.87e9);
    }

    #[test]
    fn biased_frequencies() {
        // γBz = 58.88 MHz
        let p = NVParams { d: 2.87e9, mz: 1e6, gamma: 5.888e7 / 2.1e-3, bz: 2.1e-3, hyperfine_offset: 0.0 };
        let (fp, fm) = transition_frequencies(&p).unwrap();
        assert_relative_eq!(fp, 2.92988e9, max_relative = 1e-12);
        assert_relative_eq!(fm, 2.81212e9, max_relative = 1e-12);
        let e = p.energies();
        assert_relative_eq!(e[0] - e[1], fp, max_relative = 1e-14);
        assert_relative_eq!(e[2] - e[1], fm, max_relative = 1e-14);
    }

    #[test]
    fn rejects_negative_frequency() {
        let p = NVParams::default().with_bz(0.2);
        assert!(matches!(transition_frequencies(&p), Err(SpinError::NonPositiveFrequency(..))));
        let bad = NVParams { d: -1.0, ..Default::default() };
        assert!(transition_frequencies(&bad).is_err());
    }

    #[test]
    fn equal_tones_rabi_rate() {
        let b = 3e6;
        let w = DriveTones::resonant(b, b).rabi_rate();
        assert_relative_eq!(w, 2.0 * PI * b / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn resonant_identity_at_zero() {
        let tones = DriveTones::resonant(1e6, 2e6).with_phases(0.3, -1.1);
        assert!(max_diff(&resonant_propagator(&tones, 0.0).unwrap(), &Mat3::identity()) < 1e-15);
    }

    #[test]
    fn minus_tone_pi_transfer() {
        let b = 5e6;
        let tones = DriveTones::resonant(0.0, b);
        let t = PI / (2.0 * tones.rabi_rate());
        let u = resonant_propagator(&tones, t).unwrap();
        assert_relative_eq!(u[(1, 2)].norm_sqr(), 1.0, epsilon = 1e-14);
        let p = NVParams::default();
        let n = numeric_propagator(&p, &tones, t, t / 200.0).unwrap();
        assert!(max_diff(&u, &n) < 1e-10);
    }

    #[test]
    fn resonant_rejects_detuning() {
        let tones = DriveTones::resonant(1e6, 0.0).with_detunings(1.0, 0.0);
        assert!(matches!(resonant_propagator(&tones, 1e-7), Err(SpinError::Detuned(..))));
    }

    #[test]
    fn resonant_matches_exponential_with_phases() {
        let tones = DriveTones::resonant(4e6, 7e6).with_phases(0.7, -2.1);
        let t = 83e-9;
        let a = resonant_propagator(&tones, t).unwrap();
        let b = drive_frame_propagator(&tones, 0.0, t);
        assert!(max_diff(&a, &b) < 1e-12);
        assert!(unitarity_error(&a) < 1e-13);
    }

    #[test]
    fn free_evolution_phases() {
        // common mode: same sign on both; differential: opposite signs
        let p = NVParams::default();
        let t = 1e-6;
        let cm = numeric_propagator(&p, &DriveTones::default().with_detunings(1e5, 0.0), t, t / 100.0).unwrap();
        let want = free_evolution(1e5, 1e5, t);
        assert!(max_diff(&cm, &want) < 1e-12);
        assert_relative_eq!(cm[(0, 0)].arg(), 2.0 * PI * 0.1, epsilon = 1e-12);
        assert_relative_eq!(cm[(2, 2)].arg(), 2.0 * PI * 0.1, epsilon = 1e-12);
        let diff = numeric_propagator(&p, &DriveTones::default().with_detunings(0.0, 1e5), t, t / 100.0).unwrap();
        assert!(max_diff(&diff, &free_evolution(1e5, -1e5, t)) < 1e-12);
    }

    #[test]
    fn hyperfine_enters_as_differential() {
        let p = NVParams { hyperfine_offset: 2e5, ..Default::default() };
        let t = 1e-6;
        let u = numeric_propagator(&p, &DriveTones::default(), t, t / 100.0).unwrap();
        assert!(max_diff(&u, &free_evolution(-2e5, 2e5, t)) < 1e-12);
    }

    #[test]
    fn numeric_step_limits() {
        let p = NVParams::default();
        let tones = DriveTones::resonant(1e7, 0.0);
        assert!(matches!(numeric_propagator(&p, &tones, 1e-6, 2e-8), Err(SpinError::StepSize { .. })));
        assert_eq!(numeric_propagator(&p, &tones, 0.0, 1.0).unwrap(), Mat3::identity());
    }

    #[test]
    fn expm_of_zero_and_diagonal() {
        assert_eq!(expm(&Mat3::zeros()), Mat3::identity());
        let d =
            Mat3::from_diagonal(&nalgebra::Vector3::new(C64::new(0.0, 3.0), C64::new(-1.0, 0.0), C64::new(0.0, -40.0)));
        let e = expm(&d);
        assert!((e[(0, 0)] - C64::from_polar(1.0, 3.0)).norm() < 1e-13);
        assert!((e[(1, 1)] - C64::from((-1.0f64).exp())).norm() < 1e-13);
        assert!((e[(2, 2)] - C64::from_polar(1.0, -40.0)).norm() < 1e-12);
    }

    #[test]
    fn swap_exchanges_populations() {
        let tpi = DEFAULT_TPI;
        let s = SpinState::new(C64::from(0.3f64.sqrt()), C64::from(0.0), C64::from(0.7f64.sqrt()));
        for start in [Manifold::Minus, Manifold::Plus] {
            let out = apply_swap(&s, start, 1, tpi).unwrap();
            let (pp, p0, pm) = populations(&out);
            assert_relative_eq!(pp, 0.7, epsilon = 1e-12);
            assert_relative_eq!(p0, 0.0, epsilon = 1e-12);
            assert_relative_eq!(pm, 0.3, epsilon = 1e-12);
            let back = apply_swap(&out, start, 1, tpi).unwrap();
            let (pp, _, pm) = populations(&back);
            assert_relative_eq!(pp, 0.3, epsilon = 1e-10);
            assert_relative_eq!(pm, 0.7, epsilon = 1e-10);
        }
    }

    #[test]
    fn swap_moves_superposition_to_plus_manifold() {
        let h = C64::from(0.5f64.sqrt());
        let s = SpinState::new(C64::from(0.0), h, h);
        let out = apply_swap(&s, Manifold::Minus, 1, DEFAULT_TPI).unwrap();
        let (pp, p0, pm) = populations(&out);
        assert_relative_eq!(pp, 0.5, epsilon = 1e-12);
        assert_relative_eq!(p0, 0.5, epsilon = 1e-12);
        assert_relative_eq!(pm, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn swap_phase_sign_flips_coherence() {
        let h = C64::from(0.5f64.sqrt());
        let s = SpinState::new(C64::from(0.0), h, h);
        let a = apply_swap(&s, Manifold::Minus, 1, DEFAULT_TPI).unwrap();
        let b = apply_swap(&s, Manifold::Minus, -1, DEFAULT_TPI).unwrap();
        let ca = a.plus * a.zero.conj();
        let cb = b.plus * b.zero.conj();
        assert!((ca + cb).norm() < 1e-12);
    }

    #[test]
    fn swap_rejects_unnormalized() {
        let s = SpinState::new(C64::from(1.0), C64::from(1.0), C64::from(0.0));
        assert!(matches!(apply_swap(&s, Manifold::Minus, 1, DEFAULT_TPI), Err(SpinError::NotNormalized(_))));
    }

    #[test]
    fn populations_examples() {
        assert_eq!(populations(&SpinState::new(C64::from(1.0), C64::from(0.0), C64::from(0.0))), (1.0, 0.0, 0.0));
        let h = C64::from(0.5f64.sqrt());
        let (a, b, c) = populations(&SpinState::new(C64::from(0.0), h, h));
        assert_eq!(a, 0.0);
        assert_relative_eq!(b, 0.5, epsilon = 1e-15);
        assert_relative_eq!(c, 0.5, epsilon = 1e-15);
    }
}
