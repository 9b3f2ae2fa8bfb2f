//! Pulse sequences (strain-CPMG, Ramsey) and their ensemble simulation.

use crate::spin::{
    drive_frame_propagator, pi_amplitude, resonant_propagator, transition_frequencies, DriveTones, Manifold, Mat3,
    NVParams, SpinError, SpinState, C64, DEFAULT_TPI,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("strain-CPMG needs an even number of swaps >= 2, got {0}")]
    OddSwaps(usize),
    #[error("free evolution {tau} s too short for {n_swaps} swaps of tPi = {tpi} s")]
    TauTooShort { tau: f64, n_swaps: usize, tpi: f64 },
    #[error("invalid duration: {0}")]
    InvalidDuration(String),
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble weights sum to {0}, expected 1")]
    WeightNormalization(f64),
    #[error("sequences in a family must share pulse structure")]
    StructureMismatch,
    #[error("tau grid must be strictly ascending")]
    UnsortedGrid,
    #[error(transparent)]
    Spin(#[from] SpinError),
}

/// Readout phases in the fixed order used by [`FluorescenceResult`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadoutPhase {
    #[serde(rename = "+X")]
    PlusX,
    #[serde(rename = "-X")]
    MinusX,
    #[serde(rename = "+Y")]
    PlusY,
    #[serde(rename = "-Y")]
    MinusY,
}

impl ReadoutPhase {
    pub const ALL: [ReadoutPhase; 4] = [Self::PlusX, Self::MinusX, Self::PlusY, Self::MinusY];

    pub fn index(self) -> usize {
        match self {
            Self::PlusX => 0,
            Self::MinusX => 1,
            Self::PlusY => 2,
            Self::MinusY => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PulseModel {
    /// Zero-duration resonant rotations; detunings act only during free evolution.
    #[default]
    Instantaneous,
    /// Pulses last their nominal duration and see the member's detunings.
    Finite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    StrainCpmg,
    Ramsey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub tone: Manifold,
    /// Rotation in units of π (0.5 or 1).
    pub angle: f64,
    pub phase: f64,
    pub duration: f64,
    /// Extra phase per readout, in [`ReadoutPhase::ALL`] order.
    pub readout_offsets: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    Pulse(Pulse),
    Free { duration: f64 },
}

/// Pulse realization shared by every sequence in a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSettings {
    pub tpi: f64,
    pub model: PulseModel,
    /// Fractional Rabi amplitude error applied to every pulse.
    pub amplitude_error: f64,
    /// Relative MW amplitude at the sensor (depth falloff).
    pub mw_scale: f64,
    /// Shortest allowed free interval between pulses, s.
    pub min_interval: f64,
    /// Phase offset used by the ideal-phase fast path, rad.
    pub phi0: f64,
    /// Parameters the drive tones are tuned to.
    pub reference: NVParams,
}

impl Default for PulseSettings {
    fn default() -> Self {
        Self {
            tpi: DEFAULT_TPI,
            model: PulseModel::Instantaneous,
            amplitude_error: 0.0,
            mw_scale: 1.0,
            min_interval: 0.0,
            phi0: 0.0,
            reference: NVParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub protocol: Protocol,
    pub segments: Vec<Segment>,
    pub readout: ReadoutPhase,
    pub n_swaps: usize,
    /// Total free evolution, s.
    pub tau: f64,
    pub delta_cm: f64,
    pub delta_diff: f64,
    pub settings: PulseSettings,
}

impl PulseSequence {
    pub fn total_duration(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Pulse(p) => p.duration,
                Segment::Free { duration } => *duration,
            })
            .sum()
    }

    pub fn free_time(&self) -> f64 {
        self.segments.iter().map(|s| if let Segment::Free { duration } = s { *duration } else { 0.0 }).sum()
    }

    pub fn pulse_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Pulse(_))).count()
    }

    pub fn with_readout(mut self, readout: ReadoutPhase) -> Self {
        self.readout = readout;
        self
    }

    fn same_structure(&self, other: &Self) -> bool {
        self.segments.len() == other.segments.len()
            && self.settings == other.settings
            && self.delta_cm == other.delta_cm
            && self.delta_diff == other.delta_diff
            && self.segments.iter().zip(&other.segments).all(|(a, b)| match (a, b) {
                (Segment::Pulse(x), Segment::Pulse(y)) => x == y,
                (Segment::Free { .. }, Segment::Free { .. }) => true,
                _ => false,
            })
    }
}

fn pulse(tone: Manifold, angle: f64, phase: f64, tpi: f64) -> Segment {
    Segment::Pulse(Pulse { tone, angle, phase, duration: angle * tpi, readout_offsets: None })
}

fn check_positive(name: &str, v: f64) -> Result<(), SequenceError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(SequenceError::InvalidDuration(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Strain-CPMG with default pulse settings.
pub fn build_strain_cpmg(
    n_swaps: usize,
    tau: f64,
    delta_cm: f64,
    delta_diff: f64,
    tpi: f64,
    readout: ReadoutPhase,
) -> Result<PulseSequence, SequenceError> {
    let settings = PulseSettings { tpi, ..Default::default() };
    build_strain_cpmg_with(n_swaps, tau, delta_cm, delta_diff, readout, &settings)
}

/// π/2(−) · free · [swap · free]×N · π/2(−).
///
/// Free intervals are τ/2N, τ/N (N−1 times), τ/2N so each manifold collects
/// τ/2. Swaps alternate between the (−)-first and (+)-first orderings. The
/// readout phase rides on the (−) tone of the last swap; the final π/2 is at
/// phase π/2, giving f = fi·(1 ± A sinΘ) for ±X and fi·(1 ± A cosΘ) for ±Y.
pub fn build_strain_cpmg_with(
    n_swaps: usize,
    tau: f64,
    delta_cm: f64,
    delta_diff: f64,
    readout: ReadoutPhase,
    settings: &PulseSettings,
) -> Result<PulseSequence, SequenceError> {
    if n_swaps < 2 || n_swaps % 2 != 0 {
        return Err(SequenceError::OddSwaps(n_swaps));
    }
    check_positive("tPi", settings.tpi)?;
    check_positive("tau", tau)?;
    if tau <= 3.0 * n_swaps as f64 * settings.tpi {
        return Err(SequenceError::TauTooShort { tau, n_swaps, tpi: settings.tpi });
    }
    let n = n_swaps as f64;
    if tau / (2.0 * n) < settings.min_interval {
        return Err(SequenceError::InvalidDuration(format!(
            "first interval {} s is below the minimum {} s",
            tau / (2.0 * n),
            settings.min_interval
        )));
    }
    let tpi = settings.tpi;
    let mut segs = vec![pulse(Manifold::Minus, 0.5, 0.0, tpi), Segment::Free { duration: tau / (2.0 * n) }];
    let mut start = Manifold::Minus;
    for k in 0..n_swaps {
        let last = k + 1 == n_swaps;
        for tone in [start, start.other(), start] {
            let mut p = Pulse { tone, angle: 1.0, phase: 0.0, duration: tpi, readout_offsets: None };
            if last && tone == Manifold::Minus {
                p.readout_offsets = Some([0.0, PI, -PI / 2.0, PI / 2.0]);
            }
            segs.push(Segment::Pulse(p));
        }
        let d = if last { tau / (2.0 * n) } else { tau / n };
        segs.push(Segment::Free { duration: d });
        start = start.other();
    }
    segs.push(pulse(Manifold::Minus, 0.5, PI / 2.0, tpi));
    Ok(PulseSequence {
        protocol: Protocol::StrainCpmg,
        segments: segs,
        readout,
        n_swaps,
        tau,
        delta_cm,
        delta_diff,
        settings: *settings,
    })
}

/// Single-quantum Ramsey on the |0>↔|+1> transition with default settings.
pub fn build_ramsey(tau: f64, detuning: f64, tpi: f64) -> Result<PulseSequence, SequenceError> {
    let settings = PulseSettings { tpi, ..Default::default() };
    build_ramsey_with(tau, detuning, ReadoutPhase::PlusX, &settings)
}

/// π/2(+) — free(τ) — π/2(+); the readout sets the phase of the second pulse.
/// `tau = 0` omits the free segment.
pub fn build_ramsey_with(
    tau: f64,
    detuning: f64,
    readout: ReadoutPhase,
    settings: &PulseSettings,
) -> Result<PulseSequence, SequenceError> {
    check_positive("tPi", settings.tpi)?;
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(SequenceError::InvalidDuration(format!("tau must be non-negative, got {tau}")));
    }
    if tau > 0.0 && tau <= settings.tpi {
        return Err(SequenceError::InvalidDuration(format!("tau {tau} s must exceed tPi {} s", settings.tpi)));
    }
    let tpi = settings.tpi;
    let mut segs = vec![pulse(Manifold::Plus, 0.5, 0.0, tpi)];
    if tau > 0.0 {
        segs.push(Segment::Free { duration: tau });
    }
    segs.push(Segment::Pulse(Pulse {
        tone: Manifold::Plus,
        angle: 0.5,
        phase: 0.0,
        duration: 0.5 * tpi,
        readout_offsets: Some([PI / 2.0, -PI / 2.0, PI, 0.0]),
    }));
    Ok(PulseSequence {
        protocol: Protocol::Ramsey,
        segments: segs,
        readout,
        n_swaps: 0,
        tau,
        delta_cm: detuning,
        delta_diff: 0.0,
        settings: *settings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub params: NVParams,
    pub weight: f64,
    /// Common-mode shift of both transitions, Hz.
    pub cm_offset: f64,
    /// Differential shift (f+ up, f− down), Hz; includes hyperfine.
    pub diff_offset: f64,
}

impl EnsembleMember {
    pub fn single(params: NVParams) -> Self {
        Self { params, weight: 1.0, cm_offset: 0.0, diff_offset: 0.0 }
    }

    /// Drive-frame detunings `(Δ+, Δ−)` of this member under `seq`.
    pub fn detunings(&self, seq: &PulseSequence) -> Result<(f64, f64), SequenceError> {
        let (fp_ref, fm_ref) = transition_frequencies(&seq.settings.reference)?;
        let (fp, fm) = transition_frequencies(&self.params)?;
        let dp = (fp_ref - fp) + seq.delta_cm + seq.delta_diff - self.cm_offset - self.diff_offset;
        let dm = (fm_ref - fm) + seq.delta_cm - seq.delta_diff - self.cm_offset + self.diff_offset;
        Ok((dp, dm))
    }
}

pub fn check_weights(ensemble: &[EnsembleMember]) -> Result<(), SequenceError> {
    if ensemble.is_empty() {
        return Err(SequenceError::EmptyEnsemble);
    }
    let total: f64 = ensemble.iter().map(|m| m.weight).sum();
    if (total - 1.0).abs() > 1e-9 || ensemble.iter().any(|m| !(m.weight >= 0.0)) {
        return Err(SequenceError::WeightNormalization(total));
    }
    Ok(())
}

/// Nodes and weights approximating a Lorentzian of full width `fwhm`.
///
/// A uniform grid truncated at `min(64, (n−1)/4)` half-widths with weights
/// proportional to the density. Refining `n` beyond 257 shrinks the spacing at
/// fixed cutoff. `n` is forced odd so the centre is a node.
pub fn lorentzian_nodes(fwhm: f64, n: usize) -> Vec<(f64, f64)> {
    if fwhm <= 0.0 || n <= 1 {
        return vec![(0.0, 1.0)];
    }
    let n = if n % 2 == 0 { n + 1 } else { n };
    let half = 0.5 * fwhm;
    let cutoff = (((n - 1) as f64) / 4.0).min(64.0);
    let h = 2.0 * cutoff / (n - 1) as f64;
    let m = (n / 2) as i64;
    let raw: Vec<(f64, f64)> = (-m..=m)
        .map(|k| {
            let x = k as f64 * h;
            (x * half, 1.0 / (1.0 + x * x))
        })
        .collect();
    let total: f64 = raw.iter().map(|r| r.1).sum();
    raw.into_iter().map(|(x, w)| (x, w / total)).collect()
}

/// Product ensemble over common-mode nodes, differential nodes and hyperfine lines.
pub fn product_ensemble(
    params: NVParams,
    cm: &[(f64, f64)],
    diff: &[(f64, f64)],
    hyperfine: &[f64],
) -> Vec<EnsembleMember> {
    let hf_w = 1.0 / hyperfine.len().max(1) as f64;
    let hf: Vec<f64> = if hyperfine.is_empty() { vec![0.0] } else { hyperfine.to_vec() };
    let mut out = Vec::with_capacity(cm.len() * diff.len() * hf.len());
    for &(c, wc) in cm {
        for &(d, wd) in diff {
            for &h in &hf {
                out.push(EnsembleMember { params, weight: wc * wd * hf_w, cm_offset: c, diff_offset: d + h });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluorescenceResult {
    pub f_x_plus: f64,
    pub f_x_minus: f64,
    pub f_y_plus: f64,
    pub f_y_minus: f64,
    pub fi: f64,
}

impl FluorescenceResult {
    fn from_p0(p0: [f64; 4], contrast: f64, fi: f64) -> Self {
        let f = |p: f64| fi * (1.0 + contrast * (2.0 * p - 1.0));
        Self { f_x_plus: f(p0[0]), f_x_minus: f(p0[1]), f_y_plus: f(p0[2]), f_y_minus: f(p0[3]), fi }
    }

    pub fn get(&self, r: ReadoutPhase) -> f64 {
        match r {
            ReadoutPhase::PlusX => self.f_x_plus,
            ReadoutPhase::MinusX => self.f_x_minus,
            ReadoutPhase::PlusY => self.f_y_plus,
            ReadoutPhase::MinusY => self.f_y_minus,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            f_x_plus: self.f_x_plus * k,
            f_x_minus: self.f_x_minus * k,
            f_y_plus: self.f_y_plus * k,
            f_y_minus: self.f_y_minus * k,
            fi: self.fi * k,
        }
    }
}

enum Op {
    Mat(Mat3),
    Slot(Box<[Mat3; 4]>),
    Free(usize),
}

fn pulse_matrix(p: &Pulse, phase: f64, s: &PulseSettings, dp: f64, dm: f64) -> Mat3 {
    let a = pi_amplitude(s.tpi) * (1.0 + s.amplitude_error) * s.mw_scale;
    let mut tones = match p.tone {
        Manifold::Plus => DriveTones::resonant(a, 0.0).with_phases(phase, 0.0),
        Manifold::Minus => DriveTones::resonant(0.0, a).with_phases(0.0, phase),
    };
    let t = p.angle * s.tpi;
    match s.model {
        PulseModel::Instantaneous => resonant_propagator(&tones, t).expect("resonant tones"),
        PulseModel::Finite => {
            tones = tones.with_detunings(0.5 * (dp + dm), 0.5 * (dp - dm));
            drive_frame_propagator(&tones, 0.0, t)
        }
    }
}

fn compile(seq: &PulseSequence, dp: f64, dm: f64) -> Vec<Op> {
    seq.segments
        .iter()
        .enumerate()
        .map(|(i, seg)| match seg {
            Segment::Free { .. } => Op::Free(i),
            Segment::Pulse(p) => match p.readout_offsets {
                None => Op::Mat(pulse_matrix(p, p.phase, &seq.settings, dp, dm)),
                Some(off) => Op::Slot(Box::new(off.map(|o| pulse_matrix(p, p.phase + o, &seq.settings, dp, dm)))),
            },
        })
        .collect()
}

fn free_step(s: &mut SpinState, dp: f64, dm: f64, t: f64) {
    s.plus *= C64::from_polar(1.0, 2.0 * PI * dp * t);
    s.minus *= C64::from_polar(1.0, 2.0 * PI * dm * t);
}

/// |0> populations for the four readouts of one member.
fn run_compiled(ops: &[Op], seq: &PulseSequence, dp: f64, dm: f64) -> [f64; 4] {
    let duration = |i: usize| match &seq.segments[i] {
        Segment::Free { duration } => *duration,
        Segment::Pulse(_) => 0.0,
    };
    let mut state = SpinState::ground();
    let mut k = 0;
    while k < ops.len() {
        match &ops[k] {
            Op::Mat(m) => state = state.apply(m),
            Op::Free(i) => free_step(&mut state, dp, dm, duration(*i)),
            Op::Slot(_) => break,
        }
        k += 1;
    }
    let mut out = [0.0; 4];
    for (r, o) in out.iter_mut().enumerate() {
        let mut s = state;
        for op in &ops[k..] {
            match op {
                Op::Mat(m) => s = s.apply(m),
                Op::Free(i) => free_step(&mut s, dp, dm, duration(*i)),
                Op::Slot(ms) => s = s.apply(&ms[r]),
            }
        }
        *o = s.zero.norm_sqr();
    }
    out
}

/// Simulates every sequence of a family sharing one pulse structure.
///
/// Pulse propagators are built once per member; only free-evolution durations
/// differ between sequences. The weighted sum runs in member order so results
/// do not depend on thread scheduling.
pub fn simulate_family(
    seqs: &[PulseSequence],
    ensemble: &[EnsembleMember],
    contrast: f64,
    fi: f64,
) -> Result<Vec<FluorescenceResult>, SequenceError> {
    check_weights(ensemble)?;
    let Some(first) = seqs.first() else {
        return Ok(Vec::new());
    };
    if seqs.iter().any(|s| !first.same_structure(s)) {
        return Err(SequenceError::StructureMismatch);
    }
    let mut dets = Vec::with_capacity(ensemble.len());
    for m in ensemble {
        dets.push(m.detunings(first)?);
    }
    let per_member = crate::par::map(&dets, |&(dp, dm)| {
        let ops = compile(first, dp, dm);
        seqs.iter().map(|s| run_compiled(&ops, s, dp, dm)).collect::<Vec<_>>()
    });
    let mut acc = vec![[0.0f64; 4]; seqs.len()];
    for (m, rows) in ensemble.iter().zip(&per_member) {
        for (a, r) in acc.iter_mut().zip(rows) {
            for k in 0..4 {
                a[k] += m.weight * r[k];
            }
        }
    }
    Ok(acc.into_iter().map(|p| FluorescenceResult::from_p0(p, contrast, fi)).collect())
}

/// Ensemble-averaged fluorescence for all four readout phases.
pub fn simulate(
    sequence: &PulseSequence,
    ensemble: &[EnsembleMember],
    contrast: f64,
    fi: f64,
) -> Result<FluorescenceResult, SequenceError> {
    Ok(simulate_family(std::slice::from_ref(sequence), ensemble, contrast, fi)?[0])
}

/// Sequence builder parameterized by free-evolution time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SequenceFamily {
    StrainCpmg { n_swaps: usize, delta_cm: f64, delta_diff: f64, settings: PulseSettings },
    Ramsey { detuning: f64, settings: PulseSettings },
}

impl SequenceFamily {
    pub fn build(&self, tau: f64) -> Result<PulseSequence, SequenceError> {
        match self {
            Self::StrainCpmg { n_swaps, delta_cm, delta_diff, settings } => {
                build_strain_cpmg_with(*n_swaps, tau, *delta_cm, *delta_diff, ReadoutPhase::PlusX, settings)
            }
            Self::Ramsey { detuning, settings } => build_ramsey_with(tau, *detuning, ReadoutPhase::PlusX, settings),
        }
    }
}

/// Visibility from the interlaced ±X pair at every τ.
pub fn visibility_trace(
    family: &SequenceFamily,
    tau_grid: &[f64],
    ensemble: &[EnsembleMember],
    contrast: f64,
) -> Result<crate::analysis::Trace, SequenceError> {
    if tau_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SequenceError::UnsortedGrid);
    }
    let seqs = tau_grid.iter().map(|&t| family.build(t)).collect::<Result<Vec<_>, _>>()?;
    let res = simulate_family(&seqs, ensemble, contrast, 1.0)?;
    let y = res.iter().map(|r| crate::analysis::visibility(r.f_x_plus, r.f_x_minus).unwrap_or(0.0)).collect();
    Ok(crate::analysis::Trace::new(tau_grid.to_vec(), y, vec![0.0; tau_grid.len()]).expect("equal lengths"))
}

/// Closed-form phase for instantaneous pulses: `2πΔcm·τ + φ0` for strain-CPMG
/// (independent of Bz and δdiff) and `2πΔ+·τ + φ0` for Ramsey.
pub fn ideal_phase(sequence: &PulseSequence, member: &EnsembleMember) -> f64 {
    let (dp, dm) = member.detunings(sequence).unwrap_or((sequence.delta_cm, sequence.delta_cm));
    let rate = match sequence.protocol {
        Protocol::StrainCpmg => 0.5 * (dp + dm),
        Protocol::Ramsey => dp,
    };
    2.0 * PI * rate * sequence.tau + sequence.settings.phi0
}
