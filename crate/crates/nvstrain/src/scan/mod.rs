//! Virtual experiments: confocal scans, gradiometry, QDM imaging, ODMR maps,
//! calibration sweeps and FOV stitching.

mod confocal;
mod gradiometry;
mod odmr;
mod qdm;
mod stitch;

pub use confocal::{run_confocal_scan, ConfocalConfig, ReadoutMode};
pub use gradiometry::{
    run_gradiometry_scan, DriftLogEntry, DriftTracker, GradiometryConfig, GradiometryResult, SeriesPoint,
};
pub use odmr::{run_odmr_map, OdmrMapResult, OdmrScanConfig};
pub use qdm::{run_qdm_imaging, QdmConfig, QdmFov, QdmResult};
pub use stitch::{stitch, StitchResult};

use crate::analysis::{
    fit_calibration, fit_sinusoid, AnalysisError, CalibrationCurve, GridGeometry, MapMetadata, Trace,
};
use crate::noise::{APDConfig, FloorInputs, LockInCameraConfig, NoiseError};
use crate::sample::{EnsembleSpec, Footprint, InstrumentProfiles, SampleError, StrainField};
use crate::sequence::{
    build_strain_cpmg_with, simulate, EnsembleMember, FluorescenceResult, PulseSettings, ReadoutPhase, SequenceError,
};
use crate::spin::NVParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("servo diverged at t = {time} s: reference residual {residual} Hz exceeds {limit} Hz")]
    ServoDivergence { time: f64, residual: f64, limit: f64 },
    #[error("FOV graph is disconnected: {0}")]
    Disconnected(String),
    #[error("overlap between FOV {0} and {1} is {2:.1}% of the FOV, need ≥ 10%")]
    InsufficientOverlap(usize, usize, f64),
    #[error("io: {0}")]
    Io(String),
}

impl ScanError {
    /// 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScanError::Config(_) | ScanError::Io(_) => 2,
            ScanError::Sample(SampleError::Scene(_) | SampleError::InvalidSpec(_)) => 2,
            ScanError::Noise(NoiseError::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Confocal,
    Gradiometry,
    Qdm,
    Odmr,
    Calibrate,
    Allan,
}

/// Scan grid. `depths` are focus displacements; physical depth is
/// `depth_scale × displacement`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub origin: [f64; 2],
    pub spacing: [f64; 2],
    pub extent: [f64; 2],
    pub depths: Vec<f64>,
    pub depth_scale: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { origin: [0.0, 0.0], spacing: [1.0, 1.0], extent: [8.0, 8.0], depths: vec![0.0], depth_scale: 2.4 }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<(), ScanError> {
        if self.spacing.iter().any(|s| !(*s > 0.0)) || self.extent.iter().any(|e| !(*e > 0.0)) {
            return Err(ScanError::Config("grid spacing and extent must be positive".into()));
        }
        if self.depths.is_empty() || !(self.depth_scale > 0.0) {
            return Err(ScanError::Config("need at least one depth and a positive depth scale".into()));
        }
        if self.depths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ScanError::Config("depths must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 2] {
        [0, 1].map(|k| ((self.extent[k] / self.spacing[k]) + 1e-9).floor().max(1.0) as usize)
    }

    /// Geometry with physical depths; uniform depth spacing is required for
    /// multi-slice stacks.
    pub fn geometry(&self) -> Result<GridGeometry, ScanError> {
        let [nx, ny] = self.dims();
        let z: Vec<f64> = self.depths.iter().map(|d| d * self.depth_scale).collect();
        let dz = if z.len() > 1 { z[1] - z[0] } else { 1.0 };
        if z.windows(2).any(|w| ((w[1] - w[0]) - dz).abs() > 1e-9 * dz.abs().max(1.0)) {
            return Err(ScanError::Config("depths must be evenly spaced".into()));
        }
        Ok(GridGeometry {
            origin: [self.origin[0], self.origin[1], z[0]],
            spacing: [self.spacing[0], self.spacing[1], dz],
            dims: [nx, ny, z.len()],
        })
    }
}

/// Measurement sequence and timing shared by every mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub tau1: f64,
    pub n_swaps: usize,
    /// Operating-point hint; the nearest positive-slope zero crossing is used.
    pub delta_cm: f64,
    pub delta_diff: f64,
    /// Measurement contrast A.
    pub contrast: f64,
    /// Visibility measurements (±X pairs) per second.
    pub rep_rate: f64,
    /// APD voltage of the unpolarized ensemble at full laser power, V.
    pub signal_voltage: f64,
    /// Integration time per point, s.
    pub dwell: f64,
    pub pulses: PulseSettings,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            tau1: 21e-6,
            n_swaps: 2,
            delta_cm: 0.0,
            delta_diff: 0.0,
            contrast: 0.0272,
            rep_rate: 3.8e3,
            signal_voltage: 5.2e-3,
            dwell: 1.0,
            pulses: PulseSettings::default(),
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<(), ScanError> {
        if !(self.tau1 > 0.0) || !(self.dwell > 0.0) || !(self.rep_rate > 0.0) || !(self.signal_voltage > 0.0) {
            return Err(ScanError::Config("tau1, dwell, rep_rate and signal_voltage must be positive".into()));
        }
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return Err(ScanError::Config("contrast must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// ±X pairs integrated in `time` seconds.
    pub fn pairs(&self, time: f64) -> usize {
        ((self.rep_rate * time).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Sweep half-width in fringe periods.
    pub periods: f64,
    pub points: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { periods: 1.5, points: 61 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllanConfig {
    pub sample_interval: f64,
    /// Averaging times; empty means octave spacing up to N/2 samples.
    pub taus: Vec<f64>,
}

impl Default for AllanConfig {
    fn default() -> Self {
        Self { sample_interval: 1.0, taus: Vec::new() }
    }
}

/// Ensemble used by scans: with instantaneous pulses differential strata and
/// hyperfine lines do not change the strain-CPMG signal, so they are off.
pub fn scan_ensemble_default() -> EnsembleSpec {
    EnsembleSpec { diff_strata: 1, include_hyperfine: false, merge_resolution: 200.0, ..EnsembleSpec::default() }
}

/// Top-level configuration document (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Scene file; its primitives are appended to `scene`.
    pub scene_file: Option<PathBuf>,
    pub scene: StrainField,
    pub nv: NVParams,
    pub grid: GridConfig,
    pub sequence: SequenceConfig,
    pub ensemble: EnsembleSpec,
    pub profiles: InstrumentProfiles,
    pub apd: APDConfig,
    pub floor: FloorInputs,
    pub camera: LockInCameraConfig,
    pub calibration: CalibrationConfig,
    pub confocal: ConfocalConfig,
    pub gradiometry: GradiometryConfig,
    pub qdm: QdmConfig,
    pub odmr: OdmrScanConfig,
    pub allan: AllanConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seed: None,
            output: None,
            scene_file: None,
            scene: StrainField::default(),
            nv: NVParams::default(),
            grid: GridConfig::default(),
            sequence: SequenceConfig::default(),
            ensemble: scan_ensemble_default(),
            profiles: InstrumentProfiles::default(),
            apd: APDConfig::default(),
            floor: FloorInputs::default(),
            camera: LockInCameraConfig::default(),
            calibration: CalibrationConfig::default(),
            confocal: ConfocalConfig::default(),
            gradiometry: GradiometryConfig::default(),
            qdm: QdmConfig::default(),
            odmr: OdmrScanConfig::default(),
            allan: AllanConfig::default(),
        }
    }
}

impl ScanConfig {
    pub fn from_toml(s: &str) -> Result<Self, ScanError> {
        toml::from_str(s).map_err(|e| ScanError::Config(e.to_string()))
    }

    /// Loads a config file and resolves its scene file relative to it.
    pub fn load(path: &Path) -> Result<Self, ScanError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScanError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(scene) = cfg.scene_file.take() {
            let p = if scene.is_relative() { path.parent().unwrap_or(Path::new(".")).join(&scene) } else { scene };
            cfg.scene_file = Some(p);
        }
        cfg.resolve_scene()?;
        Ok(cfg)
    }

    /// Appends the scene file's primitives to the inline scene (once).
    pub fn resolve_scene(&mut self) -> Result<(), ScanError> {
        if let Some(p) = self.scene_file.take() {
            let text = std::fs::read_to_string(&p).map_err(|e| ScanError::Config(format!("{}: {e}", p.display())))?;
            let f = StrainField::from_toml(&text)?;
            self.scene.primitives.extend(f.primitives);
        }
        Ok(())
    }

    /// The drive tones are tuned to `nv`; `sequence.pulses.reference` is overridden.
    pub fn to_toml(&self) -> Result<String, ScanError> {
        toml::to_string(self).map_err(|e| ScanError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, output location excluded.
    pub fn hash(&self) -> String {
        let text = Self { output: None, ..self.clone() }.to_toml().unwrap_or_default();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed(&self) -> Result<u64, ScanError> {
        self.seed.ok_or_else(|| ScanError::Config("an explicit seed is required".into()))
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        self.seed()?;
        self.grid.validate()?;
        self.sequence.validate()?;
        self.ensemble.validate()?;
        self.profiles.validate()?;
        self.apd.validate()?;
        self.scene.validate()?;
        self.nv.validate().map_err(|e| ScanError::Config(e.to_string()))?;
        Ok(())
    }

    fn metadata(&self, virtual_time_s: f64) -> MapMetadata {
        let mut m = MapMetadata::new();
        m.seed = self.seed;
        m.config_hash = Some(self.hash());
        m.virtual_time_s = virtual_time_s;
        m
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for work item `index` of stream `stream`.
pub fn point_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ index))
}

/// The ideal-pulse reference ensemble used for calibration: no strain.
fn reference_ensemble(cfg: &ScanConfig) -> Result<Vec<EnsembleMember>, ScanError> {
    Ok(crate::sample::voxel_ensemble::<ChaCha8Rng>(
        [0.0; 3],
        &Footprint::delta(),
        &StrainField::default(),
        &cfg.ensemble,
        cfg.nv,
        None,
    )?)
}

fn pulse_settings(cfg: &ScanConfig, mw_scale: f64) -> PulseSettings {
    PulseSettings { mw_scale, reference: NVParams { mz: 0.0, ..cfg.nv }, ..cfg.sequence.pulses }
}

/// Noiseless four-readout fluorescence (fi = 1) of one ensemble at `delta_cm`.
fn measure(
    cfg: &ScanConfig,
    ensemble: &[EnsembleMember],
    delta_cm: f64,
    mw_scale: f64,
) -> Result<FluorescenceResult, ScanError> {
    let s = &cfg.sequence;
    let seq = build_strain_cpmg_with(
        s.n_swaps,
        s.tau1,
        delta_cm,
        s.delta_diff,
        ReadoutPhase::PlusX,
        &pulse_settings(cfg, mw_scale),
    )?;
    Ok(simulate(&seq, ensemble, s.contrast, 1.0)?)
}

/// Calibration sweeps at fixed τ1 on the strain-free reference ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub curve: CalibrationCurve,
    pub cm_sweep: Trace,
    pub diff_sweep: Trace,
    /// Free-period fit amplitude of the δdiff sweep.
    pub diff_amplitude: f64,
    pub metadata: MapMetadata,
}

pub fn calibrate(cfg: &ScanConfig) -> Result<CalibrationResult, ScanError> {
    cfg.validate()?;
    let c = &cfg.calibration;
    if c.points < 8 || !(c.periods >= 1.0) {
        return Err(ScanError::Config("calibration needs ≥ 8 points over ≥ 1 period".into()));
    }
    let tau1 = cfg.sequence.tau1;
    let ens = reference_ensemble(cfg)?;
    let half = c.periods / tau1;
    let grid: Vec<f64> = (0..c.points).map(|k| -half + 2.0 * half * k as f64 / (c.points - 1) as f64).collect();
    let sweep = |cm: bool| -> Result<Trace, ScanError> {
        let mut y = Vec::with_capacity(grid.len());
        for &d in &grid {
            let s = &cfg.sequence;
            let (dcm, ddiff) = if cm { (s.delta_cm + d, s.delta_diff) } else { (s.delta_cm, s.delta_diff + d) };
            let seq =
                build_strain_cpmg_with(s.n_swaps, tau1, dcm, ddiff, ReadoutPhase::PlusX, &pulse_settings(cfg, 1.0))?;
            let r = simulate(&seq, &ens, s.contrast, 1.0)?;
            y.push(crate::analysis::visibility(r.f_x_plus, r.f_x_minus)?);
        }
        let x = grid.iter().map(|d| d + if cm { cfg.sequence.delta_cm } else { cfg.sequence.delta_diff }).collect();
        Ok(Trace::new(x, y, vec![0.0; grid.len()])?)
    };
    let cm_sweep = sweep(true)?;
    let diff_sweep = sweep(false)?;
    let curve = fit_calibration(&cm_sweep, tau1)?;
    let curve = curve.clone().with_operating_point(curve.zero_crossing_near(cfg.sequence.delta_cm));
    let diff_amplitude = match fit_sinusoid(&diff_sweep, tau1) {
        Ok(f) => f.amplitude,
        Err(_) => diff_sweep.y.iter().map(|v| v.abs()).fold(0.0, f64::max),
    };
    Ok(CalibrationResult { curve, cm_sweep, diff_sweep, diff_amplitude, metadata: cfg.metadata(0.0) })
}

/// Octave-spaced averaging times for a series of `n` samples.
pub fn octave_taus(n: usize, dt: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while 2 * m <= n {
        out.push(m as f64 * dt);
        m *= 2;
    }
    out
}
