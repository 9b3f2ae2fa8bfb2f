use clap::{Args, Parser, Subcommand};
use nvstrain::analysis::{allan_deviation, read_trace, write_trace, AnalysisError, StrainMap};
use nvstrain::noise::noise_report;
use nvstrain::scan::{
    calibrate, octave_taus, run_confocal_scan, run_gradiometry_scan, run_odmr_map, run_qdm_imaging, stitch, ScanConfig,
    ScanError,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "nvstrain", version, about = "NV-diamond strain interferometry simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// RNG seed; every run needs one.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    output: PathBuf,
    /// Override a config key, e.g. `--set grid.extent=[4.0,4.0]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Scene file (replaces `scene_file`).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    rep_rate: Option<f64>,
    /// Integration time per point, s.
    #[arg(long)]
    dwell: Option<f64>,
    #[arg(long)]
    delta_cm: Option<f64>,
    #[arg(long)]
    delta_diff: Option<f64>,
    /// Focus displacements, µm (comma separated).
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<f64>>,
    /// Also write 16-bit grayscale PNGs of Mz.
    #[arg(long)]
    png: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Confocal 2D/3D strain map.
    SimulateConfocal(Common),
    /// Reference/scan alternation with drive servo (or single-position without a reference).
    SimulateGradiometry(Common),
    /// Widefield lock-in camera imaging, one map per FOV.
    SimulateQdm {
        #[command(flatten)]
        common: Common,
        /// Stitch FOVs whose footprints overlap.
        #[arg(long)]
        stitch: bool,
    },
    /// CW-ODMR strain and field maps.
    SimulateOdmr(Common),
    /// δcm and δdiff calibration sweeps.
    Calibrate(Common),
    /// Overlapping Allan deviation of a trace CSV (`y` column).
    Allan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Sample interval, s (defaults to `allan.sample_interval`).
        #[arg(long)]
        dt: Option<f64>,
    },
    /// APD noise chain and strain noise floor.
    NoiseBudget(Common),
    /// Merge FOV maps, removing per-FOV offsets.
    Stitch {
        #[command(flatten)]
        common: Common,
        /// FOV map CSVs (with sidecars).
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Overlapping pairs, e.g. `0:1,1:2`.
        #[arg(long, value_delimiter = ',')]
        overlaps: Vec<String>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numeric(String),
}

impl From<ScanError> for CliError {
    fn from(e: ScanError) -> Self {
        match e.exit_code() {
            2 => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io(_) | AnalysisError::LengthMismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

fn io(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn parse_value(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| io(format!("empty key in '{key}'")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| io(format!("'{p}' in '{key}' is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Config file, then flag overrides, then the explicit seed.
fn load_config(c: &Common) -> Result<ScanConfig, CliError> {
    let mut table = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io(format!("{}: {e}", p.display())))?;
            let mut t: toml::Table = toml::from_str(&text).map_err(io)?;
            if let Some(toml::Value::String(s)) = t.get("scene_file").cloned() {
                let sp = Path::new(&s);
                if sp.is_relative() {
                    let base = p.parent().unwrap_or(Path::new("."));
                    t.insert("scene_file".into(), toml::Value::String(base.join(sp).display().to_string()));
                }
            }
            t
        }
        None => toml::Table::new(),
    };
    let flags: [(&str, Option<f64>); 5] = [
        ("sequence.tau1", c.tau1),
        ("sequence.rep_rate", c.rep_rate),
        ("sequence.dwell", c.dwell),
        ("sequence.delta_cm", c.delta_cm),
        ("sequence.delta_diff", c.delta_diff),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            set_key(&mut table, k, toml::Value::Float(v))?;
        }
    }
    if let Some(d) = &c.depths {
        set_key(&mut table, "grid.depths", toml::Value::Array(d.iter().map(|v| toml::Value::Float(*v)).collect()))?;
    }
    if let Some(s) = &c.scene {
        set_key(&mut table, "scene_file", toml::Value::String(s.display().to_string()))?;
    }
    for s in &c.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| io(format!("expected KEY=VALUE, got '{s}'")))?;
        set_key(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let text = toml::to_string(&table).map_err(io)?;
    let mut cfg = ScanConfig::from_toml(&text)?;
    cfg.seed = Some(c.seed);
    cfg.output = Some(c.output.clone());
    cfg.resolve_scene()?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&c.output).map_err(|e| io(format!("{}: {e}", c.output.display())))?;
    Ok(c.output.clone())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(v).map_err(io)? + "\n").map_err(io)
}

fn write_map(map: &StrainMap, dir: &Path, name: &str, png: bool) -> Result<(), CliError> {
    map.write(&dir.join(format!("{name}.csv")))?;
    if png {
        for iz in 0..map.geometry.dims[2] {
            let suffix = if map.geometry.dims[2] > 1 { format!("_z{iz}") } else { String::new() };
            map.write_png(&dir.join(format!("{name}{suffix}.png")), iz)?;
        }
    }
    println!("wrote {}", dir.join(format!("{name}.csv")).display());
    Ok(())
}

/// Pairs of maps whose footprints share at least 10% of the smaller map.
fn footprint_overlaps(maps: &[StrainMap]) -> Vec<(usize, usize)> {
    let rect = |m: &StrainMap| {
        let g = &m.geometry;
        let lo = [g.origin[0] - 0.5 * g.spacing[0], g.origin[1] - 0.5 * g.spacing[1]];
        let hi = [lo[0] + g.dims[0] as f64 * g.spacing[0], lo[1] + g.dims[1] as f64 * g.spacing[1]];
        (lo, hi)
    };
    let mut out = Vec::new();
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let ((a0, a1), (b0, b1)) = (rect(&maps[i]), rect(&maps[j]));
            let w = (a1[0].min(b1[0]) - a0[0].max(b0[0])).max(0.0);
            let h = (a1[1].min(b1[1]) - a0[1].max(b0[1])).max(0.0);
            let area = |(lo, hi): ([f64; 2], [f64; 2])| (hi[0] - lo[0]) * (hi[1] - lo[1]);
            if w * h >= 0.1 * area((a0, a1)).min(area((b0, b1))) {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Serialize)]
struct LogRow {
    t_s: f64,
    correction_hz: f64,
    injected_hz: f64,
    residual_hz: f64,
}

#[derive(Serialize)]
struct SeriesRow {
    index: usize,
    t_s: f64,
    mz_hz: f64,
}

#[derive(Serialize)]
struct AllanRow {
    tau_s: f64,
    adev: f64,
    lower: f64,
    upper: f64,
    edf: f64,
}

#[derive(Serialize)]
struct HistRow {
    lower: f64,
    upper: f64,
    count: usize,
}

#[derive(Serialize)]
struct OdmrRow {
    x: f64,
    y: f64,
    z: f64,
    bz_t: f64,
    reduced_chi2: f64,
}

#[derive(Serialize)]
struct BudgetRow {
    name: String,
    value: f64,
    unit: String,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SimulateConfocal(c) => {
            let cfg = load_config(&c)?;
            let map = run_confocal_scan(&cfg)?;
            write_map(&map, &out_dir(&c)?, "confocal", c.png)?;
        }
        Command::SimulateGradiometry(c) => {
            let cfg = load_config(&c)?;
            let r = run_gradiometry_scan(&cfg)?;
            let dir = out_dir(&c)?;
            write_map(&r.map, &dir, "gradiometry", c.png)?;
            let log: Vec<LogRow> = r
                .log
                .iter()
                .map(|e| LogRow {
                    t_s: e.t,
                    correction_hz: e.correction,
                    injected_hz: e.injected,
                    residual_hz: e.residual,
                })
                .collect();
            write_csv(&dir.join("drift_log.csv"), &log)?;
            let series: Vec<SeriesRow> =
                r.series.iter().map(|p| SeriesRow { index: p.index, t_s: p.t, mz_hz: p.mz }).collect();
            write_csv(&dir.join("series.csv"), &series)?;
        }
        Command::SimulateQdm { common: c, stitch: do_stitch } => {
            let cfg = load_config(&c)?;
            let r = run_qdm_imaging(&cfg)?;
            let dir = out_dir(&c)?;
            for (i, f) in r.fovs.iter().enumerate() {
                write_map(&f.map, &dir, &format!("fov_{i}"), c.png)?;
                let hist: Vec<HistRow> = f
                    .histogram_counts
                    .iter()
                    .enumerate()
                    .map(|(k, &count)| HistRow { lower: f.histogram_edges[k], upper: f.histogram_edges[k + 1], count })
                    .collect();
                write_csv(&dir.join(format!("fov_{i}_allan_hist.csv")), &hist)?;
            }
            write_json(
                &dir.join("qdm_summary.json"),
                &serde_json::json!({
                    "fov_count": r.fovs.len(),
                    "frame_rate_hz": r.frame_rate,
                    "frames_per_frequency": r.frames_per_frequency,
                    "fov_time_s": r.fov_time,
                    "survey_rate_um2_per_s": r.survey_rate,
                    "seed": cfg.seed,
                    "config_hash": cfg.hash(),
                }),
            )?;
            println!(
                "frame rate {:.2} Hz, {} frames per frequency, {} s per FOV, survey {:.0} µm²/s",
                r.frame_rate, r.frames_per_frequency, r.fov_time, r.survey_rate
            );
            if do_stitch && r.fovs.len() > 1 {
                let maps: Vec<StrainMap> = r.fovs.into_iter().map(|f| f.map).collect();
                let s = stitch(&maps, &footprint_overlaps(&maps))?;
                write_map(&s.map, &dir, "stitched", c.png)?;
                println!("seam rms {:.3} Hz", s.seam_rms);
            }
        }
        Command::SimulateOdmr(c) => {
            let cfg = load_config(&c)?;
            let r = run_odmr_map(&cfg)?;
            let dir = out_dir(&c)?;
            write_map(&r.map, &dir, "odmr", c.png)?;
            let rows: Vec<OdmrRow> = (0..r.map.len())
                .map(|k| {
                    let p = r.map.geometry.position(k);
                    OdmrRow { x: p[0], y: p[1], z: p[2], bz_t: r.bz[k], reduced_chi2: r.reduced_chi2[k] }
                })
                .collect();
            write_csv(&dir.join("odmr_fit.csv"), &rows)?;
        }
        Command::Calibrate(c) => {
            let cfg = load_config(&c)?;
            let r = calibrate(&cfg)?;
            let dir = out_dir(&c)?;
            write_trace(&r.cm_sweep, &dir.join("cm_sweep.csv"), &r.metadata)?;
            write_trace(&r.diff_sweep, &dir.join("diff_sweep.csv"), &r.metadata)?;
            write_json(&dir.join("calibration.json"), &r)?;
            println!(
                "amplitude {:.5}, period {:.2} Hz, operating point {:.2} Hz, δdiff amplitude {:.2e}",
                r.curve.amplitude,
                r.curve.period(),
                r.curve.operating_point,
                r.diff_amplitude
            );
        }
        Command::Allan { common: c, input, dt } => {
            let cfg = load_config(&c)?;
            let trace = read_trace(&input)?;
            let dt = dt.unwrap_or(cfg.allan.sample_interval);
            let taus = if cfg.allan.taus.is_empty() { octave_taus(trace.len(), dt) } else { cfg.allan.taus.clone() };
            let a = allan_deviation(&trace.y, dt, &taus)?;
            let rows: Vec<AllanRow> = a
                .points
                .iter()
                .map(|p| AllanRow { tau_s: p.tau, adev: p.adev, lower: p.lower, upper: p.upper, edf: p.edf })
                .collect();
            let dir = out_dir(&c)?;
            write_csv(&dir.join("allan.csv"), &rows)?;
            println!("log-log slope {:.3} over {} averaging times", a.log_slope(), rows.len());
        }
        Command::NoiseBudget(c) => {
            let cfg = load_config(&c)?;
            let report = noise_report(&cfg.apd, &cfg.floor).map_err(ScanError::from)?;
            for e in &report {
                println!("{:<34} {:>14.6e} {}", e.name, e.value, e.unit);
            }
            let dir = out_dir(&c)?;
            let rows: Vec<BudgetRow> = report
                .iter()
                .map(|e| BudgetRow { name: e.name.clone(), value: e.value, unit: e.unit.clone() })
                .collect();
            write_csv(&dir.join("noise_budget.csv"), &rows)?;
        }
        Command::Stitch { common: c, inputs, overlaps } => {
            load_config(&c)?;
            let maps = inputs.iter().map(|p| StrainMap::read(p)).collect::<Result<Vec<_>, _>>()?;
            let mut pairs = Vec::new();
            for o in overlaps.iter().filter(|o| !o.trim().is_empty()) {
                let (a, b) = o.split_once(':').ok_or_else(|| io(format!("overlap '{o}' is not i:j")))?;
                pairs.push((a.trim().parse::<usize>().map_err(io)?, b.trim().parse::<usize>().map_err(io)?));
            }
            let s = stitch(&maps, &pairs)?;
            write_map(&s.map, &out_dir(&c)?, "stitched", c.png)?;
            println!("offsets {:?} Hz, seam rms {:.3} Hz", s.offsets, s.seam_rms);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
