//! Acceptance criteria 1–11. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values, then asserts.

use nvstrain::analysis::{
    allan_deviation, count_peaks, fit_envelope, fit_odmr, fit_ramsey_triplet, odmr_line_groups, synth_odmr, visibility,
    OdmrConfig,
};
use nvstrain::noise::{apd_noise, noise_report, strain_noise_floor, visibility_uncertainty, APDConfig, FloorInputs};
use nvstrain::sample::{strain_from_mz, voxel_ensemble, Amplitude, EnsembleSpec, Footprint, Primitive, StrainField};
use nvstrain::scan::{calibrate, run_gradiometry_scan, run_odmr_map, run_qdm_imaging, ScanConfig};
use nvstrain::sequence::{
    build_strain_cpmg_with, lorentzian_nodes, product_ensemble, simulate, visibility_trace, EnsembleMember,
    PulseSettings, ReadoutPhase, SequenceFamily,
};
use nvstrain::spin::{numeric_propagator, resonant_propagator, unitarity_error, DriveTones, Mat3, NVParams, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

const Q: f64 = 1.602176634e-19;
const KB: f64 = 1.380649e-23;

fn report(n: u32, ok: bool, elapsed: Duration, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} ({:.2} s) {detail}", elapsed.as_secs_f64());
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn nu_x(seq: &nvstrain::sequence::PulseSequence, ens: &[EnsembleMember], contrast: f64) -> f64 {
    let r = simulate(seq, ens, contrast, 1.0).unwrap();
    visibility(r.f_x_plus, r.f_x_minus).unwrap()
}

fn tau_grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| start + step * k as f64).collect()
}

#[test]
fn criterion_01_noise_budget() {
    let t0 = Instant::now();
    let cfg = APDConfig::default();
    let inputs = FloorInputs::default();
    let report_rows = noise_report(&cfg, &inputs).unwrap();
    let get = |name: &str| report_rows.iter().find(|r| r.name == name).unwrap().value;
    // volume normalization of the quoted floor
    let quoted = nvstrain::noise::NoiseFloor { sigma_f: 0.0, strain_per_root_hz: 5.2e-8 };
    let vol = quoted.volume_normalized(inputs.volume);
    let elapsed = t0.elapsed();

    let checks = [
        ("i_n", get("i_n"), 1.4e-9, 0.03),
        ("v_sn", get("v_sn"), 0.34e-3, 0.03),
        ("v_jn", get("v_jn"), 0.05e-3, 0.03),
        ("sigma_nu", get("sigma_nu"), 0.046, 0.03),
        ("volume_floor", vol, 3.8e-8, 0.02),
    ];
    let mut ok = elapsed < Duration::from_secs(1);
    let mut detail = String::new();
    for (name, got, want, tol) in checks {
        let pass = rel(got, want) <= tol;
        ok &= pass;
        detail += &format!(
            "{name}={got:.4e} (target {want:.3e}, {:+.1}%{}) ",
            100.0 * (got - want) / want,
            if pass { "" } else { " OUT" }
        );
    }
    report(1, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

/// One voxel at a realistic bath with differential strata and hyperfine lines.
fn full_ensemble(params: NVParams, td: f64, tmag: f64) -> Vec<EnsembleMember> {
    let spec = EnsembleSpec { td, tmag, ..EnsembleSpec::default() };
    let cm = lorentzian_nodes(spec.cm_fwhm(), spec.strata);
    let diff = lorentzian_nodes(spec.diff_fwhm(), spec.diff_strata);
    product_ensemble(params, &cm, &diff, &[-spec.hyperfine, 0.0, spec.hyperfine])
}

#[test]
fn criterion_02_b_field_insensitivity() {
    let t0 = Instant::now();
    let (tau1, td, contrast) = (21e-6, 20e-6, 0.0272);
    let settings = PulseSettings::default();
    let op = 1.0 / (8.0 * tau1);
    let cpmg =
        |dcm: f64, ddiff: f64| build_strain_cpmg_with(2, tau1, dcm, ddiff, ReadoutPhase::PlusX, &settings).unwrap();
    let base = nu_x(&cpmg(op, 0.0), &full_ensemble(NVParams::default(), td, 12e-6), contrast);

    let mut worst_b: f64 = 0.0;
    for bz in [-1e-4, -5e-5, 5e-5, 1e-4] {
        let ens = full_ensemble(NVParams::default().with_bz(bz), td, 12e-6);
        worst_b = worst_b.max((nu_x(&cpmg(op, 0.0), &ens, contrast) - base).abs());
    }
    let ens = full_ensemble(NVParams::default(), td, 12e-6);
    let mut worst_diff: f64 = 0.0;
    for dd in [-5e5, -2.5e5, 2.5e5, 5e5] {
        worst_diff = worst_diff.max((nu_x(&cpmg(op, dd), &ens, contrast) - base).abs());
    }

    // slope at the steepest point (δcm = 0 for ideal pulses)
    let h = 1e-3 / tau1;
    let slope = (nu_x(&cpmg(h, 0.0), &ens, contrast) - nu_x(&cpmg(-h, 0.0), &ens, contrast)) / (2.0 * h);
    let want = 2.0 * PI * tau1 * contrast * (-tau1 / td).exp();
    let elapsed = t0.elapsed();
    let ok = worst_b < 1e-6 && worst_diff < 1e-6 && rel(slope, want) <= 0.02 && elapsed < Duration::from_secs(10);
    let detail = format!(
        "max |Δν| Bz±0.1 mT = {worst_b:.2e}, δdiff±0.5 MHz = {worst_diff:.2e}; slope {slope:.4e}/Hz vs 2πτ1·A·e^(−τ1/TD) = {want:.4e} ({:+.2}%)",
        100.0 * (slope - want) / want
    );
    report(2, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_03_dephasing_times() {
    let t0 = Instant::now();
    let (td, t2star, contrast) = (21e-6, 7.5e-6, 0.0272);
    // Ramsey decays at 1/TD + 1/Tmag
    let tmag = 1.0 / (1.0 / t2star - 1.0 / td);
    let ens = full_ensemble(NVParams::default(), td, tmag);
    let hf = EnsembleSpec::default().hyperfine;
    let settings = PulseSettings::default();

    let cpmg_grid = tau_grid(0.4e-6, 0.06e-6, 1000);
    let cpmg = SequenceFamily::StrainCpmg { n_swaps: 2, delta_cm: 0.3e6, delta_diff: 0.0, settings };
    let ct = visibility_trace(&cpmg, &cpmg_grid, &ens, contrast).unwrap();
    let cfit = fit_envelope(&ct).unwrap();

    let ramsey_grid = tau_grid(0.1e-6, 0.04e-6, 750);
    let ramsey = SequenceFamily::Ramsey { detuning: 3e6, settings };
    let rt = visibility_trace(&ramsey, &ramsey_grid, &ens, contrast).unwrap();
    let rfit = fit_ramsey_triplet(&rt, hf).unwrap();

    let cpeaks = count_peaks(&ct, 8e6, 0.1).unwrap();
    let rpeaks = count_peaks(&rt, 8e6, 0.1).unwrap();
    let res = 1.0 / (ramsey_grid[ramsey_grid.len() - 1] - ramsey_grid[0]);
    let spacing_ok = rpeaks.len() == 3 && rpeaks.windows(2).all(|w| (w[1] - w[0] - hf).abs() < 2.0 * res);
    let elapsed = t0.elapsed();
    let ok = rel(cfit.td, td) <= 0.05
        && rel(rfit.t2star, t2star) <= 0.05
        && cpeaks.len() == 1
        && spacing_ok
        && elapsed < Duration::from_secs(60);
    let detail = format!(
        "strain-CPMG TD = {:.2} µs (target 21), Ramsey T2* = {:.2} µs (target 7.5); peaks CPMG {:?} MHz, Ramsey {:?} MHz (hyperfine {:.2} MHz)",
        cfit.td * 1e6,
        rfit.t2star * 1e6,
        cpeaks.iter().map(|f| (f * 1e-4).round() / 100.0).collect::<Vec<_>>(),
        rpeaks.iter().map(|f| (f * 1e-4).round() / 100.0).collect::<Vec<_>>(),
        hf * 1e-6
    );
    report(3, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_04_calibration_periodicity() {
    let t0 = Instant::now();
    let mut cfg = ScanConfig { seed: Some(4), ..Default::default() };
    cfg.ensemble = EnsembleSpec::default();
    cfg.calibration.points = 121;
    let r = calibrate(&cfg).unwrap();
    let tau1 = cfg.sequence.tau1;
    let period_err = rel(r.curve.period(), 1.0 / tau1);
    let ratio = r.diff_amplitude / r.curve.amplitude;
    let elapsed = t0.elapsed();
    let ok = period_err <= 0.005 && ratio < 0.05 && elapsed < Duration::from_secs(30);
    let detail = format!(
        "period {:.2} Hz vs 1/τ1 = {:.2} Hz ({:.3}%); δdiff/δcm amplitude = {ratio:.2e}",
        r.curve.period(),
        1.0 / tau1,
        100.0 * period_err
    );
    report(4, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_05_gradient_law() {
    let t0 = Instant::now();
    let (tau1, contrast) = (21e-6, 0.0272);
    let spec = EnsembleSpec { diff_strata: 1, include_hyperfine: false, ..EnsembleSpec::default() };
    let pixel = 1.0;
    let footprint = Footprint::pixel([pixel, pixel], 0.0, [129, 1, 1]);
    let gradient = StrainField::new(vec![Primitive::LinearGradient {
        origin: [0.0; 3],
        direction: [1.0, 0.0, 0.0],
        strain: Amplitude::Equivalent(1.4e-6 / pixel),
    }])
    .unwrap();
    let voxel = |field: &StrainField| {
        voxel_ensemble::<ChaCha8Rng>([0.0; 3], &footprint, field, &spec, NVParams::default(), None).unwrap()
    };
    let flat = voxel(&StrainField::default());
    let graded = voxel(&gradient);

    let settings = PulseSettings::default();
    let family = SequenceFamily::StrainCpmg { n_swaps: 2, delta_cm: 0.15e6, delta_diff: 0.0, settings };
    let grid = tau_grid(0.5e-6, 0.25e-6, 240);
    let td_flat = fit_envelope(&visibility_trace(&family, &grid, &flat, contrast).unwrap()).unwrap().td;
    let td_graded = fit_envelope(&visibility_trace(&family, &grid, &graded, contrast).unwrap()).unwrap().td;

    let amp = |ens: &[EnsembleMember]| {
        let seq = build_strain_cpmg_with(2, tau1, 0.0, 0.0, ReadoutPhase::PlusX, &settings).unwrap();
        let r = simulate(&seq, ens, contrast, 1.0).unwrap();
        visibility(r.f_x_plus, r.f_x_minus).unwrap().hypot(visibility(r.f_y_plus, r.f_y_minus).unwrap())
    };
    let ratio = amp(&graded) / amp(&flat);
    let elapsed = t0.elapsed();
    let e = (-1f64).exp();
    let ok = rel(td_graded, 10e-6) <= 0.15 && rel(ratio, e) <= 0.15 && elapsed < Duration::from_secs(60);
    let detail = format!(
        "TD {:.2} µs → {:.2} µs (target 10 ± 15%); τ1 amplitude ratio {ratio:.3} (target 1/e = {e:.3} ± 15%)",
        td_flat * 1e6,
        td_graded * 1e6
    );
    report(5, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

/// σ of one 1 s reading from first principles: APD shot and Johnson noise,
/// ±X pair visibility, fringe slope.
fn analytic_reading_sigma(cfg: &ScanConfig, fringe_amplitude: f64) -> f64 {
    let a = &cfg.apd;
    let v = cfg.sequence.signal_voltage;
    let p = v / (a.responsivity_m1 * a.gain_m * a.transimpedance);
    let m2 = a.gain_m * a.gain_m;
    let current = a.dark_surface + (a.dark_bulk * m2 + a.responsivity_m1 * m2 * p) * a.excess_noise_f;
    let v_sn = (2.0 * Q * current * a.bandwidth).sqrt() * a.transimpedance;
    let v_jn = (4.0 * KB * a.temperature * a.transimpedance * a.bandwidth).sqrt();
    let sigma_nu = 2f64.sqrt() * v_sn.hypot(v_jn) / (2.0 * v);
    let pairs = cfg.sequence.rep_rate * cfg.sequence.dwell;
    sigma_nu / pairs.sqrt() / (2.0 * PI * cfg.sequence.tau1 * fringe_amplitude)
}

fn single_point(seed: u64) -> ScanConfig {
    let mut c = ScanConfig { seed: Some(seed), ..Default::default() };
    c.grid.extent = [1.0, 1.0];
    c.confocal.nodes = [1, 1, 1];
    c.sequence.dwell = 1.0;
    c.profiles = c.profiles.with_drift_hz_per_s(0.0);
    c
}

#[test]
fn criterion_06_sensitivity_self_consistency() {
    let t0 = Instant::now();
    let mut cfg = single_point(6);
    cfg.gradiometry.cycles_per_point = 20_000;
    let r = run_gradiometry_scan(&cfg).unwrap();
    let series: Vec<f64> = r.series.iter().map(|p| p.mz).collect();
    let adev = allan_deviation(&series, 1.0, &[1.0]).unwrap().points[0].adev;
    let a = calibrate(&cfg).unwrap().curve.amplitude;
    let predicted = analytic_reading_sigma(&cfg, a);

    let f = FloorInputs::default();
    let budget = apd_noise(&cfg.apd, cfg.apd.optical_power(f.signal_voltage)).unwrap();
    let sigma_nu = visibility_uncertainty(&budget, f.signal_voltage, f.signal_voltage).unwrap();
    let floor = strain_noise_floor(sigma_nu, f.tau1, f.amplitude, f.rep_rate, f.coupling).unwrap().strain_per_root_hz;
    let elapsed = t0.elapsed();
    let ok = rel(adev, predicted) <= 0.05 && rel(floor, 5.2e-8) <= 0.05;
    let detail = format!(
        "Allan(1 s) {adev:.2} Hz vs analytic {predicted:.2} Hz ({:+.2}%), strain {:.3e}/√Hz; default-chain floor {floor:.3e}/√Hz vs 5.2e-8 ({:+.1}%)",
        100.0 * (adev - predicted) / predicted,
        strain_from_mz(adev).abs(),
        100.0 * (floor - 5.2e-8) / 5.2e-8
    );
    report(6, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_07_gradiometry_drift_rejection() {
    let t0 = Instant::now();
    let drift = 20.0;

    // single position: white reference run, then the drifting run
    let mut white = single_point(7);
    white.gradiometry.cycles_per_point = 100_000;
    let w = run_gradiometry_scan(&white).unwrap();
    let sigma1 = w.reading_sigma;
    let wseries: Vec<f64> = w.series.iter().map(|p| p.mz).collect();
    let single_100 = allan_deviation(&wseries, 1.0, &[100.0]).unwrap().points[0].adev;

    let mut drifting = single_point(7);
    drifting.profiles = drifting.profiles.with_drift_hz_per_s(drift);
    // stays inside a quarter fringe (1/(4τ1) ≈ 11.9 kHz) for the whole run
    drifting.gradiometry.cycles_per_point = 500;
    let d = run_gradiometry_scan(&drifting).unwrap();
    let dseries: Vec<f64> = d.series.iter().map(|p| p.mz).collect();
    let departures: Vec<f64> = allan_deviation(&dseries, 1.0, &[20.0, 25.0, 30.0])
        .unwrap()
        .points
        .iter()
        .map(|p| p.adev / (sigma1 / p.tau.sqrt()))
        .collect();

    // gradiometry: reference at the same voxel, readings every 2 s
    let mut grad = single_point(7);
    grad.profiles = grad.profiles.with_drift_hz_per_s(drift);
    grad.gradiometry.reference = Some([0.0; 3]);
    grad.gradiometry.cycles_per_point = 500_000;
    let g = run_gradiometry_scan(&grad).unwrap();
    let gseries: Vec<f64> = g.series.iter().map(|p| p.mz).collect();
    let dt = 2.0 * grad.sequence.dwell;
    let taus: Vec<f64> = [2.0, 4.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0, 10000.0].to_vec();
    let gad = allan_deviation(&gseries, dt, &taus).unwrap();
    let worst_trend =
        gad.points.iter().map(|p| (p.adev / (g.reading_sigma * (dt / p.tau).sqrt()) - 1.0).abs()).fold(0.0, f64::max);
    let grad_100 = gad.points.iter().find(|p| p.tau == 100.0).unwrap().adev;
    let penalty = grad_100 / single_100;
    let elapsed = t0.elapsed();

    let ok = departures.iter().all(|r| *r > 2.0) && worst_trend <= 0.2 && rel(penalty, 2f64.sqrt()) <= 0.1;
    let detail = format!(
        "drift {drift} Hz/s: single-position Allan / √τ trend at 20, 25, 30 s = {:.2?}; gradiometry max deviation from trend to 1e4 s = {:.1}%; penalty at 100 s = {penalty:.3} (√2 = 1.414)",
        departures,
        100.0 * worst_trend
    );
    report(7, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

fn brute_force_adev(y: &[f64], m: usize) -> f64 {
    let n = y.len();
    let mut acc = 0.0;
    let mut count = 0;
    for i in 0..=(n - 2 * m) {
        let a: f64 = y[i..i + m].iter().sum::<f64>() / m as f64;
        let b: f64 = y[i + m..i + 2 * m].iter().sum::<f64>() / m as f64;
        acc += (b - a) * (b - a);
        count += 1;
    }
    (acc / (2.0 * count as f64)).sqrt()
}

#[test]
fn criterion_08_allan_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for n in 2..=64 {
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
        let taus: Vec<f64> = (1..=n / 2).map(|m| m as f64 * 0.5).collect();
        let r = allan_deviation(&y, 0.5, &taus).unwrap();
        for p in &r.points {
            let want = brute_force_adev(&y, p.m);
            worst = worst.max((p.adev - want).abs() / want.max(1e-300));
        }
    }
    let alt: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let alt_adev = allan_deviation(&alt, 1.0, &[1.0]).unwrap().points[0].adev;

    let white: Vec<f64> = (0..1 << 16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let taus = nvstrain::scan::octave_taus(white.len() / 8, 1.0);
    let r = allan_deviation(&white, 1.0, &taus).unwrap();
    // weighted log-log fit; var(ln σ̂) ≈ 1/(2·edf)
    let pts: Vec<(f64, f64, f64)> = r.points.iter().map(|p| (p.tau.ln(), p.adev.ln(), 2.0 * p.edf)).collect();
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let slope = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let slope_sigma = 1.0 / sxx.sqrt();
    let covered = r.points.iter().filter(|p| p.lower <= 1.0 / p.tau.sqrt() && 1.0 / p.tau.sqrt() <= p.upper).count();
    let elapsed = t0.elapsed();
    let ok = worst < 1e-12 && alt_adev == 2f64.sqrt() && (slope + 0.5).abs() <= 2.0 * slope_sigma;
    let detail = format!(
        "max relative deviation from brute force {worst:.1e}; alternating ±1 → {alt_adev}; white slope {slope:.4} ± {slope_sigma:.4}; 68% intervals cover the true σ at {covered}/{} taus",
        r.points.len()
    );
    report(8, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_09_odmr_pipeline() {
    let t0 = Instant::now();
    // line centres of the four-class spectrum
    let cfg = OdmrConfig { noise: 2e-4, ..OdmrConfig::default() };
    let mz0 = 1.5e5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = synth_odmr(&cfg, &[(mz0, 1.0)], Some(&mut rng));
    let fit = fit_odmr(&spec, 2, cfg.hyperfine).unwrap();
    let truth = odmr_line_groups(&cfg, mz0);
    let centre_err = fit.groups.iter().zip(&truth).map(|(g, t)| (g.center - t.0).abs()).fold(0.0, f64::max);
    let centres_ok = fit.groups.len() == 4 && centre_err <= cfg.fwhm / 20.0;

    // relative Mz map against the injected bump
    let mut sc = ScanConfig { seed: Some(9), ..Default::default() };
    sc.grid.extent = [4.0, 3.0];
    sc.odmr.nodes = [1, 1, 1];
    sc.scene = StrainField::new(vec![Primitive::GaussianBump {
        center: [1.5, 1.0, 0.0],
        sigma: [1.5, 1.5, 5.0],
        strain: Amplitude::Equivalent(2e-5),
    }])
    .unwrap();
    let m = run_odmr_map(&sc).unwrap();
    let rel_map = m.map.relative();
    let geo = &m.map.geometry;
    let injected: Vec<f64> = (0..geo.len()).map(|i| sc.scene.mz(geo.position(i))).collect();
    let inj_mean = injected.iter().sum::<f64>() / injected.len() as f64;
    let sigma_mean = (m.map.sigma.iter().map(|s| s * s).sum::<f64>()).sqrt() / m.map.len() as f64;
    let worst_pull = (0..geo.len())
        .map(|i| (rel_map.mz[i] - (injected[i] - inj_mean)).abs() / m.map.sigma[i].hypot(sigma_mean))
        .fold(0.0, f64::max);
    let span = injected.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - injected.iter().cloned().fold(f64::INFINITY, f64::min);
    let map_ok = worst_pull < 3.0 && m.map.masked.iter().all(|x| !x);

    // χ² flags the cell whose PSF straddles a sharp scratch
    let mut xc = ScanConfig { seed: Some(9), ..Default::default() };
    xc.grid.extent = [4.0, 1.0];
    xc.odmr.nodes = [7, 1, 1];
    xc.confocal.psf.sigma = [0.3, 0.3, 1.0];
    xc.scene = StrainField::new(vec![Primitive::Scratch {
        start: [2.0, -10.0],
        end: [2.0, 10.0],
        width: 0.1,
        growth: 0.0,
        decay: f64::INFINITY,
        strain: Amplitude::Equivalent(3e-4),
    }])
    .unwrap();
    let x = run_odmr_map(&xc).unwrap();
    let flagged = x.reduced_chi2[2];
    let mut rest: Vec<f64> = [0, 1, 3].iter().map(|&i| x.reduced_chi2[i]).collect();
    rest.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let baseline = rest[1];
    let chi_ok = flagged >= 3.0 * baseline;
    let elapsed = t0.elapsed();
    let ok = centres_ok && map_ok && chi_ok;
    let detail = format!(
        "max centre error {:.1} kHz (limit {:.0} kHz); relative map worst pull {worst_pull:.2}σ over a {:.0} kHz span; reduced χ² straddling cell {flagged:.1} vs baseline {baseline:.2} ({:.0}×)",
        centre_err * 1e-3,
        cfg.fwhm / 20.0 * 1e-3,
        span * 1e-3,
        flagged / baseline
    );
    report(9, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

/// Classical RK4 on dψ/dt = −iHψ, column by column.
fn rk4_propagator(h: &Mat3, t: f64, steps: usize) -> Mat3 {
    let dt = t / steps as f64;
    let f = |u: &Mat3| (h * u) * C64::new(0.0, -1.0);
    let mut u = Mat3::identity();
    for _ in 0..steps {
        let k1 = f(&u);
        let k2 = f(&(u + k1 * C64::from(0.5 * dt)));
        let k3 = f(&(u + k2 * C64::from(0.5 * dt)));
        let k4 = f(&(u + k3 * C64::from(dt)));
        u += (k1 + k2 * C64::from(2.0) + k3 * C64::from(2.0) + k4) * C64::from(dt / 6.0);
    }
    u
}

fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[test]
fn criterion_10_propagator_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = NVParams::default();
    let (mut worst_num, mut worst_rk4, mut worst_unit): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let tones = DriveTones::resonant(rng.random_range(0.0..20e6), rng.random_range(0.0..20e6))
            .with_phases(rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        let t = rng.random_range(1e-9..300e-9);
        let analytic = resonant_propagator(&tones, t).unwrap();
        let f_max = tones.rabi_rate() / (2.0 * PI);
        let dt = (t / 100.0).min(1.0 / (50.0 * f_max.max(1.0)));
        let numeric = numeric_propagator(&params, &tones, t, dt).unwrap();
        let h = nvstrain::spin::drive_frame_hamiltonian(&tones, 0.0);
        let steps = ((tones.rabi_rate() * t / 2e-3).ceil() as usize).max(100);
        let rk4 = rk4_propagator(&h, t, steps);
        worst_num = worst_num.max(max_diff(&analytic, &numeric));
        worst_rk4 = worst_rk4.max(max_diff(&analytic, &rk4));
        worst_unit = worst_unit.max(unitarity_error(&analytic)).max(unitarity_error(&numeric));
    }
    let elapsed = t0.elapsed();
    let ok = worst_num < 1e-8 && worst_rk4 < 1e-8 && worst_unit < 1e-10;
    let detail = format!(
        "100 drives: max |analytic − numeric| {worst_num:.1e}, max |analytic − RK4| {worst_rk4:.1e}, max unitarity error {worst_unit:.1e}"
    );
    report(10, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_11_throughput_bookkeeping() {
    let t0 = Instant::now();
    let mut cfg = ScanConfig { seed: Some(11), ..Default::default() };
    cfg.qdm.pixels = 4;
    cfg.qdm.footprint_nodes = [3, 3, 1];
    cfg.ensemble.strata = 33;
    let r = run_qdm_imaging(&cfg).unwrap();
    let frame_rate = 6500.0 / 24.0;
    let benchmark = 125.0 * 125.0;
    let elapsed = t0.elapsed();
    let ok = (r.fov_time - 1.0).abs() < 1e-12
        && (cfg.qdm.dwell_per_frequency - 0.5).abs() < 1e-12
        && (r.frame_rate - frame_rate).abs() < 1e-9
        && (r.survey_rate - 150.0 * 150.0).abs() < 1e-6
        && r.survey_rate > benchmark;
    let detail = format!(
        "{} s per FOV at {} s per frequency, {} frames per frequency at {:.1} Hz; survey rate {:.0} µm²/s vs benchmark {benchmark:.0} µm²/s",
        r.fov_time, cfg.qdm.dwell_per_frequency, r.frames_per_frequency, r.frame_rate, r.survey_rate
    );
    report(11, ok, elapsed, &detail);
    assert!(ok, "{detail}");
}
