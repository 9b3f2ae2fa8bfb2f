use nvstrain::analysis::StrainMap;
use nvstrain::sample::{Amplitude, Primitive, StrainField};
use nvstrain::scan::{run_confocal_scan, run_gradiometry_scan, run_qdm_imaging, stitch, ScanConfig};

fn base(seed: u64) -> ScanConfig {
    let mut c = ScanConfig { seed: Some(seed), ..Default::default() };
    c.confocal.nodes = [1, 1, 1];
    c.ensemble.strata = 33;
    c
}

fn bump() -> StrainField {
    StrainField::new(vec![Primitive::GaussianBump {
        center: [1.0, 1.0, 0.0],
        sigma: [1.5, 1.5, 3.0],
        strain: Amplitude::Equivalent(4e-7),
    }])
    .unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn noiseless(c: &ScanConfig) -> StrainMap {
    let mut c = c.clone();
    c.confocal.noise = false;
    run_confocal_scan(&c).unwrap()
}

#[test]
fn confocal_spread_matches_reported_sigma() {
    let mut c = base(21);
    c.grid.extent = [16.0, 16.0];
    c.scene = StrainField::uniform(2e-7);
    let truth = noiseless(&c).mz[0];
    let m = run_confocal_scan(&c).unwrap();
    assert_eq!(m.len(), 256);
    let (s, sigma) = (std(&m.mz), mean(&m.sigma));
    println!("spread {s:.2} Hz, reported {sigma:.2} Hz, mean {:.2} vs {truth:.2}", mean(&m.mz));
    assert!((s / sigma - 1.0).abs() < 0.18);
    assert!((mean(&m.mz) - truth).abs() < 4.0 * s / 16.0);
}

#[test]
fn confocal_is_unbiased_over_seeds() {
    let mut c = base(0);
    c.grid.extent = [2.0, 2.0];
    c.confocal.nodes = [3, 3, 1];
    c.scene = bump();
    let truth = noiseless(&c);
    let runs: Vec<StrainMap> = (0..100)
        .map(|s| {
            c.seed = Some(1000 + s);
            run_confocal_scan(&c).unwrap()
        })
        .collect();
    for k in 0..truth.len() {
        let v: Vec<f64> = runs.iter().map(|m| m.mz[k]).collect();
        let err = mean(&v) - truth.mz[k];
        println!("cell {k}: truth {:.1} bias {err:.2} spread {:.2}", truth.mz[k], std(&v));
        assert!(err.abs() < 0.3 * std(&v));
    }
}

#[test]
fn scratch_reaches_further_at_depth() {
    let mut c = base(2);
    c.scene = StrainField::new(vec![Primitive::Scratch {
        start: [-20.0, 0.0],
        end: [20.0, 0.0],
        width: 0.5,
        growth: 0.5,
        decay: f64::INFINITY,
        strain: Amplitude::Equivalent(5e-7),
    }])
    .unwrap();
    c.grid.origin = [0.0, 2.0];
    c.grid.extent = [1.0, 1.0];
    c.grid.depths = vec![0.0, 1.0, 2.0, 3.0];
    let m = noiseless(&c);
    let e: Vec<f64> = m.strain.iter().map(|x| x.abs()).collect();
    println!("{e:?}");
    assert!(e.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn gradiometry_without_drift_matches_single_position() {
    let mut c = base(5);
    c.grid.extent = [4.0, 1.0];
    c.scene = bump();
    c.gradiometry.cycles_per_point = 40;
    let single = run_gradiometry_scan(&c).unwrap();
    c.gradiometry.reference = Some([0.0, 0.0, 0.0]);
    let grad = run_gradiometry_scan(&c).unwrap();
    let r = 0;
    assert_eq!(grad.map.geometry.position(r), [0.0, 0.0, 0.0]);
    let truth = noiseless(&c);
    for k in 0..grad.map.len() {
        let want = single.map.mz[k] - truth.mz[r];
        let tol = 4.0 * grad.map.sigma[k].hypot(single.map.sigma[k]);
        println!("cell {k}: gradiometry {:.2} single {want:.2} ± {tol:.2}", grad.map.mz[k]);
        assert!((grad.map.mz[k] - want).abs() < tol);
    }
}

#[test]
fn servo_tracks_drift_under_noise() {
    let mut c = base(6);
    c.grid.extent = [2.0, 1.0];
    c.gradiometry.reference = Some([0.0, 0.0, 0.0]);
    c.gradiometry.cycles_per_point = 100;
    c.profiles = c.profiles.with_drift_hz_per_s(20.0);
    let r = run_gradiometry_scan(&c).unwrap();
    let late = &r.log[r.log.len() / 2..];
    let rms = (late.iter().map(|e| (e.correction - e.injected).powi(2)).sum::<f64>() / late.len() as f64).sqrt();
    let span = late.last().unwrap().injected - late[0].injected;
    println!("servo rms {rms:.2} Hz, reading sigma {:.2} Hz, drift over window {span:.1} Hz", r.reading_sigma);
    assert!(rms < r.reading_sigma);
    assert!(span > 5.0 * r.reading_sigma);
}

fn qdm_config(seed: u64) -> ScanConfig {
    let mut c = ScanConfig { seed: Some(seed), ..Default::default() };
    c.ensemble.strata = 33;
    c.qdm.pixels = 8;
    c.qdm.fov = 40.0;
    c.qdm.footprint_nodes = [1, 1, 1];
    c.qdm.dwell_per_frequency = 0.1;
    c
}

#[test]
fn qdm_histogram_covers_measured_pixels() {
    let mut c = qdm_config(7);
    c.scene = StrainField::uniform(2e-7);
    let r = run_qdm_imaging(&c).unwrap();
    let f = &r.fovs[0];
    assert_eq!(f.allan_1s.len(), 64);
    let measured = f.map.masked.iter().filter(|m| !**m).count();
    assert_eq!(f.histogram_counts.iter().sum::<usize>(), measured);
    assert_eq!(f.histogram_edges.len(), f.histogram_counts.len() + 1);
    assert!(f.allan_1s.iter().filter(|a| a.is_finite()).all(|a| *a > 0.0));
}

#[test]
fn qdm_mosaic_stitches_away_drift() {
    let mut c = qdm_config(8);
    c.scene = StrainField::new(vec![Primitive::LinearGradient {
        origin: [0.0, 0.0, 0.0],
        direction: [1.0, 0.5, 0.0],
        strain: Amplitude::Equivalent(5e-9),
    }])
    .unwrap();
    c.qdm.origins = (0..9).map(|k| [30.0 * (k % 3) as f64, 30.0 * (k / 3) as f64]).collect();
    c.profiles = c.profiles.with_drift_hz_per_s(400.0);
    let r = run_qdm_imaging(&c).unwrap();
    let maps: Vec<StrainMap> = r.fovs.iter().map(|f| f.map.clone()).collect();
    let mut overlaps = Vec::new();
    for k in 0..9 {
        if k % 3 < 2 {
            overlaps.push((k, k + 1));
        }
        if k < 6 {
            overlaps.push((k, k + 3));
        }
    }
    let s = stitch(&maps, &overlaps).unwrap();
    let sigma = mean(&maps.iter().flat_map(|m| m.sigma.iter().cloned()).collect::<Vec<_>>());
    println!("seam rms {:.2} Hz, pixel sigma {sigma:.2} Hz, offsets {:?}", s.seam_rms, s.offsets);
    // two independent pixels differ by √2σ
    assert!(s.seam_rms < 1.5 * sigma);
    // each FOV starts one acquisition later, so its offset is the drift accrued since FOV 0
    for (k, o) in s.offsets.iter().enumerate() {
        assert!((o - 400.0 * r.fov_time * k as f64).abs() < sigma, "FOV {k}: {o}");
    }
    assert_eq!(s.map.geometry.dims, [20, 20, 1]);
}
