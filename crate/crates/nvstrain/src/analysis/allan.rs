//! Overlapping Allan deviation with χ² confidence intervals.

use super::AnalysisError;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllanPoint {
    pub tau: f64,
    pub m: usize,
    pub adev: f64,
    /// 68% confidence bounds.
    pub lower: f64,
    pub upper: f64,
    pub edf: f64,
    pub n_terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllanResult {
    pub sample_interval: f64,
    pub points: Vec<AllanPoint>,
}

impl AllanResult {
    pub fn taus(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.tau).collect()
    }

    pub fn adevs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.adev).collect()
    }

    /// Least-squares slope of log σ against log τ.
    pub fn log_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> =
            self.points.iter().filter(|p| p.adev > 0.0).map(|p| (p.tau.ln(), p.adev.ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }
}

/// Equivalent degrees of freedom for the overlapping estimator under white
/// frequency noise (Greenhall's approximation).
fn edf_white(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    let e = (3.0 * (n - 1.0) / (2.0 * m) - 2.0 * (n - 2.0) / n) * (4.0 * m * m / (4.0 * m * m + 5.0));
    e.max(1.0)
}

fn interval(adev: f64, edf: f64) -> (f64, f64) {
    let Ok(chi) = ChiSquared::new(edf) else {
        return (0.0, f64::INFINITY);
    };
    let lo = chi.inverse_cdf(0.8413);
    let hi = chi.inverse_cdf(0.1587);
    (adev * (edf / lo).sqrt(), adev * (edf / hi).sqrt())
}

fn validate(series: &[f64], sample_interval: f64, taus: &[f64]) -> Result<Vec<usize>, AnalysisError> {
    if !(sample_interval > 0.0) {
        return Err(AnalysisError::InvalidInput("sample interval must be positive".into()));
    }
    taus.iter()
        .map(|&t| {
            let m = (t / sample_interval).round() as usize;
            if m == 0 {
                return Err(AnalysisError::InvalidInput(format!("tau {t} is shorter than the sample interval")));
            }
            if series.len() < 2 * m {
                return Err(AnalysisError::InsufficientData(format!(
                    "tau {t} needs {} samples, have {}",
                    2 * m,
                    series.len()
                )));
            }
            Ok(m)
        })
        .collect()
}

/// Overlapping Allan deviation `√(½⟨(ȳ_{i+m} − ȳ_i)²⟩)` using cumulative sums.
pub fn allan_deviation(series: &[f64], sample_interval: f64, taus: &[f64]) -> Result<AllanResult, AnalysisError> {
    let ms = validate(series, sample_interval, taus)?;
    let n = series.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for v in series {
        cum.push(cum.last().unwrap() + v);
    }
    let points = ms
        .iter()
        .map(|&m| {
            let terms = n - 2 * m + 1;
            let mut acc = 0.0;
            for i in 0..terms {
                let d = (cum[i + 2 * m] - 2.0 * cum[i + m] + cum[i]) / m as f64;
                acc += d * d;
            }
            let adev = (0.5 * acc / terms as f64).sqrt();
            let edf = edf_white(n, m);
            let (lower, upper) = interval(adev, edf);
            AllanPoint { tau: m as f64 * sample_interval, m, adev, lower, upper, edf, n_terms: terms }
        })
        .collect();
    Ok(AllanResult { sample_interval, points })
}

/// Direct-definition estimator: explicit window averages, O(n·m).
pub fn allan_deviation_direct(series: &[f64], sample_interval: f64, taus: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    let ms = validate(series, sample_interval, taus)?;
    Ok(ms
        .iter()
        .map(|&m| {
            let avg = |i: usize| series[i..i + m].iter().sum::<f64>() / m as f64;
            let terms = series.len() - 2 * m + 1;
            let s: f64 = (0..terms).map(|i| (avg(i + m) - avg(i)).powi(2)).sum();
            (0.5 * s / terms as f64).sqrt()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_series() {
        let r = allan_deviation(&[2.5; 40], 1.0, &[1.0, 4.0, 20.0]).unwrap();
        assert!(r.adevs().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn alternating_series() {
        let s: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let r = allan_deviation(&s, 1.0, &[1.0]).unwrap();
        assert_eq!(r.points[0].adev, 2f64.sqrt());
    }

    #[test]
    fn insufficient_data() {
        assert!(matches!(allan_deviation(&[1.0; 10], 1.0, &[6.0]), Err(AnalysisError::InsufficientData(_))));
        assert!(allan_deviation(&[1.0; 10], 1.0, &[5.0]).is_ok());
    }

    #[test]
    fn white_noise_scaling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..100_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                2.0 * z
            })
            .collect();
        let r = allan_deviation(&s, 1.0, &[1.0, 10.0, 100.0]).unwrap();
        for p in &r.points {
            let want = 2.0 / p.tau.sqrt();
            assert!(p.lower <= want * 1.05 && want <= p.upper * 1.05, "{p:?}");
        }
    }
}
