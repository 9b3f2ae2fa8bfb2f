//! Direct-DFT periodogram and fringe-frequency counting.

use super::{AnalysisError, Trace};
use std::f64::consts::PI;

/// Hann-windowed, mean-removed power at each requested frequency.
pub fn periodogram(x: &[f64], y: &[f64], freqs: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; freqs.len()];
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let (x0, x1) = (x[0], x[n - 1]);
    let span = (x1 - x0).max(f64::MIN_POSITIVE);
    let win: Vec<f64> = x.iter().map(|t| 0.5 - 0.5 * (2.0 * PI * (t - x0) / span).cos()).collect();
    freqs
        .iter()
        .map(|f| {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let v = (y[i] - mean) * win[i];
                let (s, c) = (2.0 * PI * f * x[i]).sin_cos();
                re += v * c;
                im += v * s;
            }
            re * re + im * im
        })
        .collect()
}

/// Frequencies of spectral peaks above `rel_threshold` of the largest one.
///
/// The periodogram is evaluated on a grid 8× finer than the natural
/// resolution up to `f_max`; peaks closer than two resolution widths merge.
pub fn count_peaks(trace: &Trace, f_max: f64, rel_threshold: f64) -> Result<Vec<f64>, AnalysisError> {
    if trace.len() < 8 {
        return Err(AnalysisError::InsufficientData("need at least 8 samples".into()));
    }
    let span = trace.x[trace.len() - 1] - trace.x[0];
    if !(span > 0.0) || !(f_max > 0.0) {
        return Err(AnalysisError::InvalidInput("trace span and f_max must be positive".into()));
    }
    let df = 1.0 / (8.0 * span);
    let nf = (f_max / df).ceil() as usize + 1;
    let freqs: Vec<f64> = (0..nf).map(|k| k as f64 * df).collect();
    let p = periodogram(&trace.x, &trace.y, &freqs);
    let pmax = p.iter().cloned().fold(0.0, f64::max);
    if pmax <= 0.0 {
        return Ok(Vec::new());
    }
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for k in 1..nf - 1 {
        if p[k] >= p[k - 1] && p[k] > p[k + 1] && p[k] >= rel_threshold * pmax {
            peaks.push((freqs[k], p[k]));
        }
    }
    let min_sep = 2.0 / span;
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for pk in peaks {
        match merged.last_mut() {
            Some(last) if pk.0 - last.0 < min_sep => {
                if pk.1 > last.1 {
                    *last = pk;
                }
            }
            _ => merged.push(pk),
        }
    }
    Ok(merged.into_iter().map(|m| m.0).collect())
}
