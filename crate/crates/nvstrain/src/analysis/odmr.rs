//! CW-ODMR spectra: synthesis, multi-Lorentzian fitting, Mz/Bz maps.

use super::fit::{levenberg_marquardt, LmOptions, LmResult};
use super::AnalysisError;
use crate::spin::{DEFAULT_D, DEFAULT_GAMMA, DEFAULT_HYPERFINE};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Synthetic spectrum settings. Off-axis classes use the secular
/// approximation (`D + Mz ± γ·B_proj`) and share one projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdmrConfig {
    pub d: f64,
    pub gamma: f64,
    /// Field along the aligned class, T.
    pub bz: f64,
    /// Field projection on each off-axis class, T.
    pub offaxis_projection: f64,
    pub hyperfine: f64,
    pub fwhm: f64,
    /// Dip depth of one hyperfine line of one class.
    pub depth: f64,
    pub f_start: f64,
    pub f_stop: f64,
    pub n_points: usize,
    /// Per-point Gaussian noise on the normalized contrast.
    pub noise: f64,
}

impl Default for OdmrConfig {
    fn default() -> Self {
        Self {
            d: DEFAULT_D,
            gamma: DEFAULT_GAMMA,
            bz: 2.1e-3,
            offaxis_projection: 0.75e-3,
            hyperfine: DEFAULT_HYPERFINE,
            fwhm: 1e6,
            depth: 0.005,
            f_start: 2.795e9,
            f_stop: 2.945e9,
            n_points: 601,
            noise: 0.0,
        }
    }
}

impl OdmrConfig {
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.n_points.max(2);
        (0..n).map(|k| self.f_start + (self.f_stop - self.f_start) * k as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineGroup {
    /// Centre of the hyperfine triplet, Hz.
    pub center: f64,
    pub fwhm: f64,
    /// Depth of each of the three lines.
    pub depth: f64,
    pub sigma_center: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ODMRSpectrum {
    pub frequencies: Vec<f64>,
    pub contrast: Vec<f64>,
    /// Per-point noise σ; 0 when unknown.
    pub noise: f64,
    pub groups: Vec<LineGroup>,
    pub baseline: f64,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    /// Two fitted groups overlap within a linewidth.
    pub degenerate: bool,
}

impl ODMRSpectrum {
    pub fn new(frequencies: Vec<f64>, contrast: Vec<f64>, noise: f64) -> Result<Self, AnalysisError> {
        if frequencies.len() != contrast.len() {
            return Err(AnalysisError::LengthMismatch("frequencies and contrast".into()));
        }
        if frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AnalysisError::InvalidInput("frequencies must be strictly ascending".into()));
        }
        Ok(Self {
            frequencies,
            contrast,
            noise,
            groups: Vec::new(),
            baseline: 1.0,
            chi2: 0.0,
            dof: 0,
            converged: false,
            degenerate: false,
        })
    }

    /// Aligned-class `(f+, f−)`: the outermost fitted groups.
    pub fn aligned(&self) -> Option<(f64, f64)> {
        if self.groups.len() < 2 {
            return None;
        }
        Some((self.groups[self.groups.len() - 1].center, self.groups[0].center))
    }

    pub fn reduced_chi2(&self) -> f64 {
        if self.dof == 0 {
            0.0
        } else {
            self.chi2 / self.dof as f64
        }
    }
}

/// Peak-normalized Lorentzian dip.
pub fn lorentzian_dip(f: f64, center: f64, fwhm: f64, depth: f64) -> f64 {
    let h = 0.5 * fwhm;
    depth * h * h / ((f - center).powi(2) + h * h)
}

/// Triplet centres and relative depths (aligned f−, off-axis f−, off-axis f+,
/// aligned f+) for a given Mz.
pub fn odmr_line_groups(cfg: &OdmrConfig, mz: f64) -> Vec<(f64, f64)> {
    let c = cfg.d + mz;
    let a = cfg.gamma * cfg.bz;
    let o = cfg.gamma * cfg.offaxis_projection;
    vec![(c - a, cfg.depth), (c - o, 3.0 * cfg.depth), (c + o, 3.0 * cfg.depth), (c + a, cfg.depth)]
}

fn triplet_dip(f: f64, center: f64, fwhm: f64, depth: f64, hf: f64) -> f64 {
    lorentzian_dip(f, center - hf, fwhm, depth)
        + lorentzian_dip(f, center, fwhm, depth)
        + lorentzian_dip(f, center + hf, fwhm, depth)
}

/// Normalized spectrum from a distribution of Mz values `(mz, weight)`.
pub fn synth_odmr<R: Rng>(cfg: &OdmrConfig, mz: &[(f64, f64)], rng: Option<&mut R>) -> ODMRSpectrum {
    let freqs = cfg.frequencies();
    let mut y: Vec<f64> = freqs
        .iter()
        .map(|&f| {
            1.0 - mz
                .iter()
                .map(|&(m, w)| {
                    w * odmr_line_groups(cfg, m)
                        .iter()
                        .map(|&(c, d)| triplet_dip(f, c, cfg.fwhm, d, cfg.hyperfine))
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .collect();
    if let (Some(rng), true) = (rng, cfg.noise > 0.0) {
        let n = Normal::new(0.0, cfg.noise).expect("positive noise");
        for v in &mut y {
            *v += n.sample(rng);
        }
    }
    ODMRSpectrum::new(freqs, y, cfg.noise).expect("ascending grid")
}

fn pick_centres(freqs: &[f64], y: &[f64], baseline: f64, hf: f64, n: usize) -> Vec<f64> {
    let dip: Vec<f64> = y.iter().map(|v| baseline - v).collect();
    let last = freqs[freqs.len() - 1];
    let at = |f: f64| -> f64 {
        if f < freqs[0] || f > last {
            return 0.0;
        }
        match freqs.binary_search_by(|x| x.partial_cmp(&f).unwrap()) {
            Ok(i) => dip[i],
            Err(i) => {
                let t = (f - freqs[i - 1]) / (freqs[i] - freqs[i - 1]);
                dip[i - 1] * (1.0 - t) + dip[i] * t
            }
        }
    };
    let mut scored: Vec<(f64, f64)> = freqs.iter().map(|&f| (f, at(f - hf) + at(f) + at(f + hf))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut out: Vec<f64> = Vec::new();
    for (f, _) in scored {
        if out.len() == n {
            break;
        }
        if out.iter().all(|c| (c - f).abs() > 2.5 * hf) {
            out.push(f);
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Multi-Lorentzian fit with `2·n_classes` hyperfine triplets of fixed splitting.
pub fn fit_odmr(spectrum: &ODMRSpectrum, n_classes: usize, hyperfine: f64) -> Result<ODMRSpectrum, AnalysisError> {
    let freqs = &spectrum.frequencies;
    let y = &spectrum.contrast;
    let n_groups = 2 * n_classes;
    if n_groups == 0 || freqs.len() < 4 * n_groups + 1 {
        return Err(AnalysisError::InsufficientData("too few points for the requested classes".into()));
    }
    let mut sorted = y.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let b0 = sorted[(0.9 * (sorted.len() - 1) as f64) as usize];
    let centres = pick_centres(freqs, y, b0, hyperfine, n_groups);
    if centres.len() < n_groups {
        return Err(AnalysisError::NonConvergence("could not locate all line groups".into()));
    }
    let df = freqs[1] - freqs[0];
    let f0 = freqs[0];
    // work in MHz relative to the first point
    let x: Vec<f64> = freqs.iter().map(|f| (f - f0) * 1e-6).collect();
    let hf = hyperfine * 1e-6;
    let model = |p: &[f64], f: f64| {
        let mut s = 0.0;
        for g in 0..n_groups {
            let (c, w, d) = (p[1 + 3 * g], p[2 + 3 * g], p[3 + 3 * g]);
            s += triplet_dip(f, c, w, d, hf);
        }
        p[0] * (1.0 - s)
    };
    let w = vec![if spectrum.noise > 0.0 { 1.0 / spectrum.noise.powi(2) } else { 1.0 }; x.len()];
    let mut best: Option<LmResult> = None;
    for w0 in [0.5, 1.5] {
        let mut p0 = vec![b0];
        let mut lo = vec![0.5 * b0];
        let mut hi = vec![1.5 * b0];
        for &c in &centres {
            let cm = (c - f0) * 1e-6;
            let i = ((c - f0) / df).round() as usize;
            let depth0 = ((b0 - y[i.min(y.len() - 1)]) / b0).max(1e-4);
            p0.extend([cm, w0, depth0]);
            lo.extend([cm - 3.0, (df * 1e-6).max(1e-3), 0.0]);
            hi.extend([cm + 3.0, 10.0, 1.0]);
        }
        if let Ok(r) = levenberg_marquardt(&x, y, &w, &model, &p0, &lo, &hi, &LmOptions::default()) {
            if best.as_ref().is_none_or(|b| r.chi2 < b.chi2) {
                best = Some(r);
            }
        }
    }
    let r = best.ok_or_else(|| AnalysisError::NonConvergence("ODMR fit failed".into()))?;
    let scale = if spectrum.noise > 0.0 { 1.0 } else { r.reduced_chi2() };
    let mut groups: Vec<LineGroup> = (0..n_groups)
        .map(|g| LineGroup {
            center: f0 + r.params[1 + 3 * g] * 1e6,
            fwhm: r.params[2 + 3 * g] * 1e6,
            depth: r.params[3 + 3 * g],
            sigma_center: (r.covariance[(1 + 3 * g, 1 + 3 * g)] * scale).max(0.0).sqrt() * 1e6,
        })
        .collect();
    groups.sort_by(|a, b| a.center.partial_cmp(&b.center).unwrap());
    let degenerate = groups.windows(2).any(|p| p[1].center - p[0].center < p[0].fwhm.max(p[1].fwhm));
    Ok(ODMRSpectrum {
        frequencies: freqs.clone(),
        contrast: y.clone(),
        noise: spectrum.noise,
        groups,
        baseline: r.params[0],
        chi2: r.chi2,
        dof: r.dof,
        converged: r.converged,
        degenerate,
    })
}

/// `Mz = (f+ + f−)/2 − D`, `Bz = (f+ − f−)/(2γ)`.
pub fn odmr_to_maps(f_plus: f64, f_minus: f64, d: f64, gamma: f64) -> Result<(f64, f64), AnalysisError> {
    if f_plus < f_minus {
        return Err(AnalysisError::InvalidInput(format!("f+ {f_plus} below f- {f_minus}")));
    }
    Ok((0.5 * (f_plus + f_minus) - d, (f_plus - f_minus) / (2.0 * gamma)))
}
