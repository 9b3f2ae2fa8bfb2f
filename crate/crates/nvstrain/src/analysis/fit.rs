//! Bounded weighted Levenberg–Marquardt least squares.

use super::AnalysisError;
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when the relative χ² decrease falls below this.
    pub ftol: f64,
    /// Stop when every relative parameter step falls below this.
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 300, ftol: 1e-14, xtol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// `(JᵀWJ)⁻¹` at the solution.
    pub covariance: DMatrix<f64>,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LmResult {
    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    pub fn reduced_chi2(&self) -> f64 {
        if self.dof == 0 {
            return 0.0;
        }
        self.chi2 / self.dof as f64
    }

    /// Covariance multiplied by the reduced χ² (for unknown data variance).
    pub fn scaled_covariance(&self) -> DMatrix<f64> {
        &self.covariance * self.reduced_chi2()
    }
}

fn chi2<F: Fn(&[f64], f64) -> f64>(x: &[f64], y: &[f64], w: &[f64], f: &F, p: &[f64]) -> f64 {
    x.iter().zip(y).zip(w).map(|((xi, yi), wi)| wi * (yi - f(p, *xi)).powi(2)).sum()
}

fn jacobian<F: Fn(&[f64], f64) -> f64>(x: &[f64], sw: &[f64], f: &F, p: &[f64], scale: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let m = p.len();
    let mut j = DMatrix::zeros(n, m);
    let mut pp = p.to_vec();
    for k in 0..m {
        let h = 1e-6 * p[k].abs().max(1e-3 * scale[k]).max(1e-300);
        pp[k] = p[k] + h;
        let fp: Vec<f64> = x.iter().map(|xi| f(&pp, *xi)).collect();
        pp[k] = p[k] - h;
        let fm: Vec<f64> = x.iter().map(|xi| f(&pp, *xi)).collect();
        pp[k] = p[k];
        for i in 0..n {
            j[(i, k)] = sw[i] * (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    j
}

fn invert(a: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(inv) = a.clone().try_inverse() {
        return inv;
    }
    a.clone().pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::from_element(a.nrows(), a.ncols(), f64::INFINITY))
}

/// Minimizes `Σ wᵢ (yᵢ − f(p, xᵢ))²` inside the box `[lower, upper]`.
#[allow(clippy::too_many_arguments)]
pub fn levenberg_marquardt<F: Fn(&[f64], f64) -> f64>(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    f: &F,
    p0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LmOptions,
) -> Result<LmResult, AnalysisError> {
    let m = p0.len();
    if x.len() != y.len() || x.len() != w.len() {
        return Err(AnalysisError::LengthMismatch("x, y and weights".into()));
    }
    if lower.len() != m || upper.len() != m {
        return Err(AnalysisError::LengthMismatch("bounds".into()));
    }
    if x.len() < m {
        return Err(AnalysisError::InsufficientData(format!("{} points for {} parameters", x.len(), m)));
    }
    let clamp = |p: &mut [f64]| {
        for k in 0..m {
            p[k] = p[k].clamp(lower[k], upper[k]);
        }
    };
    let scale: Vec<f64> = (0..m)
        .map(|k| {
            let r = upper[k] - lower[k];
            if r.is_finite() && r > 0.0 {
                r
            } else {
                p0[k].abs().max(1.0)
            }
        })
        .collect();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let mut p = p0.to_vec();
    clamp(&mut p);
    let mut c = chi2(x, y, w, f, &p);
    if !c.is_finite() {
        return Err(AnalysisError::NonConvergence("non-finite initial residual".into()));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut jac = jacobian(x, &sw, f, &p, &scale);
    while iterations < opts.max_iter {
        iterations += 1;
        let r = DVector::from_iterator(x.len(), (0..x.len()).map(|i| sw[i] * (y[i] - f(&p, x[i]))));
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * r;
        let mut improved = false;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for k in 0..m {
                damped[(k, k)] += lambda * a[(k, k)].max(1e-12 * (1.0 + a.diagonal().amax()));
            }
            let Some(step) = damped.clone().lu().solve(&g) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = (0..m).map(|k| p[k] + step[k]).collect();
            clamp(&mut trial);
            let ct = chi2(x, y, w, f, &trial);
            if ct.is_finite() && ct <= c {
                let small_step = (0..m).all(|k| (trial[k] - p[k]).abs() <= opts.xtol * (p[k].abs() + 1e-3 * scale[k]));
                let small_gain = c - ct <= opts.ftol * c.max(1e-300);
                p = trial;
                c = ct;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if small_step || small_gain || c == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no downhill step at any damping: stationary within precision
            converged = true;
            break;
        }
        jac = jacobian(x, &sw, f, &p, &scale);
        if converged {
            break;
        }
    }
    let covariance = invert(&(jac.transpose() * &jac));
    Ok(LmResult { params: p, covariance, chi2: c, dof: x.len().saturating_sub(m), iterations, converged })
}
