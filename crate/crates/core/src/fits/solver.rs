//! Bounded Levenberg-Marquardt least squares with deterministic multi-start.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::FitError;

/// Multiplicative jitters applied to the nonlinear parameters of each start.
pub const START_JITTERS: [f64; 5] = [1.0, 0.5, 2.0, 0.25, 4.0];

/// A weighted least-squares problem: minimize `sum r_i(p)^2` where the
/// residuals are already divided by their standard errors.
pub trait LeastSquares: Sync {
    fn n_params(&self) -> usize;
    fn residuals(&self, p: &[f64]) -> Vec<f64>;

    /// Jacobian `d r_i / d p_j`. Central differences unless overridden.
    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let r0 = self.residuals(p);
        let mut jac = DMatrix::zeros(r0.len(), p.len());
        let mut q = p.to_vec();
        for j in 0..p.len() {
            let h = f64::EPSILON.cbrt() * p[j].abs().max(1.0);
            q[j] = p[j] + h;
            let up = self.residuals(&q);
            q[j] = p[j] - h;
            let down = self.residuals(&q);
            q[j] = p[j];
            for i in 0..r0.len() {
                jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        jac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn non_negative(n: usize) -> Self {
        Self { lower: vec![0.0; n], upper: vec![f64::INFINITY; n] }
    }

    fn clamp(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative cost reduction below which an accepted step counts as converged.
    pub ftol: f64,
    /// Relative (scaled) step size tolerance.
    pub xtol: f64,
    /// Tolerance on the scaled projected gradient.
    pub gtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 500, ftol: 1e-15, xtol: 1e-12, gtol: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Weighted sum of squared residuals.
    pub chi_squared: f64,
    pub n_residuals: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the projected gradient of `chi_squared / 2`.
    pub gradient_norm: f64,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    /// Index of the start that produced this result.
    pub start_index: usize,
}

impl LmResult {
    pub fn std_errors(&self) -> Vec<f64> {
        (0..self.params.len())
            .map(|j| self.covariance[(j, j)].max(0.0).sqrt())
            .collect()
    }

    pub fn reduced_chi_squared(&self) -> f64 {
        let dof = self.n_residuals.saturating_sub(self.params.len());
        if dof == 0 {
            f64::NAN
        } else {
            self.chi_squared / dof as f64
        }
    }

    pub fn covariance_rows(&self) -> Vec<Vec<f64>> {
        self.covariance.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn projected_gradient(x: &[f64], g: &DVector<f64>, bounds: &Bounds) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let at_lower = x[j] <= bounds.lower[j] && g[j] > 0.0;
            let at_upper = x[j] >= bounds.upper[j] && g[j] < 0.0;
            if at_lower || at_upper {
                0.0
            } else {
                g[j]
            }
        })
        .collect()
}

/// Inverse of `JᵀJ`, falling back to a pseudo-inverse when singular.
pub fn covariance(jac: &DMatrix<f64>) -> DMatrix<f64> {
    let a = jac.transpose() * jac;
    let n = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        return chol.inverse();
    }
    let eps = 1e-14 * a.diagonal().amax();
    a.svd(true, true)
        .pseudo_inverse(eps)
        .unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN))
}

/// Single Levenberg-Marquardt run from `x0`, projected onto `bounds`.
pub fn levenberg_marquardt<P: LeastSquares + ?Sized>(
    problem: &P,
    x0: &[f64],
    bounds: &Bounds,
    opts: &LmOptions,
) -> LmResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);
    let mut r = problem.residuals(&x);
    let mut cost = sum_sq(&r);
    let mut jac = problem.jacobian(&x);
    let mut scale = vec![0.0f64; n];
    let mut lambda = -1.0;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let rv = DVector::from_column_slice(&r);
        let g = jac.transpose() * &rv;
        let a = jac.transpose() * &jac;
        for j in 0..n {
            scale[j] = scale[j].max(a[(j, j)]).max(f64::MIN_POSITIVE);
        }
        if lambda < 0.0 {
            lambda = 1e-3;
        }

        let pg = projected_gradient(&x, &g, bounds);
        let gnorm = pg
            .iter()
            .zip(&scale)
            .map(|(v, s)| v.abs() / s.sqrt())
            .fold(0.0, f64::max);
        if gnorm <= opts.gtol * cost.sqrt().max(f64::MIN_POSITIVE) || cost == 0.0 {
            converged = true;
            break;
        }

        // Variables pinned at an active bound are held fixed for this step.
        let free: Vec<usize> = (0..n).filter(|&j| pg[j] != 0.0 || g[j] == 0.0).collect();
        let mut accepted = false;
        while !accepted {
            let m = free.len();
            let mut lhs = DMatrix::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            for (p, &i) in free.iter().enumerate() {
                rhs[p] = -g[i];
                for (q, &k) in free.iter().enumerate() {
                    lhs[(p, q)] = a[(i, k)];
                }
                lhs[(p, p)] += lambda * scale[i];
            }
            let Some(step) = lhs.clone().cholesky().map(|c| c.solve(&rhs)) else {
                lambda *= nu;
                nu *= 2.0;
                if !lambda.is_finite() {
                    break;
                }
                continue;
            };
            let mut trial = x.clone();
            for (p, &i) in free.iter().enumerate() {
                trial[i] += step[p];
            }
            bounds.clamp(&mut trial);
            let delta = DVector::from_iterator(n, trial.iter().zip(&x).map(|(t, v)| t - v));
            let predicted = -(2.0 * g.dot(&delta) + delta.dot(&(&a * &delta)));
            let r_new = problem.residuals(&trial);
            let cost_new = sum_sq(&r_new);
            let step_norm = delta.iter().zip(&scale).map(|(d, s)| d * d * s).sum::<f64>().sqrt();
            let x_norm = x.iter().zip(&scale).map(|(v, s)| v * v * s).sum::<f64>().sqrt();

            if cost_new.is_finite() && cost_new < cost && predicted > 0.0 {
                let rho = (cost - cost_new) / predicted;
                let reduction = cost - cost_new;
                x = trial;
                r = r_new;
                cost = cost_new;
                jac = problem.jacobian(&x);
                lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                accepted = true;
                if reduction <= opts.ftol * cost || step_norm <= opts.xtol * (x_norm + opts.xtol) {
                    converged = true;
                }
            } else {
                lambda *= nu;
                nu *= 2.0;
                if step_norm <= opts.xtol * (x_norm + opts.xtol) || !lambda.is_finite() {
                    // No representable step improves the objective.
                    converged = true;
                    break;
                }
            }
        }
        if converged {
            break;
        }
    }

    let g = jac.transpose() * DVector::from_column_slice(&r);
    let gradient_norm = projected_gradient(&x, &g, bounds).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    LmResult {
        params: x,
        chi_squared: cost,
        n_residuals: r.len(),
        iterations,
        converged,
        gradient_norm,
        covariance: covariance(&jac),
        start_index: 0,
    }
}

/// Runs one LM fit per entry of [`START_JITTERS`], scaling the parameters
/// flagged in `nonlinear`, and keeps the lowest objective (ties to the lower
/// start index).
pub fn multi_start<P: LeastSquares + ?Sized>(
    problem: &P,
    x0: &[f64],
    nonlinear: &[bool],
    bounds: &Bounds,
    opts: &LmOptions,
) -> Result<LmResult, FitError> {
    let runs: Vec<LmResult> = START_JITTERS
        .par_iter()
        .enumerate()
        .map(|(k, &f)| {
            let start: Vec<f64> = x0
                .iter()
                .zip(nonlinear)
                .map(|(&v, &nl)| if nl { v * f } else { v })
                .collect();
            let mut res = levenberg_marquardt(problem, &start, bounds, opts);
            res.start_index = k;
            res
        })
        .collect();
    let best = runs
        .iter()
        .filter(|r| r.converged && r.chi_squared.is_finite())
        .min_by(|a, b| a.chi_squared.total_cmp(&b.chi_squared).then(a.start_index.cmp(&b.start_index)));
    match best {
        Some(r) => Ok(r.clone()),
        None => {
            let fallback = runs
                .iter()
                .filter(|r| r.chi_squared.is_finite())
                .min_by(|a, b| a.chi_squared.total_cmp(&b.chi_squared));
            Err(FitError::NonConvergence {
                iterations: opts.max_iterations,
                objective: fallback.map_or(f64::NAN, |r| r.chi_squared),
            })
        }
    }
}
