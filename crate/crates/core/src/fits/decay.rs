//! Exponential decay fits versus storage time.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::solver::{multi_start, Bounds, LeastSquares, LmOptions};
use super::FitError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayModel {
    /// `A exp(-t / tau)`.
    Pure,
    /// `1 + C exp(-t / tau)`.
    Offset,
}

impl DecayModel {
    pub fn offset(self) -> f64 {
        match self {
            DecayModel::Pure => 0.0,
            DecayModel::Offset => 1.0,
        }
    }

    pub fn eval(self, amplitude: f64, tau: f64, t: f64) -> f64 {
        self.offset() + amplitude * (-t / tau).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFitResult {
    pub model: DecayModel,
    pub amplitude: f64,
    pub tau: f64,
    pub offset: f64,
    pub amplitude_stderr: f64,
    pub tau_stderr: f64,
    pub covariance: Vec<Vec<f64>>,
    pub chi_squared: f64,
    pub reduced_chi_squared: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

struct DecayProblem<'a> {
    points: &'a [DecayPoint],
    model: DecayModel,
}

impl LeastSquares for DecayProblem<'_> {
    fn n_params(&self) -> usize {
        2
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        self.points
            .iter()
            .map(|q| (self.model.eval(p[0], p[1], q.t) - q.value) / q.stderr)
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (a, tau) = (p[0], p[1]);
        DMatrix::from_fn(self.points.len(), 2, |i, j| {
            let q = &self.points[i];
            let e = (-q.t / tau).exp();
            match j {
                0 => e / q.stderr,
                _ => a * e * q.t / (tau * tau) / q.stderr,
            }
        })
    }
}

/// Weighted log-linear estimate of `(amplitude, tau)`.
fn initial_guess(points: &[DecayPoint], model: DecayModel) -> (f64, f64) {
    let off = model.offset();
    let (t_min, t_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.t), hi.max(p.t)));
    let span = (t_max - t_min).max(f64::MIN_POSITIVE);
    let usable: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| p.value - off > 0.0)
        .map(|p| {
            let y = p.value - off;
            (p.t, y.ln(), (y / p.stderr).powi(2))
        })
        .collect();
    let fallback = || {
        let top = points.iter().map(|p| p.value - off).fold(0.0, f64::max);
        (top.max(f64::MIN_POSITIVE), 0.5 * span)
    };
    if usable.len() < 2 {
        return fallback();
    }
    let sw: f64 = usable.iter().map(|u| u.2).sum();
    let mt = usable.iter().map(|u| u.2 * u.0).sum::<f64>() / sw;
    let my = usable.iter().map(|u| u.2 * u.1).sum::<f64>() / sw;
    let sxx: f64 = usable.iter().map(|u| u.2 * (u.0 - mt).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|u| u.2 * (u.0 - mt) * (u.1 - my)).sum();
    if sxx <= 0.0 || sxy >= 0.0 {
        return fallback();
    }
    let slope = sxy / sxx;
    let tau = (-1.0 / slope).min(1e3 * span);
    (((my - slope * mt).exp()), tau)
}

/// Weighted least-squares exponential fit. Needs at least three points with
/// positive, finite standard errors.
pub fn fit_exp_decay(points: &[DecayPoint], model: DecayModel) -> Result<DecayFitResult, FitError> {
    if points.len() < 3 {
        return Err(FitError::InvalidInput(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.stderr > 0.0 && p.stderr.is_finite() && p.t.is_finite() && p.value.is_finite()))
    {
        return Err(FitError::InvalidInput(format!("bad point {p:?}")));
    }
    let t_max = points.iter().map(|p| p.t.abs()).fold(0.0, f64::max);
    if t_max == 0.0 {
        return Err(FitError::Degenerate("all points at t = 0".into()));
    }
    let (a0, tau0) = initial_guess(points, model);
    let tau_floor = 1e-9 * t_max;
    let tau_ceiling = 1e9 * t_max;
    let bounds = Bounds { lower: vec![0.0, tau_floor], upper: vec![f64::INFINITY, tau_ceiling] };
    let problem = DecayProblem { points, model };
    let res = multi_start(&problem, &[a0, tau0], &[false, true], &bounds, &LmOptions::default())?;
    let tau = res.params[1];
    if tau <= tau_floor || tau >= tau_ceiling {
        return Err(FitError::Bound(format!("decay time {tau} at its bound")));
    }
    let se = res.std_errors();
    Ok(DecayFitResult {
        model,
        amplitude: res.params[0],
        tau,
        offset: model.offset(),
        amplitude_stderr: se[0],
        tau_stderr: se[1],
        covariance: res.covariance_rows(),
        chi_squared: res.chi_squared,
        reduced_chi_squared: res.reduced_chi_squared(),
        iterations: res.iterations,
        gradient_norm: res.gradient_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(model: DecayModel, a: f64, tau: f64, scale: f64) -> Vec<DecayPoint> {
        (0..12)
            .map(|k| {
                let t = (10e-6 + k as f64 * 45e-6) * scale;
                DecayPoint { t, value: model.eval(a, tau * scale, t), stderr: 1e-3 }
            })
            .collect()
    }

    #[test]
    fn noiseless_pure_recovery() {
        let fit = fit_exp_decay(&samples(DecayModel::Pure, 0.02, 0.27e-3, 1.0), DecayModel::Pure).unwrap();
        assert!((fit.tau / 0.27e-3 - 1.0).abs() < 1e-8, "{}", fit.tau);
        assert!((fit.amplitude / 0.02 - 1.0).abs() < 1e-8);
        assert!(fit.chi_squared < 1e-16);
    }

    #[test]
    fn noiseless_offset_recovery() {
        let fit = fit_exp_decay(&samples(DecayModel::Offset, 0.9, 0.17e-3, 1.0), DecayModel::Offset).unwrap();
        assert!((fit.tau / 0.17e-3 - 1.0).abs() < 1e-8);
        assert!((fit.amplitude / 0.9 - 1.0).abs() < 1e-8);
        assert_eq!(fit.offset, 1.0);
    }

    #[test]
    fn rejects_short_or_unweighted_input() {
        let pts = samples(DecayModel::Pure, 0.02, 0.27e-3, 1.0);
        assert!(matches!(fit_exp_decay(&pts[..2], DecayModel::Pure), Err(FitError::InvalidInput(_))));
        let mut bad = pts.clone();
        bad[3].stderr = 0.0;
        assert!(fit_exp_decay(&bad, DecayModel::Pure).is_err());
    }

    #[test]
    fn microseconds_versus_seconds() {
        let mut pts = samples(DecayModel::Pure, 0.02, 0.27e-3, 1.0);
        // perturb so the optimum is not an exact interpolation
        for (k, p) in pts.iter_mut().enumerate() {
            p.value *= 1.0 + 0.03 * if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        let us: Vec<DecayPoint> = pts.iter().map(|p| DecayPoint { t: p.t * 1e6, ..*p }).collect();
        let a = fit_exp_decay(&pts, DecayModel::Pure).unwrap();
        let b = fit_exp_decay(&us, DecayModel::Pure).unwrap();
        assert!((b.tau / (a.tau * 1e6) - 1.0).abs() < 1e-9, "{} vs {}", a.tau, b.tau);
        assert!((b.tau_stderr / (a.tau_stderr * 1e6) - 1.0).abs() < 1e-6);
    }
}
