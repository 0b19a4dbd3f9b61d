//! Forward models and nonlinear least-squares fits.

mod chi;
mod decay;
pub mod quadrature;
mod scan;
mod shape;
pub mod solver;

use serde::Serialize;
use thiserror::Error;

pub use chi::{fit_chi_r, ChiFit, ChiFitOptions, DifferenceDataset};
pub use decay::{fit_exp_decay, DecayFitResult, DecayModel, DecayPoint};
pub use scan::{
    fit_scan, leakage_from_slices, scan_forward, synthesize_scan, LeakageLine, LeakageSlice, ScanFit,
    ScanKind, ScanModel, ScanParams, ScanPoint,
};
pub(crate) use shape::leakage_filter_ratio;
pub use shape::{
    decompose_shape, expm1_over_x, fwm_rate, readout_exponent, retrieval_density, shape_forward,
    shape_integrate, shape_integrate_range, DecompositionRow, RetrievalKinetics, ShapeModelParams,
    ShapeTerms, DEGENERACY_THRESHOLD,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("time {t} s lies outside the time-series coverage")]
    OutsideCoverage { t: f64 },
    #[error("invalid fit input: {0}")]
    InvalidInput(String),
    #[error("degenerate design: {0}")]
    Degenerate(String),
    #[error("no start converged within {iterations} iterations (best objective {objective})")]
    NonConvergence { iterations: usize, objective: f64 },
    #[error("curvature at the optimum is not positive definite")]
    Curvature,
    #[error("parameter at bound: {0}")]
    Bound(String),
}

impl FitError {
    /// Whether the failure came from the optimizer rather than the input.
    pub fn is_convergence(&self) -> bool {
        matches!(self, FitError::NonConvergence { .. } | FitError::Curvature | FitError::Bound(_))
    }
}

/// Generic JSON fit report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub model: String,
    pub parameters: Vec<NamedValue>,
    pub covariance: Vec<Vec<f64>>,
    pub objective: f64,
    pub reduced_chi_squared: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
}

impl NamedValue {
    pub fn new(name: &str, value: f64, stderr: f64) -> Self {
        Self { name: name.to_owned(), value, stderr }
    }
}

impl From<&DecayFitResult> for FitReport {
    fn from(r: &DecayFitResult) -> Self {
        Self {
            model: format!("decay-{}", if r.offset == 0.0 { "pure" } else { "offset" }),
            parameters: vec![
                NamedValue::new("amplitude", r.amplitude, r.amplitude_stderr),
                NamedValue::new("tau", r.tau, r.tau_stderr),
                NamedValue::new("offset", r.offset, 0.0),
            ],
            covariance: r.covariance.clone(),
            objective: r.chi_squared,
            reduced_chi_squared: r.reduced_chi_squared,
            iterations: r.iterations,
            converged: true,
            message: None,
        }
    }
}

impl From<&ScanFit> for FitReport {
    fn from(r: &ScanFit) -> Self {
        let names = ["peak_amplitude", "pedestal_amplitude", "pedestal_width", "leakage_amplitude", "background"];
        let values = [r.peak_amplitude, r.pedestal_amplitude, r.pedestal_width, r.leakage_amplitude, r.background];
        let mut parameters: Vec<NamedValue> = names
            .iter()
            .zip(values)
            .zip(&r.stderr)
            .map(|((n, v), e)| NamedValue::new(n, v, *e))
            .collect();
        parameters.push(NamedValue::new("leakage_center", r.leakage_center, 0.0));
        parameters.push(NamedValue::new("write_efficiency", r.write_efficiency, r.write_efficiency_stderr));
        Self {
            model: "scan".into(),
            parameters,
            covariance: r.covariance.clone(),
            objective: r.chi_squared,
            reduced_chi_squared: r.reduced_chi_squared,
            iterations: r.iterations,
            converged: true,
            message: None,
        }
    }
}

impl From<&ChiFit> for FitReport {
    fn from(r: &ChiFit) -> Self {
        Self {
            model: "shape".into(),
            parameters: vec![
                NamedValue::new("chi_r", r.chi_r, r.chi_r_stderr),
                NamedValue::new("chi_r_sq", r.chi_sq, r.chi_sq_stderr),
            ],
            covariance: vec![vec![r.chi_sq_stderr * r.chi_sq_stderr]],
            objective: r.chi_squared,
            reduced_chi_squared: r.reduced_chi_squared,
            iterations: r.iterations,
            converged: true,
            message: None,
        }
    }
}

impl FitReport {
    /// Report for a fit that failed, keeping the diagnostics.
    pub fn failed(model: &str, err: &FitError) -> Self {
        let (objective, iterations) = match err {
            FitError::NonConvergence { iterations, objective } => (*objective, *iterations),
            _ => (f64::NAN, 0),
        };
        Self {
            model: model.into(),
            parameters: Vec::new(),
            covariance: Vec::new(),
            objective,
            reduced_chi_squared: f64::NAN,
            iterations,
            converged: false,
            message: Some(err.to_string()),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedValue> {
        self.parameters.iter().find(|p| p.name == name)
    }
}
