//! Filter-detuning scans: narrow peak, broad pedestal, drive leakage and a
//! flat background.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::solver::{multi_start, Bounds, LeastSquares, LmOptions};
use super::FitError;
use crate::filter_chain::FilterChain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanKind {
    Write,
    Read,
    ReadNoWrite,
}

impl std::str::FromStr for ScanKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "write" => Ok(Self::Write),
            "read" => Ok(Self::Read),
            "read-no-write" => Ok(Self::ReadNoWrite),
            other => Err(format!("unknown scan kind '{other}'")),
        }
    }
}

/// Mean counts per pulse at one filter detuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub detuning: f64,
    pub counts: f64,
    pub stderr: f64,
}

impl ScanPoint {
    /// Point from a raw click total; Poisson error with a floor of one count.
    pub fn from_totals(detuning: f64, clicks: u64, pulses: u64) -> Self {
        let n = pulses as f64;
        Self {
            detuning,
            counts: clicks as f64 / n,
            stderr: (clicks.max(1) as f64).sqrt() / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub peak_amplitude: f64,
    pub pedestal_amplitude: f64,
    pub pedestal_width: f64,
    pub leakage_amplitude: f64,
    pub background: f64,
}

impl ScanParams {
    fn to_vec(self) -> Vec<f64> {
        vec![
            self.peak_amplitude,
            self.pedestal_amplitude,
            self.pedestal_width,
            self.leakage_amplitude,
            self.background,
        ]
    }

    fn from_slice(p: &[f64]) -> Self {
        Self {
            peak_amplitude: p[0],
            pedestal_amplitude: p[1],
            pedestal_width: p[2],
            leakage_amplitude: p[3],
            background: p[4],
        }
    }

    /// Narrow-peak share of the counts at zero detuning.
    pub fn write_efficiency(&self) -> f64 {
        let total = self.peak_amplitude + self.pedestal_amplitude;
        if total > 0.0 {
            self.peak_amplitude / total
        } else {
            f64::NAN
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanModel {
    pub chain: FilterChain,
    pub leakage_center: f64,
    pub kind: ScanKind,
}

impl ScanModel {
    /// The drive leaks in one Zeeman splitting below the zero-detuning
    /// reference for write scans and one above for read scans.
    pub fn new(chain: FilterChain, zeeman_splitting: f64, kind: ScanKind) -> Self {
        let leakage_center = match kind {
            ScanKind::Write => -zeeman_splitting,
            ScanKind::Read | ScanKind::ReadNoWrite => zeeman_splitting,
        };
        Self { chain, leakage_center, kind }
    }

    fn components(&self, p: &ScanParams, detuning: f64) -> [f64; 4] {
        let x = 2.0 * detuning / p.pedestal_width;
        [
            p.peak_amplitude * self.chain.relative_suppression(detuning),
            p.pedestal_amplitude / (1.0 + x * x),
            p.leakage_amplitude * self.chain.relative_suppression(detuning - self.leakage_center),
            p.background,
        ]
    }
}

/// Expected counts per pulse at filter detuning `detuning`.
pub fn scan_forward(model: &ScanModel, params: &ScanParams, detuning: f64) -> f64 {
    model.components(params, detuning).iter().sum()
}

/// Poisson-noised scan drawn from the model, `pulses` per detuning.
pub fn synthesize_scan(
    model: &ScanModel,
    params: &ScanParams,
    detunings: &[f64],
    pulses: u64,
    seed: u64,
) -> Vec<ScanPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    detunings
        .iter()
        .map(|&d| {
            let mean = scan_forward(model, params, d) * pulses as f64;
            let clicks = if mean > 0.0 {
                Poisson::new(mean).map(|p| p.sample(&mut rng) as u64).unwrap_or(0)
            } else {
                0
            };
            ScanPoint::from_totals(d, clicks, pulses)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanFit {
    pub kind: ScanKind,
    pub peak_amplitude: f64,
    pub pedestal_amplitude: f64,
    pub pedestal_width: f64,
    pub leakage_amplitude: f64,
    pub background: f64,
    pub leakage_center: f64,
    pub write_efficiency: f64,
    pub write_efficiency_stderr: f64,
    /// Standard errors in parameter order: peak, pedestal, width, leakage, background.
    pub stderr: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chi_squared: f64,
    pub reduced_chi_squared: f64,
    pub iterations: usize,
}

impl ScanFit {
    pub fn params(&self) -> ScanParams {
        ScanParams {
            peak_amplitude: self.peak_amplitude,
            pedestal_amplitude: self.pedestal_amplitude,
            pedestal_width: self.pedestal_width,
            leakage_amplitude: self.leakage_amplitude,
            background: self.background,
        }
    }
}

struct ScanProblem<'a> {
    model: &'a ScanModel,
    points: &'a [ScanPoint],
}

impl LeastSquares for ScanProblem<'_> {
    fn n_params(&self) -> usize {
        5
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let params = ScanParams::from_slice(p);
        self.points
            .iter()
            .map(|q| (scan_forward(self.model, &params, q.detuning) - q.counts) / q.stderr)
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (ped, width) = (p[1], p[2]);
        let mut jac = DMatrix::zeros(self.points.len(), 5);
        for (i, q) in self.points.iter().enumerate() {
            let d = q.detuning;
            let x = 2.0 * d / width;
            let lor = 1.0 / (1.0 + x * x);
            jac[(i, 0)] = self.model.chain.relative_suppression(d);
            jac[(i, 1)] = lor;
            jac[(i, 2)] = ped * lor * lor * 2.0 * x * x / width;
            jac[(i, 3)] = self.model.chain.relative_suppression(d - self.model.leakage_center);
            jac[(i, 4)] = 1.0;
            for j in 0..5 {
                jac[(i, j)] /= q.stderr;
            }
        }
        jac
    }
}

fn nearest(points: &[ScanPoint], detuning: f64) -> &ScanPoint {
    points
        .iter()
        .min_by(|a, b| (a.detuning - detuning).abs().total_cmp(&(b.detuning - detuning).abs()))
        .expect("non-empty")
}

/// Weighted least-squares fit of the four-component scan model.
///
/// `width_hint` seeds the pedestal width; the fit needs at least six points at
/// two or more distinct detunings.
pub fn fit_scan(model: &ScanModel, points: &[ScanPoint], width_hint: f64) -> Result<ScanFit, FitError> {
    if points.len() < 6 {
        return Err(FitError::InvalidInput(format!("need at least 6 scan points, got {}", points.len())));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.stderr > 0.0 && p.stderr.is_finite() && p.counts.is_finite() && p.detuning.is_finite()))
    {
        return Err(FitError::InvalidInput(format!("bad scan point {p:?}")));
    }
    let first = points[0].detuning;
    if points.iter().all(|p| p.detuning == first) {
        return Err(FitError::Degenerate("all scan points at one detuning".into()));
    }
    if !(width_hint > 0.0) {
        return Err(FitError::InvalidInput("pedestal width hint must be positive".into()));
    }

    let background = points.iter().map(|p| p.counts).fold(f64::INFINITY, f64::min).max(0.0);
    let at_zero = nearest(points, 0.0).counts - background;
    let at_leak = nearest(points, model.leakage_center);
    let leak = if (at_leak.detuning - model.leakage_center).abs() < width_hint {
        (at_leak.counts - background).max(0.0)
    } else {
        0.0
    };
    let start = ScanParams {
        peak_amplitude: 0.6 * at_zero.max(0.0),
        pedestal_amplitude: 0.4 * at_zero.max(0.0),
        pedestal_width: width_hint,
        leakage_amplitude: leak,
        background,
    };
    let span = points.iter().map(|p| p.detuning.abs()).fold(0.0, f64::max);
    let min_fwhm = model.chain.cavities().iter().map(|c| c.fwhm).fold(f64::INFINITY, f64::min);
    let width_floor = 1e-3 * min_fwhm.min(span.max(f64::MIN_POSITIVE));
    let bounds = Bounds {
        lower: vec![0.0, 0.0, width_floor, 0.0, 0.0],
        upper: vec![f64::INFINITY; 5],
    };
    let problem = ScanProblem { model, points };
    let res = multi_start(
        &problem,
        &start.to_vec(),
        &[false, false, true, false, false],
        &bounds,
        &LmOptions::default(),
    )?;
    let p = ScanParams::from_slice(&res.params);
    let se = res.std_errors();
    let cov = &res.covariance;
    let total = p.peak_amplitude + p.pedestal_amplitude;
    let (d0, d1) = (p.pedestal_amplitude / (total * total), -p.peak_amplitude / (total * total));
    let var_eff = d0 * d0 * cov[(0, 0)] + 2.0 * d0 * d1 * cov[(0, 1)] + d1 * d1 * cov[(1, 1)];
    Ok(ScanFit {
        kind: model.kind,
        peak_amplitude: p.peak_amplitude,
        pedestal_amplitude: p.pedestal_amplitude,
        pedestal_width: p.pedestal_width,
        leakage_amplitude: p.leakage_amplitude,
        background: p.background,
        leakage_center: model.leakage_center,
        write_efficiency: p.write_efficiency(),
        write_efficiency_stderr: var_eff.max(0.0).sqrt(),
        stderr: se,
        covariance: res.covariance_rows(),
        chi_squared: res.chi_squared,
        reduced_chi_squared: res.reduced_chi_squared(),
        iterations: res.iterations,
    })
}

/// Leakage amplitude per time slice, for a linear drift calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageSlice {
    pub t_center: f64,
    pub amplitude: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeakageLine {
    /// Amplitude extrapolated to `t = 0`.
    pub intercept: f64,
    /// Change of amplitude per second.
    pub slope: f64,
    pub intercept_stderr: f64,
    pub slope_stderr: f64,
}

/// Weighted linear regression of per-slice leakage amplitudes on slice time.
pub fn leakage_from_slices(slices: &[LeakageSlice]) -> Result<LeakageLine, FitError> {
    if slices.len() < 2 {
        return Err(FitError::InvalidInput("need at least 2 slices".into()));
    }
    let w: Vec<f64> = slices.iter().map(|s| 1.0 / (s.stderr * s.stderr)).collect();
    if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(FitError::InvalidInput("slice errors must be positive".into()));
    }
    let sw: f64 = w.iter().sum();
    let mt = slices.iter().zip(&w).map(|(s, w)| w * s.t_center).sum::<f64>() / sw;
    let my = slices.iter().zip(&w).map(|(s, w)| w * s.amplitude).sum::<f64>() / sw;
    let sxx: f64 = slices.iter().zip(&w).map(|(s, w)| w * (s.t_center - mt).powi(2)).sum();
    let scale: f64 = slices.iter().zip(&w).map(|(s, w)| w * s.t_center * s.t_center).sum();
    if !(sxx > 1e-12 * scale) {
        return Err(FitError::Degenerate("all slices at one time".into()));
    }
    let sxy: f64 = slices.iter().zip(&w).map(|(s, w)| w * (s.t_center - mt) * (s.amplitude - my)).sum();
    let slope = sxy / sxx;
    Ok(LeakageLine {
        intercept: my - slope * mt,
        slope,
        intercept_stderr: (1.0 / sw + mt * mt / sxx).sqrt(),
        slope_stderr: (1.0 / sxx).sqrt(),
    })
}
