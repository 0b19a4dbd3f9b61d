//! Retrieval coupling from the with-write minus without-write read signal.

use nalgebra::DMatrix;
use serde::Serialize;

use super::quadrature::integrate;
use super::shape::{RetrievalKinetics, ShapeModelParams};
use super::solver::{multi_start, Bounds, LeastSquares, LmOptions};
use super::FitError;
use crate::filter_chain::{ringdown_time, FilterChain};
use crate::stats::Histogram;

/// Read-window histograms recorded with and without the write pulse, plus
/// the mean number of stored excitations that applies to `with_write`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceDataset {
    pub with_write: Histogram,
    pub without_write: Histogram,
    pub n_ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiFitOptions {
    /// Span dropped at each end of the histogram range.
    pub exclude_edges: f64,
    /// When set, the model is smeared by the photon delay of these cavities
    /// before binning.
    pub delay_filter: Option<FilterChain>,
    pub lm: LmOptions,
}

impl Default for ChiFitOptions {
    fn default() -> Self {
        Self { exclude_edges: 25e-6, delay_filter: None, lm: LmOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiFit {
    pub chi_r: f64,
    pub chi_r_stderr: f64,
    /// The fitted quantity, `chi_r^2`.
    pub chi_sq: f64,
    pub chi_sq_stderr: f64,
    pub chi_squared: f64,
    pub reduced_chi_squared: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub bins_used: usize,
}

struct Prepared {
    params: ShapeModelParams,
    /// Bin edges of the retained range.
    edges: Vec<f64>,
    data: Vec<f64>,
    sigma: Vec<f64>,
    /// Raw counts and trial totals, kept for reweighting.
    with_counts: Vec<f64>,
    without_counts: Vec<f64>,
    n_with: f64,
    n_without: f64,
}

impl Prepared {
    /// Variances from the expected counts under the model: the background is
    /// the pooled estimate from both histograms given the model signal
    /// (counts per trial). Weighting by observed counts would favour downward
    /// fluctuations and bias the signal low.
    fn reweight(&mut self, model: &[f64]) {
        let (nw, nn) = (self.n_with, self.n_without);
        for (i, m) in model.iter().enumerate() {
            let m = m.max(0.0);
            let b = ((self.with_counts[i] + self.without_counts[i] - m * nw) / (nw + nn)).max(0.0);
            self.sigma[i] = (((b + m) * nw).max(1.0) / (nw * nw) + (b * nn).max(1.0) / (nn * nn)).sqrt();
        }
    }
}

/// Reweighting passes after the first fit.
const REWEIGHT_PASSES: usize = 4;

struct ChiProblem<'a> {
    sets: Vec<Prepared>,
    filter: Option<&'a FilterChain>,
}

/// Term-1 bin integrals and their `chi^2` derivatives, smeared by the
/// filter delay on a fine grid.
fn filtered_bins(p: &ShapeModelParams, edges: &[f64], chain: &FilterChain) -> (Vec<f64>, Vec<f64>) {
    let taus: Vec<f64> = chain.cavities().iter().map(ringdown_time).collect();
    let end = *edges.last().expect("non-empty edges");
    let min_bin = edges.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let min_tau = taus.iter().copied().fold(f64::INFINITY, f64::min);
    let n_steps = (end / (min_bin / 20.0).min(min_tau / 4.0)).ceil() as usize;
    let h = end / n_steps as f64;
    let knots = p.knots();
    let scale = p.efficiency * p.n_ce;

    // Exact per-step integrals of the emitted density and its derivative.
    let mut val = Vec::with_capacity(n_steps);
    let mut grad = Vec::with_capacity(n_steps);
    let (mut big_h, mut dh) = (0.0f64, 0.0f64);
    for k in 0..n_steps {
        let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
        let hb = integrate(|t| p.hazard(t), a, b, knots.iter().copied(), 1e-14);
        let dhb = integrate(|t| p.hazard_dchi_sq(t), a, b, knots.iter().copied(), 1e-14);
        match p.kinetics {
            RetrievalKinetics::Linear => {
                val.push(scale * hb);
                grad.push(scale * dhb);
            }
            RetrievalKinetics::SingleConversion => {
                let (lo, hi) = ((-big_h).exp(), (-(big_h + hb)).exp());
                val.push(scale * (lo - hi));
                grad.push(scale * (-lo * dh + hi * (dh + dhb)));
            }
        }
        big_h += hb;
        dh += dhb;
    }
    // Each cavity redistributes the per-step mass with an exponential kernel.
    for &tau in &taus {
        let decay = (-h / tau).exp();
        for series in [&mut val, &mut grad] {
            let mut carry = 0.0;
            for v in series.iter_mut() {
                let input = *v;
                // mass emitted uniformly within the step: fraction leaving inside it
                let inside = 1.0 - tau / h * (1.0 - decay);
                let out = carry * (1.0 - decay) + input * inside;
                carry = carry * decay + input * (1.0 - inside);
                *v = out;
            }
        }
    }
    let bin = |series: &[f64]| -> Vec<f64> {
        edges
            .windows(2)
            .map(|w| {
                let k0 = ((w[0] / h).floor().max(0.0) as usize).min(series.len());
                let k1 = ((w[1] / h).ceil() as usize).min(series.len());
                (k0..k1)
                    .map(|k| {
                        let lo = (k as f64 * h).max(w[0]);
                        let hi = ((k + 1) as f64 * h).min(w[1]);
                        series[k] * ((hi - lo).max(0.0) / h)
                    })
                    .sum()
            })
            .collect()
    };
    (bin(&val), bin(&grad))
}

impl ChiProblem<'_> {
    fn model(&self, set: &Prepared, s: f64) -> (Vec<f64>, Vec<f64>) {
        let mut p = set.params.clone();
        p.chi_r = s.max(0.0).sqrt();
        match self.filter {
            Some(chain) => filtered_bins(&p, &set.edges, chain),
            None => p.retrieval_bins_with_grad(&set.edges),
        }
    }
}

impl LeastSquares for ChiProblem<'_> {
    fn n_params(&self) -> usize {
        1
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for set in &self.sets {
            let (m, _) = self.model(set, p[0]);
            out.extend(m.iter().zip(&set.data).zip(&set.sigma).map(|((m, d), s)| (m - d) / s));
        }
        out
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let mut col = Vec::new();
        for set in &self.sets {
            let (_, g) = self.model(set, p[0]);
            col.extend(g.iter().zip(&set.sigma).map(|(g, s)| g / s));
        }
        DMatrix::from_column_slice(col.len(), 1, &col)
    }
}

fn prepare(set: &DifferenceDataset, fixed: &ShapeModelParams, exclude: f64) -> Result<Prepared, FitError> {
    let (hw, hn) = (&set.with_write, &set.without_write);
    if hw.edges() != hn.edges() {
        return Err(FitError::InvalidInput("with/without-write histograms use different bins".into()));
    }
    if hw.n_trials() == 0 || hn.n_trials() == 0 {
        return Err(FitError::InvalidInput("histogram without trials".into()));
    }
    if !(set.n_ce >= 0.0 && set.n_ce.is_finite()) {
        return Err(FitError::InvalidInput(format!("bad n_ce {}", set.n_ce)));
    }
    let edges = hw.edges();
    let (lo, hi) = (edges[0] + exclude, edges[edges.len() - 1] - exclude);
    let keep: Vec<usize> = (0..edges.len() - 1)
        .filter(|&i| edges[i] >= lo - 1e-12 * hi.abs() && edges[i + 1] <= hi + 1e-12 * hi.abs())
        .collect();
    if keep.is_empty() {
        return Err(FitError::InvalidInput("no bins left after edge exclusion".into()));
    }
    if keep.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(FitError::InvalidInput("retained bins are not contiguous".into()));
    }
    let (nw, nn) = (hw.n_trials() as f64, hn.n_trials() as f64);
    let mut data = Vec::with_capacity(keep.len());
    let mut sigma = Vec::with_capacity(keep.len());
    let (mut with_counts, mut without_counts) = (Vec::with_capacity(keep.len()), Vec::with_capacity(keep.len()));
    for &i in &keep {
        let (cw, cn) = (hw.counts()[i] as f64, hn.counts()[i] as f64);
        data.push(cw / nw - cn / nn);
        sigma.push((cw.max(1.0) / (nw * nw) + cn.max(1.0) / (nn * nn)).sqrt());
        with_counts.push(cw);
        without_counts.push(cn);
    }
    let mut params = fixed.clone();
    params.n_ce = set.n_ce;
    let sub_edges = edges[keep[0]..=keep[keep.len() - 1] + 1].to_vec();
    if sub_edges[0] < 0.0 || sub_edges[sub_edges.len() - 1] > params.coverage_end() {
        return Err(FitError::OutsideCoverage { t: sub_edges[sub_edges.len() - 1] });
    }
    Ok(Prepared { params, edges: sub_edges, data, sigma, with_counts, without_counts, n_with: nw, n_without: nn })
}

/// Fits `chi_r` (through `chi_r^2 >= 0`) to one or more difference datasets
/// that share every parameter except `n_ce`. `fixed.chi_r` is ignored.
pub fn fit_chi_r(
    datasets: &[DifferenceDataset],
    fixed: &ShapeModelParams,
    opts: &ChiFitOptions,
) -> Result<ChiFit, FitError> {
    if datasets.is_empty() {
        return Err(FitError::InvalidInput("no datasets".into()));
    }
    let sets = datasets
        .iter()
        .map(|d| prepare(d, fixed, opts.exclude_edges))
        .collect::<Result<Vec<_>, _>>()?;

    // Small-hazard estimate: difference total ~ n_ce eff chi^2 int Omega^2 n dt.
    let (mut num, mut den) = (0.0, 0.0);
    for set in &sets {
        let p = &set.params;
        let (a, b) = (set.edges[0], set.edges[set.edges.len() - 1]);
        num += set.data.iter().sum::<f64>();
        den += p.efficiency
            * p.n_ce
            * integrate(|t| p.omega_sq.eval(t) * (-t / p.t1).exp(), a, b, p.knots(), 1e-14 * (b - a));
    }
    let span = sets.iter().map(|s| s.edges[s.edges.len() - 1] - s.edges[0]).fold(0.0, f64::max);
    let s0 = if num > 0.0 && den > 0.0 { num / den } else { 1e-2 / span };

    let mut problem = ChiProblem { sets, filter: opts.delay_filter.as_ref() };
    let mut res = multi_start(&problem, &[s0], &[true], &Bounds::non_negative(1), &opts.lm)?;
    for _ in 0..REWEIGHT_PASSES {
        let models: Vec<Vec<f64>> = problem.sets.iter().map(|set| problem.model(set, res.params[0]).0).collect();
        for (set, m) in problem.sets.iter_mut().zip(&models) {
            set.reweight(m);
        }
        let previous = res.params[0];
        res = multi_start(&problem, &[previous], &[true], &Bounds::non_negative(1), &opts.lm)?;
        if (res.params[0] - previous).abs() <= 1e-9 * previous.abs() {
            break;
        }
    }
    let curvature = res.covariance[(0, 0)];
    if !(curvature.is_finite() && curvature > 0.0) {
        return Err(FitError::Curvature);
    }
    let s = res.params[0];
    let s_err = curvature.sqrt();
    let chi = s.sqrt();
    Ok(ChiFit {
        chi_r: chi,
        chi_r_stderr: if chi > 0.0 { s_err / (2.0 * chi) } else { s_err.sqrt() },
        chi_sq: s,
        chi_sq_stderr: s_err,
        chi_squared: res.chi_squared,
        reduced_chi_squared: res.reduced_chi_squared(),
        iterations: res.iterations,
        gradient_norm: res.gradient_norm,
        bins_used: res.n_residuals,
    })
}
