//! Temporal shape of the detected read-out photons.
//!
//! The detected rate during the read pulse is the sum of four terms:
//!
//! 1. readout of the stored excitations,
//!    `chi^2 Omega^2 n(t) exp(x) n_ce` with `x = t (xi^2 - chi^2) Omega^2 n(t)`,
//! 2. four-wave mixing, `chi^2 xi^2 Omega^2 n(t) (exp(x) - 1) / (xi^2 - chi^2)`,
//! 3. drive leakage, `(L0 + L1 t) Omega^2`,
//! 4. a constant background.
//!
//! `n(t) = exp(-t / T1)` is the remaining population of the initial state and
//! `xi = alpha(t) chi`. Terms 1 and 2 are scaled by `efficiency`, which maps
//! cell-cavity photons to detector clicks (1 when it is absorbed into `chi`).

use serde::{Deserialize, Serialize};

use super::quadrature::integrate;
use super::FitError;
use crate::config::{ExperimentConfig, TimeSeries};
use crate::filter_chain::{ringdown_time, FilterChain};
use crate::stats::Histogram;

/// Below this `|x|`, `(e^x - 1) / x` switches to its series.
pub const DEGENERACY_THRESHOLD: f64 = 1e-6;

const QUAD_TOL: f64 = 1e-13;

/// How term 1 depletes the stored excitation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalKinetics {
    /// Term 1 exactly as written: linear in time density.
    #[default]
    Linear,
    /// Term 1 is the hazard of a single conversion; the emitted density is
    /// `hazard * exp(-integral of hazard)`. Matches the simulator, which
    /// converts each excitation into at most one photon.
    SingleConversion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModelParams {
    pub chi_r: f64,
    /// `alpha(t) = xi_r / chi_r`.
    pub alpha: TimeSeries,
    /// Normalized drive intensity.
    pub omega_sq: TimeSeries,
    pub t1: f64,
    pub n_ce: f64,
    /// Leakage rate coefficients in detected units.
    pub l0: f64,
    pub l1: f64,
    /// Constant background rate, counts/s.
    pub background: f64,
    pub efficiency: f64,
    #[serde(default)]
    pub kinetics: RetrievalKinetics,
}

/// The four rate terms at one instant (or their integrals over a bin).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ShapeTerms {
    pub retrieval: f64,
    pub fwm: f64,
    pub leakage: f64,
    pub background: f64,
}

impl ShapeTerms {
    pub fn total(&self) -> f64 {
        self.retrieval + self.fwm + self.leakage + self.background
    }
}

/// `(e^x - 1) / x`, continuous through zero.
pub fn expm1_over_x(x: f64) -> f64 {
    if x.abs() < DEGENERACY_THRESHOLD {
        1.0 + x * (0.5 + x / 6.0)
    } else {
        x.exp_m1() / x
    }
}

/// Readout exponent `t (alpha^2 - 1) chi^2 Omega^2 n`.
#[inline]
pub fn readout_exponent(chi_sq: f64, alpha: f64, omega_sq: f64, n: f64, t: f64) -> f64 {
    t * (alpha * alpha - 1.0) * chi_sq * omega_sq * n
}

/// Term 1 per stored excitation, photons/s in the cell-cavity mode.
#[inline]
pub fn retrieval_density(chi_sq: f64, alpha: f64, omega_sq: f64, n: f64, t: f64) -> f64 {
    chi_sq * omega_sq * n * readout_exponent(chi_sq, alpha, omega_sq, n, t).exp()
}

/// Term 2, written as `alpha^2 chi^4 Omega^4 n^2 t (e^x - 1) / x`, which has
/// no singularity at `alpha = 1`.
#[inline]
pub fn fwm_rate(chi_sq: f64, alpha: f64, omega_sq: f64, n: f64, t: f64) -> f64 {
    let x = readout_exponent(chi_sq, alpha, omega_sq, n, t);
    alpha * alpha * chi_sq * chi_sq * omega_sq * omega_sq * n * n * t * expm1_over_x(x)
}

impl ShapeModelParams {
    /// Model parameters in detected units for the experiment `config`, with
    /// `n_ce` excitations present at the start of the read pulse.
    pub fn from_config(config: &ExperimentConfig, n_ce: f64) -> Self {
        let chain = config.filter();
        let eta = config.detection_chain();
        let leak_scale = eta * leakage_filter_ratio(&chain, config);
        let lk = config.leakage_coeffs;
        Self {
            chi_r: config.fwm_couplings.chi_r,
            alpha: config.fwm_couplings.alpha_table.clone(),
            omega_sq: config.drive_profile.clone(),
            t1: config.population_decay,
            n_ce,
            l0: leak_scale * (lk.l0 + lk.l1 * config.write_read_delay),
            l1: leak_scale * lk.l1,
            background: config.dark_rate,
            efficiency: eta * chain.relative_suppression(config.filter_detuning),
            kinetics: RetrievalKinetics::SingleConversion,
        }
    }

    pub fn chi_sq(&self) -> f64 {
        self.chi_r * self.chi_r
    }

    fn population(&self, t: f64) -> f64 {
        (-t / self.t1).exp()
    }

    /// End of the interval covered by both time series (they start at or before 0).
    pub fn coverage_end(&self) -> f64 {
        let end = |ts: &TimeSeries| match ts.span() {
            Some((a, b)) if a <= 0.0 => b,
            _ => f64::NEG_INFINITY,
        };
        end(&self.alpha).min(end(&self.omega_sq))
    }

    fn check_coverage(&self, t: f64) -> Result<(), FitError> {
        if t < 0.0 || t > self.coverage_end() || t.is_nan() {
            Err(FitError::OutsideCoverage { t })
        } else {
            Ok(())
        }
    }

    pub(crate) fn knots(&self) -> Vec<f64> {
        self.alpha.knots().chain(self.omega_sq.knots()).collect()
    }

    /// Term-1 hazard per excitation, before `efficiency`.
    pub fn hazard(&self, t: f64) -> f64 {
        retrieval_density(
            self.chi_sq(),
            self.alpha.eval(t),
            self.omega_sq.eval(t),
            self.population(t),
            t,
        )
    }

    /// `d hazard / d (chi^2)`.
    pub(crate) fn hazard_dchi_sq(&self, t: f64) -> f64 {
        let (a, w, n) = (self.alpha.eval(t), self.omega_sq.eval(t), self.population(t));
        let x = readout_exponent(self.chi_sq(), a, w, n, t);
        w * n * x.exp() * (1.0 + x)
    }

    pub fn hazard_integral(&self, a: f64, b: f64) -> f64 {
        integrate(|t| self.hazard(t), a, b, self.knots(), QUAD_TOL)
    }

    fn terms_unchecked(&self, t: f64, cumulative_hazard: f64) -> ShapeTerms {
        let s = self.chi_sq();
        let (a, w, n) = (self.alpha.eval(t), self.omega_sq.eval(t), self.population(t));
        let mut retrieval = self.efficiency * self.n_ce * retrieval_density(s, a, w, n, t);
        if self.kinetics == RetrievalKinetics::SingleConversion {
            retrieval *= (-cumulative_hazard).exp();
        }
        ShapeTerms {
            retrieval,
            fwm: self.efficiency * fwm_rate(s, a, w, n, t),
            leakage: (self.l0 + self.l1 * t) * w,
            background: self.background,
        }
    }

    /// All four terms at time `t` after the start of the read window.
    pub fn terms(&self, t: f64) -> Result<ShapeTerms, FitError> {
        self.check_coverage(t)?;
        let h = match self.kinetics {
            RetrievalKinetics::Linear => 0.0,
            RetrievalKinetics::SingleConversion => self.hazard_integral(0.0, t),
        };
        Ok(self.terms_unchecked(t, h))
    }

    /// Bin-integrated terms (photons per trial) over consecutive bins given by
    /// `edges`, which must start at or after 0.
    pub fn bin_counts(&self, edges: &[f64]) -> Result<Vec<ShapeTerms>, FitError> {
        if let (Some(&first), Some(&last)) = (edges.first(), edges.last()) {
            self.check_coverage(first)?;
            self.check_coverage(last)?;
        }
        let knots = self.knots();
        let quad = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
            integrate(f, a, b, knots.iter().copied(), QUAD_TOL)
        };
        let mut h_lo = match (self.kinetics, edges.first()) {
            (RetrievalKinetics::SingleConversion, Some(&e0)) => self.hazard_integral(0.0, e0),
            _ => 0.0,
        };
        let mut out = Vec::with_capacity(edges.len().saturating_sub(1));
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let h_bin = quad(&|t| self.hazard(t), a, b);
            let retrieval = match self.kinetics {
                RetrievalKinetics::Linear => self.efficiency * self.n_ce * h_bin,
                RetrievalKinetics::SingleConversion => {
                    let v = self.efficiency * self.n_ce * (-h_lo).exp() * (-(h_bin)).exp_m1().abs();
                    h_lo += h_bin;
                    v
                }
            };
            let s = self.chi_sq();
            out.push(ShapeTerms {
                retrieval,
                fwm: self.efficiency
                    * quad(
                        &|t| {
                            fwm_rate(s, self.alpha.eval(t), self.omega_sq.eval(t), self.population(t), t)
                        },
                        a,
                        b,
                    ),
                leakage: quad(&|t| (self.l0 + self.l1 * t) * self.omega_sq.eval(t), a, b),
                background: self.background * (b - a),
            });
        }
        Ok(out)
    }

    /// Term-1 bin integrals and their derivatives with respect to `chi^2`.
    pub(crate) fn retrieval_bins_with_grad(&self, edges: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let knots = self.knots();
        let quad = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
            integrate(f, a, b, knots.iter().copied(), QUAD_TOL)
        };
        let scale = self.efficiency * self.n_ce;
        let e0 = edges.first().copied().unwrap_or(0.0);
        let (mut h, mut dh) = match self.kinetics {
            RetrievalKinetics::Linear => (0.0, 0.0),
            RetrievalKinetics::SingleConversion => (
                quad(&|t| self.hazard(t), 0.0, e0),
                quad(&|t| self.hazard_dchi_sq(t), 0.0, e0),
            ),
        };
        let mut vals = Vec::with_capacity(edges.len());
        let mut grads = Vec::with_capacity(edges.len());
        for w in edges.windows(2) {
            let hb = quad(&|t| self.hazard(t), w[0], w[1]);
            let dhb = quad(&|t| self.hazard_dchi_sq(t), w[0], w[1]);
            match self.kinetics {
                RetrievalKinetics::Linear => {
                    vals.push(scale * hb);
                    grads.push(scale * dhb);
                }
                RetrievalKinetics::SingleConversion => {
                    let (s_lo, s_hi) = ((-h).exp(), (-(h + hb)).exp());
                    vals.push(scale * (s_lo - s_hi));
                    grads.push(scale * (-s_lo * dh + s_hi * (dh + dhb)));
                    h += hb;
                    dh += dhb;
                }
            }
        }
        (vals, grads)
    }
}

/// Leakage transmission at the configured filter detuning relative to the
/// zero-detuning reference; the drive sits one Zeeman splitting above.
pub(crate) fn leakage_filter_ratio(chain: &FilterChain, config: &ExperimentConfig) -> f64 {
    let at = chain.relative_suppression(config.filter_detuning - config.zeeman_splitting);
    let reference = chain.relative_suppression(-config.zeeman_splitting);
    at / reference
}

/// Detected rate at time `t` of the read window, counts/s.
pub fn shape_forward(params: &ShapeModelParams, t: f64) -> Result<f64, FitError> {
    params.terms(t).map(|x| x.total())
}

/// Mean detected photons in `[0, tau_r]`.
pub fn shape_integrate(params: &ShapeModelParams, tau_r: f64) -> Result<f64, FitError> {
    shape_integrate_range(params, 0.0, tau_r)
}

/// Mean detected photons in `[a, b]`.
pub fn shape_integrate_range(params: &ShapeModelParams, a: f64, b: f64) -> Result<f64, FitError> {
    params.check_coverage(a)?;
    params.check_coverage(b)?;
    let knots = params.knots();
    let rest = integrate(
        |t| {
            let mut terms = params.terms_unchecked(t, 0.0);
            terms.retrieval = 0.0;
            terms.total()
        },
        a,
        b,
        knots.iter().copied(),
        QUAD_TOL,
    );
    let retrieval = match params.kinetics {
        RetrievalKinetics::Linear => integrate(
            |t| params.terms_unchecked(t, 0.0).retrieval,
            a,
            b,
            knots.iter().copied(),
            QUAD_TOL,
        ),
        RetrievalKinetics::SingleConversion => {
            let h_a = params.hazard_integral(0.0, a);
            let h_ab = params.hazard_integral(a, b);
            params.efficiency * params.n_ce * (-h_a).exp() * (-(h_ab)).exp_m1().abs()
        }
    };
    Ok(rest + retrieval)
}

/// One row of the stacked read-photon decomposition, rates in counts/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionRow {
    pub t_start: f64,
    pub t_end: f64,
    pub data: f64,
    pub retrieval: f64,
    pub fwm: f64,
    pub leakage: f64,
    pub background: f64,
    /// Leakage plus background.
    pub noise_offset: f64,
    pub model: f64,
    /// `data - model`.
    pub residual: f64,
}

/// Per-bin stacked components for `hist` (rates normalized per trial).
///
/// The atomic and leakage terms are passed through the filter chain's
/// intensity response (one first-order low-pass per cavity) to mimic cavity
/// build-up and ringdown; the background is not filtered.
pub fn decompose_shape(
    params: &ShapeModelParams,
    hist: &Histogram,
    filter: Option<&FilterChain>,
) -> Result<Vec<DecompositionRow>, FitError> {
    let edges = hist.edges();
    let (Some(&start), Some(&end)) = (edges.first(), edges.last()) else {
        return Ok(Vec::new());
    };
    params.check_coverage(end)?;
    params.check_coverage(start.max(0.0))?;

    let taus: Vec<f64> = filter
        .map(|c| c.cavities().iter().map(ringdown_time).collect())
        .unwrap_or_default();
    let min_bin = edges.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let min_tau = taus.iter().copied().fold(f64::INFINITY, f64::min);
    let step = (min_bin / 50.0).min(min_tau / 4.0).min(end / 2000.0);
    let n_steps = (end / step).ceil() as usize;
    let step = end / n_steps as f64;

    // Term rates on a fine grid from t = 0, filtered by exact first-order updates.
    let mut grid = vec![[0.0f64; 3]; n_steps];
    let mut cum_h = 0.0;
    for (k, slot) in grid.iter_mut().enumerate() {
        let t = (k as f64 + 0.5) * step;
        let h_mid = cum_h + 0.5 * step * params.hazard(t);
        let terms = params.terms_unchecked(t, h_mid);
        cum_h += step * params.hazard(t);
        *slot = [terms.retrieval, terms.fwm, terms.leakage];
    }
    for &tau in &taus {
        let decay = (-step / tau).exp();
        let mut state = [0.0f64; 3];
        for slot in grid.iter_mut() {
            for j in 0..3 {
                state[j] = state[j] * decay + slot[j] * (1.0 - decay);
                slot[j] = state[j];
            }
        }
    }

    let rates = hist.rates();
    let mut rows = Vec::with_capacity(rates.len());
    for (i, w) in edges.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let k0 = ((a / step).floor().max(0.0) as usize).min(n_steps);
        let k1 = ((b / step).ceil() as usize).min(n_steps);
        let mut acc = [0.0f64; 3];
        let mut weight = 0.0;
        for (k, slot) in grid.iter().enumerate().take(k1).skip(k0) {
            let lo = (k as f64 * step).max(a);
            let hi = ((k + 1) as f64 * step).min(b);
            if hi <= lo {
                continue;
            }
            for j in 0..3 {
                acc[j] += slot[j] * (hi - lo);
            }
            weight += hi - lo;
        }
        let mean = |j: usize| if weight > 0.0 { acc[j] / weight } else { 0.0 };
        let (retrieval, fwm, leakage) = (mean(0), mean(1), mean(2));
        let background = params.background;
        let model = retrieval + fwm + leakage + background;
        rows.push(DecompositionRow {
            t_start: a,
            t_end: b,
            data: rates[i],
            retrieval,
            fwm,
            leakage,
            background,
            noise_offset: leakage + background,
            model,
            residual: rates[i] - model,
        });
    }
    Ok(rows)
}
