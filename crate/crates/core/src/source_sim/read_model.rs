//! Tabulated cumulative rates of the read-window processes, used for
//! inversion sampling and for exact expected histograms.

use rand::Rng;

use crate::config::ExperimentConfig;
use crate::fits::quadrature::integrate;
use crate::fits::{fwm_rate, ShapeModelParams, ShapeTerms};
use crate::filter_chain::FilterChain;

const CELLS: usize = 4000;

/// Cumulative integral of a non-negative rate on a uniform grid.
#[derive(Debug, Clone)]
pub(crate) struct CumulativeTable {
    step: f64,
    cum: Vec<f64>,
}

impl CumulativeTable {
    fn build<F: Fn(f64) -> f64>(f: F, end: f64, knots: &[f64]) -> Self {
        let step = end / CELLS as f64;
        let mut cum = Vec::with_capacity(CELLS + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for k in 0..CELLS {
            let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
            acc += integrate(&f, a, b, knots.iter().copied(), 1e-16).max(0.0);
            cum.push(acc);
        }
        Self { step, cum }
    }

    pub(crate) fn total(&self) -> f64 {
        self.cum[CELLS]
    }

    /// Integral from 0 to `t`, linear inside a cell.
    pub(crate) fn at(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let x = t / self.step;
        let k = x.floor() as usize;
        if k >= CELLS {
            return self.total();
        }
        let frac = x - k as f64;
        self.cum[k] + frac * (self.cum[k + 1] - self.cum[k])
    }

    /// Time at which the cumulative integral reaches `y` (`0 <= y <= total`).
    pub(crate) fn invert(&self, y: f64) -> f64 {
        let k = self.cum.partition_point(|&c| c <= y).clamp(1, CELLS) - 1;
        let (c0, c1) = (self.cum[k], self.cum[k + 1]);
        let frac = if c1 > c0 { ((y - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
        (k as f64 + frac) * self.step
    }

    /// Draws a time with density proportional to the tabulated rate.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.invert(rng.random::<f64>() * self.total())
    }
}

/// Read-window rates of one configuration, in detected photons.
#[derive(Debug, Clone)]
pub struct ReadModel {
    pub(crate) duration: f64,
    /// Detection probability of a retrieved or FWM photon.
    pub(crate) efficiency: f64,
    /// Scale of the two leakage tables: `eta * filter ratio`.
    pub(crate) leak_scale: f64,
    pub(crate) l0: f64,
    pub(crate) l1: f64,
    pub(crate) dark_rate: f64,
    /// Retrieval hazard per stored excitation.
    pub(crate) hazard: CumulativeTable,
    /// Detected FWM photons.
    pub(crate) fwm: CumulativeTable,
    /// `Omega^2(t)`.
    pub(crate) drive: CumulativeTable,
    /// `t Omega^2(t)`.
    pub(crate) drive_t: CumulativeTable,
    pub(crate) filter: FilterChain,
}

impl ReadModel {
    pub fn new(config: &ExperimentConfig) -> Self {
        let p = ShapeModelParams::from_config(config, 0.0);
        let end = config.read_duration;
        let knots: Vec<f64> = p.alpha.knots().chain(p.omega_sq.knots()).collect();
        let s = p.chi_sq();
        let hazard = CumulativeTable::build(|t| p.hazard(t), end, &knots);
        let fwm = CumulativeTable::build(
            |t| p.efficiency * fwm_rate(s, p.alpha.eval(t), p.omega_sq.eval(t), (-t / p.t1).exp(), t),
            end,
            &knots,
        );
        let drive = CumulativeTable::build(|t| p.omega_sq.eval(t), end, &knots);
        let drive_t = CumulativeTable::build(|t| t * p.omega_sq.eval(t), end, &knots);
        Self {
            duration: end,
            efficiency: p.efficiency,
            leak_scale: config.detection_chain() * crate::fits::leakage_filter_ratio(&config.filter(), config),
            l0: config.leakage_coeffs.l0,
            l1: config.leakage_coeffs.l1,
            dark_rate: config.dark_rate,
            hazard,
            fwm,
            drive,
            drive_t,
            filter: config.filter(),
        }
    }

    /// Probability that one stored excitation is converted during the pulse.
    pub fn conversion_probability(&self) -> f64 {
        -(-self.hazard.total()).exp_m1()
    }

    /// Mean detected leakage photons over the whole pulse.
    pub(crate) fn leakage_means(&self, delay: f64) -> (f64, f64) {
        (
            self.leak_scale * (self.l0 + self.l1 * delay) * self.drive.total(),
            self.leak_scale * self.l1 * self.drive_t.total(),
        )
    }

    pub(crate) fn sample_fwm<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.fwm.sample(rng)
    }

    pub(crate) fn sample_leak_flat<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.drive.sample(rng)
    }

    pub(crate) fn sample_leak_ramp<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.drive_t.sample(rng)
    }

    /// Expected detected photons per trial in each bin, before filter delays
    /// and dead time, with `n_ce` stored excitations on average at the start
    /// of the read pulse and write-read delay `delay`.
    ///
    /// Bins must lie within the read pulse.
    pub fn expected_counts(&self, edges: &[f64], n_ce: f64, delay: f64) -> Vec<ShapeTerms> {
        edges
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0].clamp(0.0, self.duration), w[1].clamp(0.0, self.duration));
                let (ha, hb) = (self.hazard.at(a), self.hazard.at(b));
                ShapeTerms {
                    retrieval: self.efficiency * n_ce * ((-ha).exp() - (-hb).exp()),
                    fwm: self.fwm.at(b) - self.fwm.at(a),
                    leakage: self.leak_scale
                        * ((self.l0 + self.l1 * delay) * (self.drive.at(b) - self.drive.at(a))
                            + self.l1 * (self.drive_t.at(b) - self.drive_t.at(a))),
                    background: self.dark_rate * (w[1] - w[0]),
                }
            })
            .collect()
    }
}
