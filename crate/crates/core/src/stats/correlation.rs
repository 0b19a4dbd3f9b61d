use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use super::bootstrap::sample_std;
use super::{StatsError, WindowCounts};

/// Distinct `(n_w, n_r)` pairs with their multiplicities. All correlation
/// statistics are functions of this table, which keeps resampling cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    cells: Vec<(WindowCounts, u64)>,
    n: u64,
}

impl CountTable {
    pub fn new(counts: &[WindowCounts]) -> Self {
        let mut map = BTreeMap::new();
        for c in counts {
            *map.entry(*c).or_insert(0u64) += 1;
        }
        Self { cells: map.into_iter().collect(), n: counts.len() as u64 }
    }

    pub fn n_trials(&self) -> u64 {
        self.n
    }

    fn moments(&self, weights: impl Iterator<Item = u64>) -> Moments {
        let mut m = Moments::default();
        for ((c, _), k) in self.cells.iter().zip(weights) {
            let (w, r, k) = (c.n_w as f64, c.n_r as f64, k as f64);
            m.n += k;
            m.sw += k * w;
            m.sww += k * w * (w - 1.0).max(0.0);
            m.sr += k * r;
            m.srr += k * r * (r - 1.0).max(0.0);
            m.swr += k * w * r;
            if c.n_w > 0 {
                m.nh += k;
                m.shr += k * r;
                m.shrr += k * r * (r - 1.0).max(0.0);
            }
        }
        m
    }

    /// One multinomial resample of the cell multiplicities, drawn as a
    /// chain of conditional binomials.
    fn resample(&self, rng: &mut ChaCha8Rng) -> Vec<u64> {
        let mut remaining_trials = self.n;
        let mut remaining_mass = self.n;
        self.cells
            .iter()
            .map(|&(_, c)| {
                if remaining_trials == 0 || c == 0 {
                    remaining_mass -= c;
                    return 0;
                }
                let k = if c == remaining_mass {
                    remaining_trials
                } else {
                    let p = c as f64 / remaining_mass as f64;
                    Binomial::new(remaining_trials, p).map(|b| b.sample(rng)).unwrap_or(0)
                };
                remaining_trials -= k;
                remaining_mass -= c;
                k
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sw: f64,
    sww: f64,
    sr: f64,
    srr: f64,
    swr: f64,
    nh: f64,
    shr: f64,
    shrr: f64,
}

const N_STATS: usize = 7;

impl Moments {
    /// g2_ww, g2_rr, g2_wr, g2_rr|w, R, eta_R, eta_R^i.
    fn statistics(&self, eta_det: f64) -> [Option<f64>; N_STATS] {
        let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
        let g2_ww = ratio(self.sww * self.n, self.sw * self.sw);
        let g2_rr = ratio(self.srr * self.n, self.sr * self.sr);
        let g2_wr = ratio(self.swr * self.n, self.sw * self.sr);
        let g2_rr_w = ratio(self.shrr * self.nh, self.shr * self.shr);
        let r = match (g2_ww, g2_rr, g2_wr) {
            (Some(a), Some(b), Some(c)) => ratio(c * c, a * b),
            _ => None,
        };
        let eta_r = (self.nh > 0.0 && self.n > 0.0).then(|| self.shr / self.nh - self.sr / self.n);
        let eta_i = eta_r.map(|e| e / eta_det);
        [g2_ww, g2_rr, g2_wr, g2_rr_w, r, eta_r, eta_i]
    }
}

/// A statistic with its bootstrap error; `None` where undefined.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Estimate {
    pub value: Option<f64>,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub n_trials: u64,
    pub n_heralds: u64,
    pub mean_w: f64,
    pub mean_r: f64,
    pub mean_r_given_w: Option<f64>,
    pub g2_ww: Estimate,
    pub g2_rr: Estimate,
    pub g2_wr: Estimate,
    pub g2_rr_given_w: Estimate,
    pub r: Estimate,
    pub eta_r: Estimate,
    pub eta_r_intrinsic: Estimate,
}

const STAT_NAMES: [&str; N_STATS] = ["g2_ww", "g2_rr", "g2_wr", "g2_rr_given_w", "r", "eta_r", "eta_r_intrinsic"];

impl CorrelationResult {
    fn estimates(&self) -> [&Estimate; N_STATS] {
        [
            &self.g2_ww,
            &self.g2_rr,
            &self.g2_wr,
            &self.g2_rr_given_w,
            &self.r,
            &self.eta_r,
            &self.eta_r_intrinsic,
        ]
    }

    /// Names of the statistics that are undefined on this data.
    pub fn undefined(&self) -> Vec<&'static str> {
        STAT_NAMES
            .iter()
            .zip(self.estimates())
            .filter(|(_, e)| e.value.is_none())
            .map(|(n, _)| *n)
            .collect()
    }
}

/// All correlation statistics of `counts` (heralded means `n_w >= 1`).
///
/// With `bootstrap = Some((n, seed))`, errors come from `n` trial-level
/// resamples. A statistic undefined on a resample is left out of that
/// statistic's spread, which is the same as redrawing the resample for it.
pub fn correlate(
    counts: &[WindowCounts],
    detection_efficiency: f64,
    bootstrap: Option<(usize, u64)>,
) -> Result<CorrelationResult, StatsError> {
    if counts.is_empty() {
        return Err(StatsError::InvalidInput("no trials".into()));
    }
    if !(detection_efficiency > 0.0 && detection_efficiency <= 1.0) {
        return Err(StatsError::InvalidInput(format!("detection efficiency {detection_efficiency}")));
    }
    let table = CountTable::new(counts);
    let full = table.moments(table.cells.iter().map(|c| c.1));
    let values = full.statistics(detection_efficiency);

    let mut errors = [None; N_STATS];
    if let Some((n_resamples, seed)) = bootstrap {
        if n_resamples < 100 {
            return Err(StatsError::InvalidInput(format!("need at least 100 resamples, got {n_resamples}")));
        }
        let draws: Vec<[Option<f64>; N_STATS]> = (0..n_resamples)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let w = table.resample(&mut rng);
                table.moments(w.into_iter()).statistics(detection_efficiency)
            })
            .collect();
        for (j, slot) in errors.iter_mut().enumerate() {
            let defined: Vec<f64> = draws.iter().filter_map(|d| d[j]).collect();
            if values[j].is_some() && defined.len() >= 2 {
                *slot = Some(sample_std(&defined));
            }
        }
    }
    let est = |j: usize| Estimate { value: values[j], stderr: errors[j] };
    Ok(CorrelationResult {
        n_trials: table.n,
        n_heralds: full.nh as u64,
        mean_w: full.sw / full.n,
        mean_r: full.sr / full.n,
        mean_r_given_w: (full.nh > 0.0).then(|| full.shr / full.nh),
        g2_ww: est(0),
        g2_rr: est(1),
        g2_wr: est(2),
        g2_rr_given_w: est(3),
        r: est(4),
        eta_r: est(5),
        eta_r_intrinsic: est(6),
    })
}

/// One CSV row: a `(delay, tau_R)` cell. Empty cells are undefined values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub delay_s: f64,
    pub tau_r_s: f64,
    pub write_start_s: f64,
    pub write_end_s: f64,
    pub n_trials: u64,
    pub n_heralds: u64,
    pub mean_w: f64,
    pub mean_r: f64,
    pub mean_r_given_w: Option<f64>,
    pub g2_ww: Option<f64>,
    pub g2_ww_stderr: Option<f64>,
    pub g2_rr: Option<f64>,
    pub g2_rr_stderr: Option<f64>,
    pub g2_wr: Option<f64>,
    pub g2_wr_stderr: Option<f64>,
    pub g2_rr_given_w: Option<f64>,
    pub g2_rr_given_w_stderr: Option<f64>,
    pub r: Option<f64>,
    pub r_stderr: Option<f64>,
    pub eta_r: Option<f64>,
    pub eta_r_stderr: Option<f64>,
    pub eta_r_intrinsic: Option<f64>,
    pub eta_r_intrinsic_stderr: Option<f64>,
    /// Semicolon-separated names of undefined statistics.
    pub undefined: String,
}

impl CorrelationRow {
    pub fn new(delay_s: f64, tau_r_s: f64, write_window: (f64, f64), c: &CorrelationResult) -> Self {
        Self {
            delay_s,
            tau_r_s,
            write_start_s: write_window.0,
            write_end_s: write_window.1,
            n_trials: c.n_trials,
            n_heralds: c.n_heralds,
            mean_w: c.mean_w,
            mean_r: c.mean_r,
            mean_r_given_w: c.mean_r_given_w,
            g2_ww: c.g2_ww.value,
            g2_ww_stderr: c.g2_ww.stderr,
            g2_rr: c.g2_rr.value,
            g2_rr_stderr: c.g2_rr.stderr,
            g2_wr: c.g2_wr.value,
            g2_wr_stderr: c.g2_wr.stderr,
            g2_rr_given_w: c.g2_rr_given_w.value,
            g2_rr_given_w_stderr: c.g2_rr_given_w.stderr,
            r: c.r.value,
            r_stderr: c.r.stderr,
            eta_r: c.eta_r.value,
            eta_r_stderr: c.eta_r.stderr,
            eta_r_intrinsic: c.eta_r_intrinsic.value,
            eta_r_intrinsic_stderr: c.eta_r_intrinsic.stderr,
            undefined: c.undefined().join(";"),
        }
    }
}

pub fn write_correlation_csv<W: Write>(out: W, rows: &[CorrelationRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
