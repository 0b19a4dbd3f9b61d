//! Photon-counting statistics on windowed click records.
//!
//! All windows are half-open, `[start, end)`, so counts add up over a
//! partition of the record.

mod bootstrap;
mod correlation;
mod histogram;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::source_sim::TrialRecord;

pub use bootstrap::{bootstrap, BootstrapEstimate};
pub use correlation::{correlate, write_correlation_csv, CorrelationResult, CorrelationRow, CountTable, Estimate};
pub use histogram::{read_histogram, Histogram};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("statistic undefined: {0}")]
    Undefined(String),
    #[error("window [{start}, {end}) is inverted or not finite")]
    InvalidWindow { start: f64, end: f64 },
    #[error("paired inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Half-open time window `[start, end)`, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn new(start: f64, end: f64) -> Result<Self, StatsError> {
        if start.is_finite() && end.is_finite() && start <= end {
            Ok(Self { start, end })
        } else {
            Err(StatsError::InvalidWindow { start, end })
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Number of entries of the sorted slice `clicks` inside the window.
    pub fn count(&self, clicks: &[f64]) -> u32 {
        let lo = clicks.partition_point(|&t| t < self.start);
        let hi = clicks.partition_point(|&t| t < self.end);
        (hi - lo) as u32
    }
}

/// Click numbers of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct WindowCounts {
    pub n_w: u32,
    pub n_r: u32,
}

impl WindowCounts {
    pub fn heralded(&self) -> bool {
        self.n_w > 0
    }
}

pub fn window_counts(
    records: &[TrialRecord],
    write_window: Window,
    read_window: Window,
) -> Result<Vec<WindowCounts>, StatsError> {
    Window::new(write_window.start, write_window.end)?;
    Window::new(read_window.start, read_window.end)?;
    Ok(records
        .iter()
        .map(|r| WindowCounts {
            n_w: write_window.count(&r.write_clicks),
            n_r: read_window.count(&r.read_clicks),
        })
        .collect())
}

fn mean(counts: &[u32]) -> f64 {
    counts.iter().map(|&n| n as f64).sum::<f64>() / counts.len() as f64
}

/// `<n (n - 1)> / <n>^2`.
pub fn g2_auto(counts: &[u32]) -> Result<f64, StatsError> {
    let total: u64 = counts.iter().map(|&n| n as u64).sum();
    if total == 0 {
        return Err(StatsError::Undefined("g2 of all-zero counts".into()));
    }
    let pairs: u64 = counts.iter().map(|&n| n as u64 * (n as u64).saturating_sub(1)).sum();
    let len = counts.len() as f64;
    let m = total as f64 / len;
    Ok(pairs as f64 / len / (m * m))
}

/// `<n_w n_r> / (<n_w> <n_r>)`.
pub fn g2_cross(counts_w: &[u32], counts_r: &[u32]) -> Result<f64, StatsError> {
    if counts_w.len() != counts_r.len() {
        return Err(StatsError::LengthMismatch(counts_w.len(), counts_r.len()));
    }
    if counts_w.is_empty() {
        return Err(StatsError::Undefined("g2 of an empty sample".into()));
    }
    let (mw, mr) = (mean(counts_w), mean(counts_r));
    if mw == 0.0 || mr == 0.0 {
        return Err(StatsError::Undefined("cross-correlation with a zero mean".into()));
    }
    let joint: u64 = counts_w.iter().zip(counts_r).map(|(&a, &b)| a as u64 * b as u64).sum();
    Ok(joint as f64 / counts_w.len() as f64 / (mw * mr))
}

/// `R = g2_wr^2 / (g2_ww g2_rr)`; `R > 1` cannot happen for classical fields.
pub fn cauchy_schwarz(g2_ww: f64, g2_rr: f64, g2_wr: f64) -> Result<f64, StatsError> {
    let den = g2_ww * g2_rr;
    if !(den > 0.0) || !den.is_finite() {
        return Err(StatsError::Undefined(format!("Cauchy-Schwarz denominator {den}")));
    }
    Ok(g2_wr * g2_wr / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalEfficiency {
    pub eta_r: f64,
    pub eta_r_intrinsic: f64,
}

/// Heralded minus unconditional read probability, and that value corrected
/// for the detection efficiency.
pub fn retrieval_efficiency_from_means(
    heralded_mean: f64,
    unconditional_mean: f64,
    detection_efficiency: f64,
) -> Result<RetrievalEfficiency, StatsError> {
    if !(detection_efficiency > 0.0 && detection_efficiency <= 1.0) {
        return Err(StatsError::InvalidInput(format!("detection efficiency {detection_efficiency}")));
    }
    let eta_r = heralded_mean - unconditional_mean;
    Ok(RetrievalEfficiency { eta_r, eta_r_intrinsic: eta_r / detection_efficiency })
}

pub fn retrieval_efficiency(
    read_counts: &[u32],
    heralded: &[bool],
    detection_efficiency: f64,
) -> Result<RetrievalEfficiency, StatsError> {
    if read_counts.len() != heralded.len() {
        return Err(StatsError::LengthMismatch(read_counts.len(), heralded.len()));
    }
    let n_h = heralded.iter().filter(|&&h| h).count();
    if n_h == 0 {
        return Err(StatsError::Undefined("no heralded trials".into()));
    }
    let sum_h: f64 = read_counts.iter().zip(heralded).filter(|(_, &h)| h).map(|(&n, _)| n as f64).sum();
    retrieval_efficiency_from_means(sum_h / n_h as f64, mean(read_counts), detection_efficiency)
}

/// Source-side rate from a detected rate: `rate / (eta_det eta_esc)`.
pub fn correct_for_detection(count_rate: f64, detection_efficiency: f64, escape_efficiency: f64) -> Result<f64, StatsError> {
    for (name, e) in [("detection", detection_efficiency), ("escape", escape_efficiency)] {
        if !(e > 0.0 && e <= 1.0) {
            return Err(StatsError::InvalidInput(format!("{name} efficiency {e} outside (0, 1]")));
        }
    }
    Ok(count_rate / (detection_efficiency * escape_efficiency))
}

/// Read auto-correlation restricted to heralded trials (`n_w >= 1`).
pub fn conditional_g2_rr(counts: &[WindowCounts]) -> Result<f64, StatsError> {
    let heralded: Vec<u32> = counts.iter().filter(|c| c.heralded()).map(|c| c.n_r).collect();
    if heralded.is_empty() {
        return Err(StatsError::Undefined("no heralded trials".into()));
    }
    g2_auto(&heralded)
}
