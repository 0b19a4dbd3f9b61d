use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::source_sim::TrialRecord;

/// Click-time histogram accumulated over `n_trials` trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    n_trials: u64,
}

impl Histogram {
    /// Empty histogram on strictly increasing `edges`.
    pub fn new(edges: Vec<f64>) -> Result<Self, StatsError> {
        let n = edges.len().saturating_sub(1);
        Self::from_counts(edges, vec![0; n], 0)
    }

    /// `n_bins` equal bins on `[start, end)`.
    pub fn uniform(start: f64, end: f64, n_bins: usize) -> Result<Self, StatsError> {
        if n_bins == 0 {
            return Err(StatsError::InvalidInput("zero bins".into()));
        }
        let w = (end - start) / n_bins as f64;
        let mut edges: Vec<f64> = (0..n_bins).map(|i| start + i as f64 * w).collect();
        edges.push(end);
        Self::new(edges)
    }

    pub fn from_counts(edges: Vec<f64>, counts: Vec<u64>, n_trials: u64) -> Result<Self, StatsError> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
            return Err(StatsError::InvalidInput("histogram edges must be finite and increasing".into()));
        }
        if counts.len() != edges.len() - 1 {
            return Err(StatsError::LengthMismatch(counts.len(), edges.len() - 1));
        }
        Ok(Self { edges, counts, n_trials })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_trials(&self) -> u64 {
        self.n_trials
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Adds one trial's sorted clicks.
    pub fn add_trial(&mut self, clicks: &[f64]) {
        self.n_trials += 1;
        let (lo, hi) = (self.edges[0], self.edges[self.edges.len() - 1]);
        for &t in clicks {
            if t < lo || t >= hi {
                continue;
            }
            let bin = self.edges.partition_point(|&e| e <= t) - 1;
            self.counts[bin] += 1;
        }
    }

    /// Counts per trial per bin.
    pub fn per_trial(&self) -> Vec<f64> {
        let n = self.n_trials.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Counts per trial per unit time.
    pub fn rates(&self) -> Vec<f64> {
        let n = self.n_trials.max(1) as f64;
        self.counts
            .iter()
            .zip(self.edges.windows(2))
            .map(|(&c, w)| c as f64 / n / (w[1] - w[0]))
            .collect()
    }

    /// Merges another histogram on the same bins.
    pub fn merge(&mut self, other: &Histogram) -> Result<(), StatsError> {
        if self.edges != other.edges {
            return Err(StatsError::InvalidInput("histograms use different bins".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_trials += other.n_trials;
        Ok(())
    }

    /// Same counts with every edge multiplied by `factor`.
    pub fn rescale_time(&self, factor: f64) -> Self {
        Self {
            edges: self.edges.iter().map(|e| e * factor).collect(),
            counts: self.counts.clone(),
            n_trials: self.n_trials,
        }
    }
}

/// Read-click histogram over the records accepted by `select`.
pub fn read_histogram<F>(records: &[TrialRecord], edges: &[f64], select: F) -> Result<Histogram, StatsError>
where
    F: Fn(&TrialRecord) -> bool,
{
    let mut h = Histogram::new(edges.to_vec())?;
    for r in records.iter().filter(|r| select(r)) {
        h.add_trial(&r.read_clicks);
    }
    Ok(h)
}
