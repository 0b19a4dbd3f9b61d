//! Inputs shared by the benchmarks.

use dlcz_core::fits::{DifferenceDataset, ScanKind, ScanModel, ScanParams};
use dlcz_core::source_sim::default_write_window;
use dlcz_core::stats::{Histogram, Window, WindowCounts};
use dlcz_core::{ExperimentConfig, ShapeModelParams, Simulator};

pub fn nominal() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Window counts for `trials` nominal trials, 40 us read window.
pub fn nominal_counts(trials: u64) -> Vec<WindowCounts> {
    let c = nominal();
    let sim = Simulator::new(&c, 1).expect("nominal config is valid");
    sim.counts(0..trials, c.write_read_delay, default_write_window(&c), Window { start: 0.0, end: 40e-6 })
}

pub fn read_edges() -> Vec<f64> {
    (0..=100).map(|i| 2e-6 * i as f64).collect()
}

fn expected_histogram(p: &ShapeModelParams, edges: &[f64], trials: u64) -> Histogram {
    let counts = p
        .bin_counts(edges)
        .expect("model covers the read pulse")
        .iter()
        .map(|t| (t.total() * trials as f64).round() as u64)
        .collect();
    Histogram::from_counts(edges.to_vec(), counts, trials).expect("valid histogram")
}

/// Unconditional and heralded difference datasets built from the model.
pub fn shape_datasets() -> (ShapeModelParams, Vec<DifferenceDataset>) {
    let truth = ShapeModelParams::from_config(&nominal(), 0.0);
    let edges = read_edges();
    let trials = 3_200_000;
    let without = expected_histogram(&truth, &edges, trials);
    let sets = [0.14, 0.9]
        .iter()
        .map(|&n_ce| DifferenceDataset {
            with_write: expected_histogram(&ShapeModelParams { n_ce, ..truth.clone() }, &edges, trials),
            without_write: without.clone(),
            n_ce,
        })
        .collect();
    (truth, sets)
}

pub fn write_scan_model() -> ScanModel {
    let c = nominal();
    ScanModel::new(c.filter(), c.zeeman_splitting, ScanKind::Write)
}

pub fn write_scan_truth() -> ScanParams {
    ScanParams {
        peak_amplitude: 0.0137 * 0.63,
        pedestal_amplitude: 0.0137 * 0.37,
        pedestal_width: 1e6,
        leakage_amplitude: 2e-3,
        background: 4e-4,
    }
}
