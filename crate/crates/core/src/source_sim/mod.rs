//! Generative model of the heralded source: write scattering, spin-wave
//! storage, read-out with four-wave-mixing and leakage noise, filtering and
//! detection.
//!
//! Every trial draws from its own ChaCha8 stream, selected by the trial index
//! from a generator seeded with the master seed, so results do not depend on
//! how trials are scheduled across threads.

mod read_model;
mod records;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{validate, ExperimentConfig, Violation};
use crate::filter_chain::FilterChain;
use crate::stats::{Histogram, Window, WindowCounts};

pub use read_model::ReadModel;
pub use records::{read_records, write_header, write_record, RecordHeader, TrialRecord};

/// Clicks are recorded up to this long after the end of each pulse, so the
/// filter ringdown tail is kept.
pub const RECORD_TAIL: f64 = 10e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<Violation>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed record file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Stored excitations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpinWaveState {
    pub n_symmetric: u32,
    pub n_asymmetric: u32,
    /// Time from the end of the write pulse at which this state applies.
    pub creation_time: f64,
}

/// Write-pulse output: stored excitations and detector clicks.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteOutcome {
    pub state: SpinWaveState,
    /// Scattered photons in the cell-cavity mode, before any loss.
    pub scattered: u32,
    pub clicks: Vec<f64>,
}

/// Per-configuration constants of the write step.
#[derive(Debug, Clone)]
struct WriteModel {
    photons: Geometric,
    symmetric_share: f64,
    symmetric_detect: f64,
    asymmetric_detect: f64,
    duration: f64,
    dark_mean: f64,
}

impl WriteModel {
    fn new(config: &ExperimentConfig) -> Self {
        let chain = config.filter();
        let mu = config.mean_write_excitations;
        let x = 2.0 * config.filter_detuning / config.pedestal_width;
        Self {
            photons: Geometric::new(1.0 / (1.0 + mu)).expect("valid thermal mean"),
            symmetric_share: config.write_efficiency,
            symmetric_detect: config.detection_chain() * chain.relative_suppression(config.filter_detuning),
            asymmetric_detect: config.detection_chain() * config.pedestal_pass / (1.0 + x * x),
            duration: config.write_duration,
            dark_mean: config.dark_rate * (config.write_duration + RECORD_TAIL),
        }
    }
}

fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

fn binomial<R: Rng + ?Sized>(n: u32, p: f64, rng: &mut R) -> u32 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n as u64, p).map(|b| b.sample(rng) as u32).unwrap_or(0)
}

/// Sorts clicks and drops any that follow the previously kept one by less
/// than `dead_time`.
fn finish_clicks(mut clicks: Vec<f64>, end: f64, dead_time: f64) -> Vec<f64> {
    clicks.retain(|&t| t < end);
    clicks.sort_by(f64::total_cmp);
    let mut last = f64::NEG_INFINITY;
    clicks.retain(|&t| {
        if t - last >= dead_time {
            last = t;
            true
        } else {
            false
        }
    });
    clicks
}

fn add_darks<R: Rng + ?Sized>(clicks: &mut Vec<f64>, mean: f64, span: f64, rng: &mut R) {
    for _ in 0..poisson(mean, rng) {
        clicks.push(rng.random::<f64>() * span);
    }
}

fn sample_write_with<R: Rng + ?Sized>(m: &WriteModel, chain: &FilterChain, dead_time: f64, rng: &mut R) -> WriteOutcome {
    let n = m.photons.sample(rng) as u32;
    let mut state = SpinWaveState::default();
    let mut clicks = Vec::new();
    for _ in 0..n {
        let symmetric = rng.random::<f64>() < m.symmetric_share;
        let p_detect = if symmetric {
            state.n_symmetric += 1;
            m.symmetric_detect
        } else {
            state.n_asymmetric += 1;
            m.asymmetric_detect
        };
        if rng.random::<f64>() < p_detect {
            let emitted = rng.random::<f64>() * m.duration;
            clicks.push(emitted + chain.sample_delay(rng));
        }
    }
    let span = m.duration + RECORD_TAIL;
    add_darks(&mut clicks, m.dark_mean, span, rng);
    WriteOutcome { state, scattered: n, clicks: finish_clicks(clicks, span, dead_time) }
}

/// Draws one write pulse: a thermal number of scattered photons, each
/// symmetric with probability `write_efficiency`, thinned by the detection
/// chain and filter, delayed by the filter, plus dark counts.
pub fn sample_write<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> WriteOutcome {
    sample_write_with(&WriteModel::new(config), &config.filter(), config.dead_time, rng)
}

/// Independent exponential survival of each excitation over `delay`.
pub fn evolve_spin_wave<R: Rng + ?Sized>(
    state: SpinWaveState,
    delay: f64,
    config: &ExperimentConfig,
    rng: &mut R,
) -> SpinWaveState {
    if delay <= 0.0 {
        return state;
    }
    SpinWaveState {
        n_symmetric: binomial(state.n_symmetric, (-delay / config.spin_wave_lifetime).exp(), rng),
        n_asymmetric: binomial(state.n_asymmetric, (-delay / config.asymmetric_lifetime).exp(), rng),
        creation_time: state.creation_time + delay,
    }
}

/// Read-pulse clicks for a stored state: retrieval (at most one photon per
/// symmetric excitation), Poissonian FWM and leakage, darks, filter delays and
/// dead time. `state.creation_time` is the write-read delay that sets the
/// leakage drift.
pub fn sample_read<R: Rng + ?Sized>(
    state: &SpinWaveState,
    model: &ReadModel,
    dead_time: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut emitted = Vec::new();
    let h_total = model.hazard.total();
    for _ in 0..state.n_symmetric {
        let e: f64 = rand_distr::Exp1.sample(rng);
        if e < h_total && rng.random::<f64>() < model.efficiency {
            emitted.push(model.hazard.invert(e));
        }
    }
    for _ in 0..poisson(model.fwm.total(), rng) {
        emitted.push(model.sample_fwm(rng));
    }
    let (flat, ramp) = model.leakage_means(state.creation_time);
    for _ in 0..poisson(flat, rng) {
        emitted.push(model.sample_leak_flat(rng));
    }
    for _ in 0..poisson(ramp, rng) {
        emitted.push(model.sample_leak_ramp(rng));
    }
    for t in emitted.iter_mut() {
        *t += model.filter.sample_delay(rng);
    }
    let span = model.duration + RECORD_TAIL;
    add_darks(&mut emitted, model.dark_rate * span, span, rng);
    finish_clicks(emitted, span, dead_time)
}

/// Per-delay read histograms, all trials and heralded trials only.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadHistograms {
    pub all: Histogram,
    pub heralded: Histogram,
}

/// Seeded, reusable trial generator for one configuration.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: ExperimentConfig,
    write: WriteModel,
    read: ReadModel,
    chain: FilterChain,
    seed: u64,
    write_enabled: bool,
}

impl Simulator {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self, SimError> {
        let violations = validate(config);
        if !violations.is_empty() {
            return Err(SimError::InvalidConfig(violations));
        }
        Ok(Self {
            config: config.clone(),
            write: WriteModel::new(config),
            read: ReadModel::new(config),
            chain: config.filter(),
            seed,
            write_enabled: true,
        })
    }

    /// Drops the write pulse: no excitations and no write photons. Dark
    /// counts still appear in the write window.
    pub fn without_write(mut self) -> Self {
        self.write_enabled = false;
        self
    }

    pub fn write_enabled(&self) -> bool {
        self.write_enabled
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn read_model(&self) -> &ReadModel {
        &self.read
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Trial `index` with write-read delay `delay`.
    pub fn trial(&self, index: u64, delay: f64) -> TrialRecord {
        let mut rng = trial_rng(self.seed, index);
        let write = if self.write_enabled {
            sample_write_with(&self.write, &self.chain, self.config.dead_time, &mut rng)
        } else {
            let span = self.write.duration + RECORD_TAIL;
            let mut clicks = Vec::new();
            add_darks(&mut clicks, self.write.dark_mean, span, &mut rng);
            WriteOutcome { state: SpinWaveState::default(), scattered: 0, clicks: finish_clicks(clicks, span, self.config.dead_time) }
        };
        let state = evolve_spin_wave(write.state, delay, &self.config, &mut rng);
        let read = sample_read(&state, &self.read, self.config.dead_time, &mut rng);
        TrialRecord { trial: index, delay, write_clicks: write.clicks, read_clicks: read }
    }

    /// Trials in `range`, in index order.
    pub fn run(&self, range: Range<u64>, delay: f64) -> Vec<TrialRecord> {
        self.map(range, delay, |r| r)
    }

    /// Applies `f` to every trial in `range` in parallel; output in index order.
    pub fn map<T, F>(&self, range: Range<u64>, delay: f64, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(TrialRecord) -> T + Sync + Send,
    {
        range.into_par_iter().map(|i| f(self.trial(i, delay))).collect()
    }

    /// Window counts of every trial in `range`.
    pub fn counts(&self, range: Range<u64>, delay: f64, write_window: Window, read_window: Window) -> Vec<WindowCounts> {
        self.map(range, delay, |r| WindowCounts {
            n_w: write_window.count(&r.write_clicks),
            n_r: read_window.count(&r.read_clicks),
        })
    }

    /// Read-click histograms over `range`; heralded means at least one click
    /// in `write_window`.
    pub fn histograms(&self, range: Range<u64>, delay: f64, edges: &[f64], write_window: Window) -> ReadHistograms {
        let empty = Histogram::new(edges.to_vec()).expect("valid histogram edges");
        let (all, heralded) = range
            .into_par_iter()
            .fold(
                || (empty.clone(), empty.clone()),
                |(mut all, mut her), i| {
                    let r = self.trial(i, delay);
                    all.add_trial(&r.read_clicks);
                    if write_window.count(&r.write_clicks) > 0 {
                        her.add_trial(&r.read_clicks);
                    }
                    (all, her)
                },
            )
            .reduce(
                || (empty.clone(), empty.clone()),
                |(mut a1, mut h1), (a2, h2)| {
                    a1.merge(&a2).expect("same bins");
                    h1.merge(&h2).expect("same bins");
                    (a1, h1)
                },
            );
        ReadHistograms { all, heralded }
    }

    pub fn header(&self, trials: u64, delays: &[f64]) -> RecordHeader {
        RecordHeader {
            config_hash: self.config.hash(),
            seed: self.seed,
            trials,
            cycles_per_sequence: self.config.cycles_per_sequence,
            delays_s: delays.to_vec(),
            write_enabled: self.write_enabled,
            write_duration_s: self.config.write_duration,
            read_duration_s: self.config.read_duration,
            record_tail_s: RECORD_TAIL,
        }
    }
}

/// `trials` trials at the configured write-read delay.
pub fn simulate(config: &ExperimentConfig, trials: u64, master_seed: u64) -> Result<Vec<TrialRecord>, SimError> {
    if trials == 0 {
        return Err(SimError::InvalidArgument("trials must be >= 1".into()));
    }
    Ok(Simulator::new(config, master_seed)?.run(0..trials, config.write_read_delay))
}

/// Default write analysis window: the write pulse plus the record tail.
pub fn default_write_window(config: &ExperimentConfig) -> Window {
    Window { start: 0.0, end: config.write_duration + RECORD_TAIL }
}

/// Mean number of excitations given at least one write click, for a thermal
/// prior with mean `thermal_mean` and per-photon detection probability
/// `detected_mean / thermal_mean`.
pub fn heralded_mean_excitations(detected_mean: f64, thermal_mean: f64) -> Result<f64, SimError> {
    if !(detected_mean > 0.0 && thermal_mean > 0.0) || detected_mean > thermal_mean {
        return Err(SimError::InvalidArgument(format!(
            "need 0 < detected mean ({detected_mean}) <= thermal mean ({thermal_mean})"
        )));
    }
    let mu = thermal_mean;
    let q = detected_mean / thermal_mean;
    let d = 1.0 + mu * q;
    // E[n 1{no click}] = mu (1 - q) / d^2 and P(no click) = 1 / d.
    let joint = mu - mu * (1.0 - q) / (d * d);
    let p_herald = 1.0 - 1.0 / d;
    Ok(joint / p_herald)
}

/// Exact mean of the stored symmetric excitations given at least one click in
/// `write_window`, including asymmetric-photon heralds and dark counts.
pub fn heralded_symmetric_mean(config: &ExperimentConfig, write_window: Window) -> f64 {
    let m = WriteModel::new(config);
    let mu = config.mean_write_excitations;
    let eps = config.write_efficiency;
    let window_fraction = delay_capture(&config.filter(), config.write_duration, write_window);
    let q_s = m.symmetric_detect * window_fraction;
    let q_tot = eps * q_s + (1.0 - eps) * m.asymmetric_detect * window_fraction;
    let no_dark = (-config.dark_rate * write_window.duration()).exp();
    let d = 1.0 + mu * q_tot;
    let joint = eps * mu - no_dark * eps * mu * (1.0 - q_s) / (d * d);
    joint / (1.0 - no_dark / d)
}

/// Probability that a photon emitted uniformly over `[0, duration]` and
/// delayed by the filter arrives inside `window`, by midpoint quadrature over
/// emission time and the closed-form delay distribution.
fn delay_capture(chain: &FilterChain, duration: f64, window: Window) -> f64 {
    let taus: Vec<f64> = chain.cavities().iter().map(crate::filter_chain::ringdown_time).collect();
    let survival = |x: f64| -> f64 {
        // P(delay > x) for a sum of exponentials with distinct means.
        if x <= 0.0 {
            return 1.0;
        }
        match taus.len() {
            0 => 0.0,
            1 => (-x / taus[0]).exp(),
            _ => taus
                .iter()
                .enumerate()
                .map(|(i, &ti)| {
                    let w: f64 = taus
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &tj)| ti / (ti - tj))
                        .product();
                    w * (-x / ti).exp()
                })
                .sum(),
        }
    };
    let n = 2000;
    (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) / n as f64 * duration;
            survival(window.start - t) - survival(window.end - t)
        })
        .sum::<f64>()
        / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> ExperimentConfig {
        ExperimentConfig { dark_rate: 0.0, ..ExperimentConfig::default() }
    }

    #[test]
    fn no_scattering_no_photons() {
        let c = ExperimentConfig { mean_write_excitations: 0.0, ..quiet() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w = sample_write(&c, &mut rng);
            assert_eq!(w.scattered, 0);
            assert!(w.clicks.is_empty());
            assert_eq!(w.state, SpinWaveState::default());
        }
    }

    #[test]
    fn zero_delay_keeps_state() {
        let c = quiet();
        let s = SpinWaveState { n_symmetric: 5, n_asymmetric: 2, creation_time: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(evolve_spin_wave(s, 0.0, &c, &mut rng), s);
    }

    #[test]
    fn survival_at_one_lifetime() {
        let c = quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1_000_000;
        let one = SpinWaveState { n_symmetric: 1, ..Default::default() };
        let alive: u32 = (0..n).map(|_| evolve_spin_wave(one, c.spin_wave_lifetime, &c, &mut rng).n_symmetric).sum();
        let frac = alive as f64 / n as f64;
        assert!((frac / (-1.0f64).exp() - 1.0).abs() < 0.005, "{frac}");
    }

    #[test]
    fn silent_read_without_sources() {
        let mut c = quiet();
        c.fwm_couplings.chi_r = 0.0;
        c.leakage_coeffs.l0 = 0.0;
        c.leakage_coeffs.l1 = 0.0;
        let sim = Simulator::new(&c, 3).unwrap().without_write();
        assert!(sim.run(0..2000, 30e-6).iter().all(|r| r.read_clicks.is_empty() && r.write_clicks.is_empty()));
    }

    #[test]
    fn dead_time_merges_close_clicks() {
        let out = finish_clicks(vec![3.0, 1.0, 1.02, 1.06, 5.0], 4.0, 0.05);
        assert_eq!(out, vec![1.0, 1.06, 3.0]);
    }

    #[test]
    fn trials_are_order_independent() {
        let sim = Simulator::new(&ExperimentConfig::default(), 11).unwrap();
        let all = sim.run(0..200, 30e-6);
        let tail = sim.run(150..200, 30e-6);
        assert_eq!(&all[150..], &tail[..]);
        assert_eq!(sim.trial(17, 30e-6), all[17]);
        assert_ne!(Simulator::new(&ExperimentConfig::default(), 12).unwrap().run(0..200, 30e-6), all);
    }

    #[test]
    fn records_are_sorted_and_bounded() {
        let sim = Simulator::new(&ExperimentConfig { mean_write_excitations: 2.0, ..Default::default() }, 5).unwrap();
        for r in sim.run(0..3000, 30e-6) {
            assert!(r.write_clicks.windows(2).all(|w| w[0] < w[1]));
            assert!(r.read_clicks.windows(2).all(|w| w[0] < w[1]));
            assert!(r.write_clicks.iter().all(|&t| (0.0..33e-6 + RECORD_TAIL).contains(&t)));
            assert!(r.read_clicks.iter().all(|&t| (0.0..200e-6 + RECORD_TAIL).contains(&t)));
        }
    }

    #[test]
    fn heralded_mean_closed_forms() {
        assert!((heralded_mean_excitations(0.1, 0.1).unwrap() - 1.1).abs() < 1e-12);
        assert!((heralded_mean_excitations(1e-9, 1e-8).unwrap() - 1.0).abs() < 1e-6);
        assert!(heralded_mean_excitations(0.0, 0.1).is_err());
        assert!(heralded_mean_excitations(0.2, 0.1).is_err());
    }

    #[test]
    fn capture_of_filter_tail() {
        let c = ExperimentConfig::default();
        let f = delay_capture(&c.filter(), c.write_duration, default_write_window(&c));
        assert!(f > 0.998 && f <= 1.0, "{f}");
        let none = delay_capture(&FilterChain::default(), 1.0, Window { start: 0.0, end: 0.5 });
        assert!((none - 0.5).abs() < 1e-9);
    }
}
