//! Experiment definition shared by the simulator and the analysis code.
//!
//! Every field has a default equal to the nominal value of the warm-vapour
//! caesium source, so an empty JSON object `{}` describes the reference
//! experiment. Times are in seconds and frequencies in hertz.

use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::filter_chain::FilterChain;

/// A single Lorentzian filter cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySpec {
    /// Full width at half maximum, Hz.
    pub fwhm: f64,
    /// Transmission on resonance, in (0, 1].
    pub peak_transmission: f64,
}

impl CavitySpec {
    pub const fn new(fwhm: f64, peak_transmission: f64) -> Self {
        Self {
            fwhm,
            peak_transmission,
        }
    }
}

/// Piecewise-linear function of time, stored as `[t_seconds, value]` pairs.
///
/// Interpolation is linear between samples and clamped to the end values
/// outside the sampled range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct TimeSeries {
    points: Vec<(f64, f64)>,
}

impl From<Vec<[f64; 2]>> for TimeSeries {
    fn from(raw: Vec<[f64; 2]>) -> Self {
        Self {
            points: raw.into_iter().map(|[t, v]| (t, v)).collect(),
        }
    }
}

impl From<TimeSeries> for Vec<[f64; 2]> {
    fn from(ts: TimeSeries) -> Self {
        ts.points.into_iter().map(|(t, v)| [t, v]).collect()
    }
}

impl TimeSeries {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    /// Two-sample constant series covering `[0, end]`.
    pub fn constant(value: f64, end: f64) -> Self {
        Self::new(vec![(0.0, value), (end, value)])
    }

    /// Trapezoidal pulse of unit plateau over `[0, duration]` with linear
    /// edges of length `edge`.
    pub fn trapezoid(duration: f64, edge: f64) -> Self {
        Self::new(vec![
            (0.0, 0.0),
            (edge, 1.0),
            (duration - edge, 1.0),
            (duration, 0.0),
        ])
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sample times, used as integration breakpoints.
    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|&(t, _)| t)
    }

    /// `[first, last]` sample time, or `None` for an empty series.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.points.first()?.0, self.points.last()?.0))
    }

    pub fn covers(&self, start: f64, end: f64) -> bool {
        matches!(self.span(), Some((a, b)) if a <= start && b >= end)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let pts = &self.points;
        match pts.len() {
            0 => return 0.0,
            1 => return pts[0].1,
            _ => {}
        }
        if t <= pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        // first index with sample time > t; guaranteed in 1..len
        let hi = pts.partition_point(|&(ti, _)| ti <= t);
        let (t0, v0) = pts[hi - 1];
        let (t1, v1) = pts[hi];
        if t1 == t0 {
            return v1;
        }
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Same series with every time multiplied by `factor`.
    pub fn rescale_time(&self, factor: f64) -> Self {
        Self::new(self.points.iter().map(|&(t, v)| (t * factor, v)).collect())
    }
}

/// Read-drive leakage through the polarization and spectral filters,
/// `(l0 + l1 * t) * Omega^2(t)` photons/s in the cell-cavity mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageCoeffs {
    /// Photons/s at plateau drive.
    pub l0: f64,
    /// Growth rate, photons/s^2. `t` is measured from the end of the write pulse.
    pub l1: f64,
}

/// Read-out couplings: `chi_r` and the ratio `alpha(t) = xi_r / chi_r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FwmCouplings {
    /// Readout coupling; `chi_r^2 * Omega^2` is a rate in 1/s.
    pub chi_r: f64,
    pub alpha_table: TimeSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub zeeman_splitting: f64,
    pub write_duration: f64,
    pub read_duration: f64,
    /// Write-read delay `tau_D`, from write-pulse end to read-pulse start.
    pub write_read_delay: f64,
    pub cycles_per_sequence: u32,
    /// 1/e lifetime of the symmetric collective excitation.
    pub spin_wave_lifetime: f64,
    /// Lifetime of asymmetric (beam-localized) excitations.
    pub asymmetric_lifetime: f64,
    /// Population decay time T1 of the initial state.
    pub population_decay: f64,
    pub spin_coherence: f64,
    /// Mean scattered photons per write pulse in the cell-cavity mode (thermal).
    pub mean_write_excitations: f64,
    /// Probability that a scattered write photon belongs to the symmetric mode.
    pub write_efficiency: f64,
    /// Cell-cavity output to detector click, including the filter cavities on resonance.
    pub detection_efficiency: f64,
    pub escape_efficiency: f64,
    pub polarization_extinction: f64,
    /// Detector dark counts, 1/s.
    pub dark_rate: f64,
    /// Clicks closer than this to the previous click are merged.
    pub dead_time: f64,
    pub leakage_coeffs: LeakageCoeffs,
    pub fwm_couplings: FwmCouplings,
    /// Normalized drive intensity `Omega_R^2(t)` over the read pulse (plateau = 1).
    pub drive_profile: TimeSeries,
    pub filter_chain: Vec<CavitySpec>,
    /// Filter-chain resonance offset from the scattered-photon frequency, Hz.
    pub filter_detuning: f64,
    /// FWHM of the broad pedestal from asymmetric excitations, Hz.
    pub pedestal_width: f64,
    /// Share of asymmetric-excitation photons passing the filters on resonance.
    pub pedestal_pass: f64,
    pub rng_master_seed: u64,
}

pub const NOMINAL_READ_DURATION: f64 = 200e-6;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            zeeman_splitting: 2.4e6,
            write_duration: 33e-6,
            read_duration: NOMINAL_READ_DURATION,
            write_read_delay: 30e-6,
            cycles_per_sequence: 55,
            spin_wave_lifetime: 0.27e-3,
            asymmetric_lifetime: 1e-6,
            population_decay: 1.1e-3,
            spin_coherence: 0.8e-3,
            mean_write_excitations: 0.23,
            write_efficiency: 0.63,
            detection_efficiency: 0.096,
            escape_efficiency: 0.62,
            polarization_extinction: 1e-4,
            dark_rate: 10.0,
            dead_time: 50e-9,
            leakage_coeffs: LeakageCoeffs { l0: 1500.0, l1: 6e7 },
            fwm_couplings: FwmCouplings {
                chi_r: 110.0,
                alpha_table: TimeSeries::constant(1.0, NOMINAL_READ_DURATION),
            },
            drive_profile: TimeSeries::trapezoid(NOMINAL_READ_DURATION, 5e-6),
            filter_chain: vec![CavitySpec::new(66e3, 0.66), CavitySpec::new(900e3, 0.90)],
            filter_detuning: 0.0,
            pedestal_width: 1e6,
            pedestal_pass: 1.0,
            rng_master_seed: 0,
        }
    }
}

/// One broken invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Parses a JSON config, fills defaults and validates it.
pub fn load_config<R: Read>(source: R) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = serde_json::from_reader(source)?;
    let violations = validate(&config);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

pub fn load_config_str(source: &str) -> Result<ExperimentConfig, ConfigError> {
    load_config(source.as_bytes())
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, field: &str, rule: impl Into<String>) {
        self.out.push(Violation {
            field: field.to_string(),
            rule: rule.into(),
        });
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be finite and > 0, got {v}"));
        }
    }

    fn non_negative(&mut self, field: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(field, format!("must be finite and >= 0, got {v}"));
        }
    }

    fn fraction(&mut self, field: &str, v: f64) {
        if !(0.0..=1.0).contains(&v) {
            self.push(field, format!("must lie in [0, 1], got {v}"));
        }
    }

    fn series(&mut self, field: &str, ts: &TimeSeries, end: f64) {
        let pts = ts.points();
        if pts.is_empty() {
            self.push(field, "must contain at least one sample");
            return;
        }
        if pts.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            self.push(field, "samples must be finite");
        }
        if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
            self.push(field, "sample times must be strictly increasing");
        }
        if pts.iter().any(|&(_, v)| v < 0.0) {
            self.push(field, "values must be >= 0");
        }
        if !ts.covers(0.0, end) {
            self.push(field, format!("must cover [0, read_duration = {end}]"));
        }
    }
}

/// Lists every broken invariant; empty means valid.
pub fn validate(c: &ExperimentConfig) -> Vec<Violation> {
    let mut ck = Checker { out: Vec::new() };
    ck.positive("zeeman_splitting", c.zeeman_splitting);
    ck.positive("write_duration", c.write_duration);
    ck.positive("read_duration", c.read_duration);
    ck.non_negative("write_read_delay", c.write_read_delay);
    if c.cycles_per_sequence < 1 {
        ck.push("cycles_per_sequence", "must be >= 1");
    }
    ck.positive("spin_wave_lifetime", c.spin_wave_lifetime);
    ck.positive("asymmetric_lifetime", c.asymmetric_lifetime);
    ck.positive("population_decay", c.population_decay);
    ck.positive("spin_coherence", c.spin_coherence);
    ck.non_negative("mean_write_excitations", c.mean_write_excitations);
    ck.fraction("write_efficiency", c.write_efficiency);
    ck.fraction("detection_efficiency", c.detection_efficiency);
    ck.fraction("escape_efficiency", c.escape_efficiency);
    ck.fraction("polarization_extinction", c.polarization_extinction);
    ck.fraction("pedestal_pass", c.pedestal_pass);
    ck.non_negative("dark_rate", c.dark_rate);
    ck.non_negative("dead_time", c.dead_time);
    ck.positive("pedestal_width", c.pedestal_width);
    if !c.filter_detuning.is_finite() {
        ck.push("filter_detuning", "must be finite");
    }

    let LeakageCoeffs { l0, l1 } = c.leakage_coeffs;
    ck.non_negative("leakage_coeffs.l0", l0);
    if !l1.is_finite() {
        ck.push("leakage_coeffs.l1", "must be finite");
    } else if l0 + l1 * (c.write_read_delay + c.read_duration) < 0.0 {
        ck.push("leakage_coeffs.l1", "leakage rate turns negative inside the read window");
    }
    ck.non_negative("fwm_couplings.chi_r", c.fwm_couplings.chi_r);
    ck.series("fwm_couplings.alpha_table", &c.fwm_couplings.alpha_table, c.read_duration);
    ck.series("drive_profile", &c.drive_profile, c.read_duration);

    for (i, cav) in c.filter_chain.iter().enumerate() {
        if !(cav.fwhm > 0.0 && cav.fwhm.is_finite()) {
            ck.push(&format!("filter_chain[{i}].fwhm"), "must be finite and > 0");
        }
        if !(cav.peak_transmission > 0.0 && cav.peak_transmission <= 1.0) {
            ck.push(&format!("filter_chain[{i}].peak_transmission"), "must lie in (0, 1]");
        }
    }
    ck.out
}

impl ExperimentConfig {
    pub fn filter(&self) -> FilterChain {
        FilterChain::new(self.filter_chain.clone())
    }

    /// Cell-cavity mode to detector click, on filter resonance.
    pub fn detection_chain(&self) -> f64 {
        self.escape_efficiency * self.detection_efficiency
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_nominal() {
        let c = load_config_str("{}").unwrap();
        assert_eq!(c.zeeman_splitting, 2.4e6);
        assert_eq!(c.spin_wave_lifetime, 0.27e-3);
        assert_eq!(c.detection_efficiency, 0.096);
        assert_eq!(c.mean_write_excitations, 0.23);
        assert_eq!(c.write_efficiency, 0.63);
        assert_eq!(c.cycles_per_sequence, 55);
        assert!(validate(&c).is_empty());
    }

    #[test]
    fn efficiency_above_one_is_rejected() {
        let err = load_config_str(r#"{"detection_efficiency": 1.2}"#).unwrap_err();
        match err {
            ConfigError::Invalid(v) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].field, "detection_efficiency");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_filter_chain_is_identity() {
        let c = load_config_str(r#"{"filter_chain": []}"#).unwrap();
        let chain = c.filter();
        for d in [0.0, 1e3, 2.4e6, -7e7] {
            assert_eq!(chain.transmission(d), 1.0);
        }
    }

    #[test]
    fn negative_delay_names_the_field() {
        let c = ExperimentConfig {
            write_read_delay: -1e-6,
            ..Default::default()
        };
        let v = validate(&c);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "write_read_delay");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = load_config_str(r#"{"zeeman_spliting": 2e6}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
        let err = load_config_str(r#"{"leakage_coeffs": {"l0": 1, "l1": 0, "l2": 3}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn series_must_cover_read_window() {
        let c = load_config_str(r#"{"drive_profile": [[0.0, 1.0], [1e-4, 1.0]]}"#);
        match c {
            Err(ConfigError::Invalid(v)) => assert_eq!(v[0].field, "drive_profile"),
            other => panic!("expected coverage violation, got {other:?}"),
        }
    }

    #[test]
    fn series_parse_as_pairs() {
        let c = load_config_str(r#"{"drive_profile": [[0.0, 0.0], [1e-5, 1.0], [2e-4, 1.0]]}"#).unwrap();
        assert_eq!(c.drive_profile.eval(5e-6), 0.5);
        assert_eq!(c.drive_profile.eval(1.0), 1.0);
        assert_eq!(c.drive_profile.eval(-1.0), 0.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.rng_master_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
