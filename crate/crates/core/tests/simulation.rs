//! Simulator statistics against closed-form expectations.

use dlcz_core::config::{ExperimentConfig, LeakageCoeffs, TimeSeries};
use dlcz_core::filter_chain::ringdown_time;
use dlcz_core::source_sim::{
    default_write_window, read_records, sample_write, write_header, write_record, Simulator, RECORD_TAIL,
};
use dlcz_core::stats::{conditional_g2_rr, correlate, g2_auto, Window};
use dlcz_core::ShapeModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Probability that a photon emitted uniformly in `[0, duration]` and held by
/// the filter arrives before `end`.
fn capture(config: &ExperimentConfig, end: f64) -> f64 {
    let taus: Vec<f64> = config.filter().cavities().iter().map(ringdown_time).collect();
    let cdf = |x: f64| -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let (a, b) = (taus[0], taus[1]);
        1.0 - (a * (-x / a).exp() - b * (-x / b).exp()) / (a - b)
    };
    let n = 20_000;
    let h = config.write_duration / n as f64;
    (0..n).map(|k| cdf(end - (k as f64 + 0.5) * h)).sum::<f64>() / n as f64
}

fn noiseless(mu: f64, eps: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        mean_write_excitations: mu,
        write_efficiency: eps,
        pedestal_pass: 0.0,
        dark_rate: 0.0,
        dead_time: 0.0,
        leakage_coeffs: LeakageCoeffs { l0: 0.0, l1: 0.0 },
        ..ExperimentConfig::default()
    };
    c.fwm_couplings.alpha_table = TimeSeries::constant(0.0, c.read_duration);
    c
}

fn whole_read(config: &ExperimentConfig) -> Window {
    Window::new(0.0, config.read_duration + RECORD_TAIL).unwrap()
}

#[test]
fn nominal_write_clicks_and_heralds() {
    let c = ExperimentConfig::default();
    let ww = default_write_window(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000_000u64;
    let (mut clicks, mut heralds) = (0u64, 0u64);
    for _ in 0..n {
        let k = ww.count(&sample_write(&c, &mut rng).clicks) as u64;
        clicks += k;
        heralds += (k > 0) as u64;
    }
    let mean = clicks as f64 / n as f64;
    let eta = c.detection_chain();
    let per_photon = eta * (c.write_efficiency + (1.0 - c.write_efficiency) * c.pedestal_pass) * capture(&c, ww.end);
    let expected = c.mean_write_excitations * per_photon + c.dark_rate * ww.duration();
    let sigma = (mean * (1.0 + mean) / n as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * sigma, "mean {mean} vs {expected} (sigma {sigma})");
    assert!((mean - 0.0140).abs() < 0.02 * 0.0140, "mean {mean}");

    // Thermal photon number: P(no click) = exp(-dark) / (1 + mu q).
    let p_herald = 1.0 - (-c.dark_rate * ww.duration()).exp() / (1.0 + c.mean_write_excitations * per_photon);
    let rate = heralds as f64 / n as f64;
    assert!((rate - p_herald).abs() < 3.0 * (p_herald / n as f64).sqrt(), "{rate} vs {p_herald}");
    let at_experiment_scale = rate * 3.2e6;
    assert!((at_experiment_scale - 45_000.0).abs() < 0.05 * 45_000.0, "{at_experiment_scale}");
}

#[test]
fn lossless_write_clicks_are_thermal() {
    let c = ExperimentConfig {
        dark_rate: 0.0,
        dead_time: 0.0,
        detection_efficiency: 1.0,
        escape_efficiency: 1.0,
        ..ExperimentConfig::default()
    };
    let ww = default_write_window(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let counts: Vec<u32> = (0..10_000_000).map(|_| ww.count(&sample_write(&c, &mut rng).clicks)).collect();
    let g = g2_auto(&counts).unwrap();
    assert!((g - 2.0).abs() < 0.02, "g2_ww {g}");
}

#[test]
fn noiseless_retrieval_matches_conversion_law() {
    let c = ExperimentConfig { write_read_delay: 100e-6, ..noiseless(0.5, 1.0) };
    let sim = Simulator::new(&c, 3).unwrap();
    let n = 10_000_000u64;
    let counts = sim.counts(0..n, c.write_read_delay, default_write_window(&c), whole_read(&c));
    let mean = counts.iter().map(|w| w.n_r as f64).sum::<f64>() / n as f64;
    let p = ShapeModelParams::from_config(&c, 1.0);
    let conversion = 1.0 - (-p.hazard_integral(0.0, c.read_duration)).exp();
    let stored = c.mean_write_excitations * (-c.write_read_delay / c.spin_wave_lifetime).exp();
    let expected = stored * c.detection_chain() * conversion;
    assert!((mean - expected).abs() < 0.01 * expected, "read mean {mean} vs {expected}");
}

#[test]
fn pair_source_cross_correlation() {
    // Only symmetric photons are detected, so both arms thin a thermal
    // variable of mean mu * eps.
    let (mu, eps) = (0.2, 0.5);
    let c = ExperimentConfig { write_read_delay: 0.0, detection_efficiency: 1.0, escape_efficiency: 1.0, ..noiseless(mu, eps) };
    let sim = Simulator::new(&c, 4).unwrap();
    let counts = sim.counts(0..2_000_000, 0.0, default_write_window(&c), whole_read(&c));
    let r = correlate(&counts, 1.0, Some((200, 5))).unwrap();
    let (g, e) = (r.g2_wr.value.unwrap(), r.g2_wr.stderr.unwrap());
    let expected = 2.0 + 1.0 / (mu * eps);
    assert!((g - expected).abs() < 3.0 * e, "g2_wr {g} +/- {e}, expected {expected}");
}

#[test]
fn heralded_retrieval_is_antibunched_without_noise() {
    // Lossless detection, no pedestal and no read noise: read clicks thin the
    // stored symmetric number, so g2_rr|w equals the factorial-moment ratio
    // of that number given a herald, whatever the thinning.
    let (mu, eps) = (0.23, 0.63);
    let c = ExperimentConfig { detection_efficiency: 1.0, escape_efficiency: 1.0, ..noiseless(mu, eps) };
    let ww = default_write_window(&c);
    let q = capture(&c, ww.end);
    let m = mu * eps;
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for n in 1..400 {
        let nf = n as f64;
        let w = (m / (1.0 + m)).powi(n) * (1.0 - (1.0 - q).powi(n));
        z += w;
        s1 += w * nf;
        s2 += w * nf * (nf - 1.0);
    }
    let expected = (s2 / z) / (s1 / z).powi(2);
    let sim = Simulator::new(&c, 12).unwrap();
    let counts = sim.counts(0..400_000, c.write_read_delay, ww, whole_read(&c));
    let r = correlate(&counts, 1.0, Some((200, 13))).unwrap();
    let (g, e) = (r.g2_rr_given_w.value.unwrap(), r.g2_rr_given_w.stderr.unwrap());
    assert!((g - conditional_g2_rr(&counts).unwrap()).abs() < 1e-12 * g);
    assert!(expected < 0.6 && (g - expected).abs() < 3.0 * e, "g2_rr|w {g} +/- {e}, expected {expected}");
    let unconditional = r.g2_rr.value.unwrap();
    assert!((unconditional - 2.0).abs() < 3.0 * r.g2_rr.stderr.unwrap(), "g2_rr {unconditional}");
}

#[test]
fn read_noise_without_write_matches_expectation() {
    let c = ExperimentConfig::default();
    let sim = Simulator::new(&c, 6).unwrap().without_write();
    let n = 1_000_000u64;
    let counts = sim.counts(0..n, c.write_read_delay, default_write_window(&c), whole_read(&c));
    let mean = counts.iter().map(|w| w.n_r as f64).sum::<f64>() / n as f64;
    let edges = [0.0, c.read_duration];
    let terms = sim.read_model().expected_counts(&edges, 0.0, c.write_read_delay)[0];
    let expected = terms.total() + c.dark_rate * RECORD_TAIL;
    assert!(terms.fwm > 0.0 && terms.leakage > 0.0 && terms.retrieval == 0.0);
    assert!((mean - expected).abs() < 3.0 * (expected / n as f64).sqrt(), "{mean} vs {expected}");
    assert!(counts.iter().all(|w| w.n_w <= 2));
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let c = ExperimentConfig::default();
    let sim = Simulator::new(&c, 9).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sim.run(0..2000, 30e-6))
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a[1234], sim.trial(1234, 30e-6));
    let other = Simulator::new(&c, 10).unwrap().run(0..2000, 30e-6);
    assert_ne!(a, other);
    // A trial does not depend on which range it was generated in.
    assert_eq!(sim.run(1000..1001, 30e-6)[0], a[1000]);
}

#[test]
fn records_round_trip_through_jsonl() {
    let c = ExperimentConfig::default();
    let sim = Simulator::new(&c, 11).unwrap();
    let records = sim.run(0..300, c.write_read_delay);
    let header = sim.header(300, &[c.write_read_delay]);
    let mut buf = Vec::new();
    write_header(&mut buf, &header).unwrap();
    for r in &records {
        write_record(&mut buf, r).unwrap();
    }
    let (h, back) = read_records(buf.as_slice()).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, records);
    assert_eq!(h.config_hash, c.hash());
}
