//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary (`harness = false`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use dlcz_core::config::{ExperimentConfig, LeakageCoeffs, TimeSeries};
use dlcz_core::fits::{
    decompose_shape, fit_chi_r, fit_exp_decay, fit_scan, shape_integrate, ChiFitOptions, DecayModel, DecayPoint,
    DifferenceDataset, RetrievalKinetics, ScanKind, ScanModel, ScanPoint, ShapeModelParams,
};
use dlcz_core::source_sim::{default_write_window, heralded_symmetric_mean, sample_write, Simulator};
use dlcz_core::stats::{
    bootstrap, cauchy_schwarz, correct_for_detection, correlate, g2_auto, g2_cross, Histogram, Window,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Poisson};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn us(t: f64) -> f64 {
    t * 1e-6
}

fn criterion_1() -> Outcome {
    let r = cauchy_schwarz(1.86, 1.45, 1.97).map_err(|e| e.to_string())?;
    check((r - 1.439).abs() <= 1e-3, format!("R = {r:.5}"))
}

fn criterion_2() -> Outcome {
    let corrected = correct_for_detection(0.014, 0.096, 0.62).map_err(|e| e.to_string())?;
    let intrinsic: f64 = 0.0155 / 0.096;
    check(
        (corrected - 0.235).abs() < 5e-4 && (corrected - 0.23).abs() < 0.01 && (intrinsic - 0.161).abs() < 5e-4,
        format!("source-side efficiency {corrected:.4}, intrinsic {intrinsic:.4}"),
    )
}

fn criterion_3() -> Outcome {
    let c = ExperimentConfig::default();
    let s = c.filter().relative_suppression(c.zeeman_splitting);
    let total = s * c.polarization_extinction;
    check(
        (6.0e-6..=8.0e-6).contains(&s) && total <= 1e-9,
        format!("filter suppression {s:.3e}, with polarization {total:.3e}"),
    )
}

/// Delay scan shared by criteria 4 and 10.
struct DelayScan {
    delays: Vec<f64>,
    eta_r: Vec<(f64, f64)>,
    g2_wr: Vec<(f64, f64)>,
}

fn delay_scan() -> Result<DelayScan, String> {
    let config = ExperimentConfig::default();
    let ww = default_write_window(&config);
    let rw = Window::new(0.0, us(40.0)).map_err(|e| e.to_string())?;
    // Each delay is an independent run, as in the laboratory.
    let trials = 10_000_000u64;
    let delays: Vec<f64> = (0..12).map(|i| us(10.0 + 490.0 * i as f64 / 11.0)).collect();
    let mut eta_r = Vec::new();
    let mut g2_wr = Vec::new();
    for (i, &d) in delays.iter().enumerate() {
        let sim = Simulator::new(&config, 400 + i as u64).map_err(|e| e.to_string())?;
        let counts = sim.counts(0..trials, d, ww, rw);
        let c = correlate(&counts, config.detection_chain(), Some((200, 100 + i as u64))).map_err(|e| e.to_string())?;
        let pick = |e: dlcz_core::stats::Estimate, name: &str| -> Result<(f64, f64), String> {
            match (e.value, e.stderr) {
                (Some(v), Some(s)) => Ok((v, s)),
                _ => Err(format!("{name} undefined at delay {d}")),
            }
        };
        eta_r.push(pick(c.eta_r, "eta_r")?);
        g2_wr.push(pick(c.g2_wr, "g2_wr")?);
    }
    Ok(DelayScan { delays, eta_r, g2_wr })
}

fn fit_delays(scan: &DelayScan, values: &[(f64, f64)], model: DecayModel) -> Result<(f64, f64), String> {
    let points: Vec<DecayPoint> = scan
        .delays
        .iter()
        .zip(values)
        .map(|(&t, &(value, stderr))| DecayPoint { t, value, stderr })
        .collect();
    let fit = fit_exp_decay(&points, model).map_err(|e| e.to_string())?;
    Ok((fit.tau, fit.tau_stderr))
}

fn criterion_4(scan: &DelayScan) -> Outcome {
    let tau_true = ExperimentConfig::default().spin_wave_lifetime;
    let (tau, err) = fit_delays(scan, &scan.eta_r, DecayModel::Pure)?;
    let rel = (tau - tau_true).abs() / tau_true;
    check(
        (tau - tau_true).abs() <= 3.0 * err && rel < 0.15,
        format!("tau = {:.1} +/- {:.1} us (configured {:.0} us), relative error {:.3}", tau * 1e6, err * 1e6, tau_true * 1e6, rel),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000_000;
    let geo = Geometric::new(0.5).map_err(|e| e.to_string())?;
    let thermal: Vec<u32> = (0..n).map(|_| geo.sample(&mut rng) as u32).collect();
    let pois = Poisson::new(1.0).map_err(|e| e.to_string())?;
    let poisson: Vec<u32> = (0..n).map(|_| pois.sample(&mut rng) as u32).collect();
    let g_th = g2_auto(&thermal).map_err(|e| e.to_string())?;
    let g_po = g2_auto(&poisson).map_err(|e| e.to_string())?;

    // Noiseless pair source: thermal pairs, no pedestal, noise, darks or loss
    // other than finite conversion, which thins both arms independently.
    let mu = 0.1;
    let mut c = ExperimentConfig {
        mean_write_excitations: mu,
        write_efficiency: 1.0,
        pedestal_pass: 0.0,
        dark_rate: 0.0,
        dead_time: 0.0,
        write_read_delay: 0.0,
        detection_efficiency: 1.0,
        escape_efficiency: 1.0,
        leakage_coeffs: LeakageCoeffs { l0: 0.0, l1: 0.0 },
        ..ExperimentConfig::default()
    };
    c.fwm_couplings.alpha_table = TimeSeries::constant(0.0, c.read_duration);
    let sim = Simulator::new(&c, 55).map_err(|e| e.to_string())?;
    let ww = default_write_window(&c);
    let rw = Window::new(0.0, c.read_duration + 1.0).map_err(|e| e.to_string())?;
    let counts = sim.counts(0..2_000_000, 0.0, ww, rw);
    let res = correlate(&counts, 1.0, Some((300, 7))).map_err(|e| e.to_string())?;
    let (g, gerr) = (res.g2_wr.value.unwrap_or(f64::NAN), res.g2_wr.stderr.unwrap_or(f64::NAN));
    let expect = 2.0 + 1.0 / mu;
    check(
        (g_th - 2.0).abs() <= 0.02 && (g_po - 1.0).abs() <= 0.01 && (g - expect).abs() <= 3.0 * gerr,
        format!("thermal {g_th:.4}, Poisson {g_po:.4}, pair source g2_wr {g:.3} +/- {gerr:.3} (expect {expect})"),
    )
}

/// Ordered pairs of distinct clicks that share a trial, over the squared
/// mean, as an exact fraction `(numerator, denominator)`.
fn brute_auto(counts: &[u32]) -> (u64, u64) {
    let clicks: Vec<usize> = counts.iter().enumerate().flat_map(|(t, &n)| std::iter::repeat_n(t, n as usize)).collect();
    let mut pairs = 0u64;
    for (i, a) in clicks.iter().enumerate() {
        for (j, b) in clicks.iter().enumerate() {
            if i != j && a == b {
                pairs += 1;
            }
        }
    }
    let n = counts.len() as u64;
    let total = clicks.len() as u64;
    (pairs * n, total * total)
}

fn brute_cross(w: &[u32], r: &[u32]) -> (u64, u64) {
    let cw: Vec<usize> = w.iter().enumerate().flat_map(|(t, &n)| std::iter::repeat_n(t, n as usize)).collect();
    let cr: Vec<usize> = r.iter().enumerate().flat_map(|(t, &n)| std::iter::repeat_n(t, n as usize)).collect();
    let joint = cw.iter().map(|a| cr.iter().filter(|&b| b == a).count() as u64).sum::<u64>();
    let n = w.len() as u64;
    (joint * n, cw.len() as u64 * cr.len() as u64)
}

fn criterion_6() -> Outcome {
    let a = g2_auto(&[2, 0, 0]).map_err(|e| e.to_string())?;
    let x = g2_cross(&[0, 1, 2], &[1, 0, 1]).map_err(|e| e.to_string())?;
    let (an, ad) = brute_auto(&[2, 0, 0]);
    let (xn, xd) = brute_cross(&[0, 1, 2], &[1, 0, 1]);
    check(
        a == 1.5 && x == 1.0 && a == an as f64 / ad as f64 && x == xn as f64 / xd as f64,
        format!("g2_auto {a} (brute force {an}/{ad}), g2_cross {x} (brute force {xn}/{xd})"),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let pois = Poisson::new(0.1).map_err(|e| e.to_string())?;
    let sample: Vec<f64> = (0..10_000).map(|_| pois.sample(&mut rng)).collect();
    let mean = |xs: &[f64]| Ok(xs.iter().sum::<f64>() / xs.len() as f64);
    let b1 = bootstrap(&sample, mean, 10_000, 1).map_err(|e| e.to_string())?;
    let b2 = bootstrap(&sample, mean, 20_000, 2).map_err(|e| e.to_string())?;
    let analytic = (0.1f64 / 1e4).sqrt();
    let dev = (b1.stderr - analytic).abs() / analytic;
    let change = (b2.stderr - b1.stderr).abs() / b1.stderr;
    check(
        dev < 0.10 && change < 0.05,
        format!("stderr {:.5} vs analytic {analytic:.5} ({dev:.3}), doubled resamples change {change:.4}", b1.stderr),
    )
}

fn noiseless_histogram(sim: &Simulator, edges: &[f64], n_ce: f64, delay: f64, n: u64) -> Histogram {
    let counts = sim
        .read_model()
        .expected_counts(edges, n_ce, delay)
        .iter()
        .map(|t| (t.total() * n as f64).round() as u64)
        .collect();
    Histogram::from_counts(edges.to_vec(), counts, n).expect("valid histogram")
}

fn criterion_8() -> Outcome {
    let config = ExperimentConfig::default();
    let chi_true = config.fwm_couplings.chi_r;
    let delay = config.write_read_delay;
    let decay = (-delay / config.spin_wave_lifetime).exp();
    let ww = default_write_window(&config);
    let n_unconditional = config.mean_write_excitations * config.write_efficiency * decay;
    let n_heralded = heralded_symmetric_mean(&config, ww) * decay;
    let edges: Vec<f64> = (0..=100).map(|i| us(2.0 * i as f64)).collect();
    let fixed = ShapeModelParams::from_config(&config, 0.0);

    // Expected histograms at a very large trial count.
    let sim = Simulator::new(&config, 8).map_err(|e| e.to_string())?;
    let big = 1_000_000_000_000u64;
    let without = noiseless_histogram(&sim, &edges, 0.0, delay, big);
    let noiseless = [
        DifferenceDataset { with_write: noiseless_histogram(&sim, &edges, n_unconditional, delay, big), without_write: without.clone(), n_ce: n_unconditional },
        DifferenceDataset { with_write: noiseless_histogram(&sim, &edges, n_heralded, delay, big), without_write: without, n_ce: n_heralded },
    ];
    let clean = fit_chi_r(&noiseless, &fixed, &ChiFitOptions::default()).map_err(|e| e.to_string())?;
    let clean_rel = (clean.chi_r - chi_true).abs() / chi_true;

    // Simulated histograms at the experiment's trial count.
    let trials = 3_200_000u64;
    let with = sim.histograms(0..trials, delay, &edges, ww);
    let off = Simulator::new(&config, 9).map_err(|e| e.to_string())?.without_write();
    let without = off.histograms(0..trials, delay, &edges, ww).all;
    let noisy = [
        DifferenceDataset { with_write: with.all, without_write: without.clone(), n_ce: n_unconditional },
        DifferenceDataset { with_write: with.heralded, without_write: without, n_ce: n_heralded },
    ];
    let opts = ChiFitOptions { delay_filter: Some(config.filter()), ..ChiFitOptions::default() };
    let fit = fit_chi_r(&noisy, &fixed, &opts).map_err(|e| e.to_string())?;
    let noisy_rel = (fit.chi_r - chi_true).abs() / chi_true;

    let (oracle_rel, oracle_detail) = shape_oracle()?;
    check(
        clean_rel < 0.05 && noisy_rel < 0.15 && oracle_rel <= 1e-8,
        format!(
            "noiseless chi_r {:.2} ({clean_rel:.4}), simulated chi_r {:.1} +/- {:.1} ({noisy_rel:.3}), {oracle_detail}",
            clean.chi_r, fit.chi_r, fit.chi_r_stderr
        ),
    )
}

/// Worst relative gap between `shape_integrate` and closed-form integrals at
/// constant drive, population and alpha.
fn shape_oracle() -> Result<(f64, String), String> {
    let tau_r = us(40.0);
    let mut worst = 0.0f64;
    for &alpha in &[0.0, 0.5, 1.0, 1.7] {
        for kinetics in [RetrievalKinetics::Linear, RetrievalKinetics::SingleConversion] {
            let p = ShapeModelParams {
                chi_r: 110.0,
                alpha: TimeSeries::constant(alpha, us(200.0)),
                omega_sq: TimeSeries::constant(1.0, us(200.0)),
                t1: f64::INFINITY,
                n_ce: 0.8,
                l0: 300.0,
                l1: 2e6,
                background: 10.0,
                efficiency: 0.06,
                kinetics,
            };
            let s = p.chi_r * p.chi_r;
            let k = (alpha * alpha - 1.0) * s;
            let t = tau_r;
            // int_0^t e^{k u} du, and int_0^t (e^{k u} - 1)/k du.
            let (e1, e2) = if k == 0.0 { (t, t * t / 2.0) } else { ((k * t).exp_m1() / k, ((k * t).exp_m1() / k - t) / k) };
            let hazard = s * e1;
            let retrieval = match kinetics {
                RetrievalKinetics::Linear => p.efficiency * p.n_ce * hazard,
                RetrievalKinetics::SingleConversion => p.efficiency * p.n_ce * (1.0 - (-hazard).exp()),
            };
            let fwm = p.efficiency * alpha * alpha * s * s * e2;
            let exact = retrieval + fwm + p.l0 * t + p.l1 * t * t / 2.0 + p.background * t;
            let got = shape_integrate(&p, t).map_err(|e| e.to_string())?;
            worst = worst.max((got - exact).abs() / exact);
        }
    }
    Ok((worst, format!("closed-form gap {worst:.1e}")))
}

fn criterion_9() -> Outcome {
    let config = ExperimentConfig::default();
    let ww = default_write_window(&config);
    let mut detunings: Vec<f64> = (-10..=10).map(|i| 20e3 * i as f64).collect();
    detunings.extend((1..=12).flat_map(|i| [-250e3 * i as f64, 250e3 * i as f64]));
    detunings.sort_by(f64::total_cmp);
    let pulses = 500_000u64;
    let points: Vec<ScanPoint> = detunings
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let c = ExperimentConfig { filter_detuning: d, ..config.clone() };
            let mut rng = ChaCha8Rng::seed_from_u64(900 + i as u64);
            let clicks: u64 = (0..pulses).map(|_| ww.count(&sample_write(&c, &mut rng).clicks) as u64).sum();
            ScanPoint::from_totals(d, clicks, pulses)
        })
        .collect();
    let model = ScanModel::new(config.filter(), config.zeeman_splitting, ScanKind::Write);
    let fit = fit_scan(&model, &points, 1e6).map_err(|e| e.to_string())?;
    check(
        (fit.write_efficiency - config.write_efficiency).abs() <= 0.02,
        format!("write efficiency {:.4} +/- {:.4} (configured {})", fit.write_efficiency, fit.write_efficiency_stderr, config.write_efficiency),
    )
}

fn criterion_10(scan: &DelayScan) -> Outcome {
    let config = ExperimentConfig::default();
    let ww = default_write_window(&config);
    let edges: Vec<f64> = (0..=100).map(|i| us(2.0 * i as f64)).collect();
    let sim = Simulator::new(&config, 10).map_err(|e| e.to_string())?;
    let h = sim.histograms(0..3_200_000, config.write_read_delay, &edges, ww);
    let heralded_rate: f64 = h.heralded.per_trial().iter().sum();
    let unconditional_rate: f64 = h.all.per_trial().iter().sum();

    let decay = (-config.write_read_delay / config.spin_wave_lifetime).exp();
    let params = ShapeModelParams::from_config(&config, heralded_symmetric_mean(&config, ww) * decay);
    let rows = decompose_shape(&params, &h.heralded, Some(&config.filter())).map_err(|e| e.to_string())?;
    let (retrieval, noise) = rows
        .iter()
        .fold((0.0, 0.0), |(r, n), row| (r + row.retrieval, n + row.fwm + row.leakage));

    let (tau, _) = fit_delays(scan, &scan.eta_r, DecayModel::Pure)?;
    let (tau_g, _) = fit_delays(scan, &scan.g2_wr, DecayModel::Offset)?;
    check(
        heralded_rate > unconditional_rate && noise > retrieval && tau_g < tau,
        format!(
            "read clicks heralded {heralded_rate:.4} vs unconditional {unconditional_rate:.4}; FWM + leakage {:.3e} vs retrieval {:.3e} counts/s summed; tau_g {:.0} us vs tau {:.0} us",
            noise,
            retrieval,
            tau_g * 1e6,
            tau * 1e6
        ),
    )
}

fn run(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("criterion {n}: PASS ({secs:.1} s) {d}"),
        Err(d) => println!("criterion {n}: FAIL ({secs:.1} s) {d}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let scan_start = Instant::now();
    let scan = delay_scan();
    println!("delay scan: {:.1} s", scan_start.elapsed().as_secs_f64());
    let with_scan = |f: fn(&DelayScan) -> Outcome| {
        let scan = &scan;
        move || scan.as_ref().map_err(|e| e.clone()).and_then(f)
    };
    let results = [
        run(1, criterion_1),
        run(2, criterion_2),
        run(3, criterion_3),
        run(4, with_scan(criterion_4)),
        run(5, criterion_5),
        run(6, criterion_6),
        run(7, criterion_7),
        run(8, criterion_8),
        run(9, criterion_9),
        run(10, with_scan(criterion_10)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
