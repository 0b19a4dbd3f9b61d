use std::fs::File;

use dlcz_core::fits::{ScanKind, ScanPoint};
use dlcz_core::source_sim::{default_write_window, sample_write, RECORD_TAIL};
use dlcz_core::stats::Window;
use dlcz_core::{ExperimentConfig, Simulator};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{CliResult, DataContext};
use crate::manifest::{config_or_default, usage, Recorder};
use crate::units::MHZ;
use crate::ScanArgs;

/// Click total over `pulses` pulses with the filter at `config.filter_detuning`.
fn clicks(config: &ExperimentConfig, kind: ScanKind, pulses: u64, seed: u64) -> CliResult<u64> {
    let ww = default_write_window(config);
    match kind {
        ScanKind::Write => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..pulses).map(|_| ww.count(&sample_write(config, &mut rng).clicks) as u64).sum())
        }
        ScanKind::Read | ScanKind::ReadNoWrite => {
            let mut sim = Simulator::new(config, seed).data(|| "configuration".into())?;
            if kind == ScanKind::ReadNoWrite {
                sim = sim.without_write();
            }
            let rw = Window { start: 0.0, end: config.read_duration + RECORD_TAIL };
            let counts = sim.counts(0..pulses, config.write_read_delay, ww, rw);
            Ok(counts.iter().map(|c| c.n_r as u64).sum())
        }
    }
}

pub fn run(args: &ScanArgs, argv: &[String]) -> CliResult<String> {
    let kind: ScanKind = args.kind.parse().map_err(|e: String| usage(e))?;
    if args.pulses == 0 {
        return Err(usage("--pulses must be at least 1"));
    }
    if args.detunings.is_empty() || args.detunings.iter().any(|d| !d.is_finite()) {
        return Err(usage("--detunings needs finite values"));
    }
    let mut rec = Recorder::start(argv);
    if let Some(path) = &args.config.config {
        rec.input(path);
    }
    let config = config_or_default(&args.config)?;
    let seed = args.seed.unwrap_or(config.rng_master_seed);

    // One independent stream per detuning keeps points uncorrelated and the
    // output independent of the thread count.
    let points: Vec<ScanPoint> = args
        .detunings
        .par_iter()
        .enumerate()
        .map(|(i, &d_mhz)| {
            let c = ExperimentConfig { filter_detuning: d_mhz * MHZ, ..config.clone() };
            let total = clicks(&c, kind, args.pulses, seed.wrapping_add(i as u64))?;
            Ok(ScanPoint::from_totals(c.filter_detuning, total, args.pulses))
        })
        .collect::<CliResult<_>>()?;

    let file = File::create(&args.out).data(|| format!("creating {}", args.out.display()))?;
    let mut w = csv::Writer::from_writer(file);
    for p in &points {
        w.serialize(p).data(|| format!("writing {}", args.out.display()))?;
    }
    w.flush().data(|| format!("writing {}", args.out.display()))?;
    drop(w);

    rec.config = Some(config);
    rec.seed = Some(seed);
    let manifest = rec.finish(&[&args.out])?;
    let peak = points.iter().map(|p| p.counts).fold(0.0, f64::max);
    Ok(format!(
        "scan: {} detunings x {} pulses ({:?}), peak {peak:.4e} counts/pulse -> {} (manifest {})",
        points.len(),
        args.pulses,
        kind,
        args.out.display(),
        manifest.display()
    ))
}
