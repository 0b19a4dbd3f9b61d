use std::fs::File;
use std::io::{BufWriter, Write};

use dlcz_core::source_sim::{default_write_window, write_header, write_record};
use dlcz_core::Simulator;

use crate::error::{CliResult, DataContext};
use crate::manifest::{config_or_default, usage, Recorder};
use crate::units::us;
use crate::SimulateArgs;

/// Trials generated and written per batch.
const CHUNK: u64 = 1 << 16;

pub fn run(args: &SimulateArgs, argv: &[String]) -> CliResult<String> {
    if args.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if args.delays.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(usage("--delays must be finite and non-negative"));
    }
    let mut rec = Recorder::start(argv);
    if let Some(path) = &args.config.config {
        rec.input(path);
    }
    let config = config_or_default(&args.config)?;
    let seed = args.seed.unwrap_or(config.rng_master_seed);
    let delays: Vec<f64> =
        if args.delays.is_empty() { vec![config.write_read_delay] } else { args.delays.iter().map(|d| us(*d)).collect() };

    let mut sim = Simulator::new(&config, seed).data(|| "configuration".into())?;
    if args.no_write {
        sim = sim.without_write();
    }
    let ww = default_write_window(&config);
    let file = File::create(&args.out).data(|| format!("creating {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    write_header(&mut out, &sim.header(args.trials, &delays)).data(|| "writing header".into())?;
    let mut heralds = 0u64;
    for &delay in &delays {
        let mut start = 0;
        while start < args.trials {
            let end = (start + CHUNK).min(args.trials);
            for r in sim.run(start..end, delay) {
                heralds += (ww.count(&r.write_clicks) > 0) as u64;
                write_record(&mut out, &r).data(|| format!("writing {}", args.out.display()))?;
            }
            start = end;
        }
    }
    out.flush().data(|| format!("writing {}", args.out.display()))?;
    drop(out);

    let hash = config.hash();
    rec.config = Some(config);
    rec.seed = Some(seed);
    let manifest = rec.finish(&[&args.out])?;
    let total = args.trials * delays.len() as u64;
    Ok(format!(
        "simulate: {total} trials over {} delay(s), {heralds} heralded -> {} (config {}, seed {seed}, manifest {})",
        delays.len(),
        args.out.display(),
        &hash[..12],
        manifest.display()
    ))
}
