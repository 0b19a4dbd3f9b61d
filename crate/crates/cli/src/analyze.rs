use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use dlcz_core::source_sim::{default_write_window, read_records, RecordHeader};
use dlcz_core::stats::{correlate, write_correlation_csv, CorrelationRow, Window, WindowCounts};
use dlcz_core::TrialRecord;

use crate::error::{CliResult, DataContext};
use crate::manifest::{resolve_config, usage, Recorder};
use crate::units::us;
use crate::AnalyzeArgs;

pub fn load_records(path: &Path) -> CliResult<(RecordHeader, Vec<TrialRecord>)> {
    let f = File::open(path).data(|| format!("opening {}", path.display()))?;
    let (header, records) = read_records(BufReader::new(f)).data(|| format!("reading {}", path.display()))?;
    if records.is_empty() {
        return Err(anyhow::anyhow!("{} holds no trial records", path.display()).into());
    }
    Ok((header, records))
}

/// Records split by write-read delay, in increasing delay order.
pub fn group_by_delay(records: &[TrialRecord]) -> Vec<(f64, Vec<&TrialRecord>)> {
    let mut groups: Vec<(f64, Vec<&TrialRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(d, _)| *d == r.delay) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.delay, vec![r])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    groups
}

pub fn warn_on_hash_mismatch(header: &RecordHeader, config_hash: &str, path: &Path) {
    if header.config_hash != config_hash {
        eprintln!(
            "dlcz: warning: {} was produced with config {}, analyzing with {}",
            path.display(),
            &header.config_hash[..header.config_hash.len().min(12)],
            &config_hash[..12]
        );
    }
}

pub fn run(args: &AnalyzeArgs, argv: &[String]) -> CliResult<String> {
    if args.bootstrap != 0 && args.bootstrap < 100 {
        return Err(usage("--bootstrap needs 0 or at least 100 resamples"));
    }
    let read_windows: Vec<Window> = match args.read_window {
        Some(w) => vec![w.seconds()],
        None => {
            if args.tau_r.is_empty() || args.tau_r.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(usage("--tau-r values must be positive"));
            }
            args.tau_r.iter().map(|t| Window { start: 0.0, end: us(*t) }).collect()
        }
    };

    let mut rec = Recorder::start(argv);
    rec.input(&args.records);
    if let Some(path) = &args.config.config {
        rec.input(path);
    }
    let config = resolve_config(&args.config, &args.records)?;
    let (header, records) = load_records(&args.records)?;
    warn_on_hash_mismatch(&header, &config.hash(), &args.records);
    let ww = args.write_window.map(|w| w.seconds()).unwrap_or_else(|| default_write_window(&config));
    let eta = config.detection_chain();

    let groups = group_by_delay(&records);
    let mut rows = Vec::with_capacity(groups.len() * read_windows.len());
    for (gi, (delay, group)) in groups.iter().enumerate() {
        for (wi, rw) in read_windows.iter().enumerate() {
            let counts: Vec<WindowCounts> = group
                .iter()
                .map(|r| WindowCounts { n_w: ww.count(&r.write_clicks), n_r: rw.count(&r.read_clicks) })
                .collect();
            let stream = args.bootstrap_seed.wrapping_add((gi * read_windows.len() + wi) as u64);
            let boot = (args.bootstrap > 0).then_some((args.bootstrap, stream));
            let c = correlate(&counts, eta, boot).data(|| format!("delay {delay} s"))?;
            rows.push(CorrelationRow::new(*delay, rw.duration(), (ww.start, ww.end), &c));
        }
    }
    let file = File::create(&args.out).data(|| format!("creating {}", args.out.display()))?;
    write_correlation_csv(file, &rows).data(|| format!("writing {}", args.out.display()))?;

    rec.config = Some(config);
    let manifest = rec.finish(&[&args.out])?;
    let undefined = rows.iter().filter(|r| !r.undefined.is_empty()).count();
    let first = &rows[0];
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
    Ok(format!(
        "analyze: {} row(s) from {} trials, {} with undefined cells; first row R {} g2_wr {} eta_r {} -> {} (manifest {})",
        rows.len(),
        records.len(),
        undefined,
        fmt(first.r),
        fmt(first.g2_wr),
        fmt(first.eta_r),
        args.out.display(),
        manifest.display()
    ))
}
