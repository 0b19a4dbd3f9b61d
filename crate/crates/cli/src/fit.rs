use std::fs::File;
use std::path::{Path, PathBuf};

use dlcz_core::fits::{
    decompose_shape, fit_chi_r, fit_exp_decay, fit_scan, scan_forward, ChiFitOptions, DecayModel, DecayPoint,
    DifferenceDataset, FitReport, ScanKind, ScanModel, ScanParams, ScanPoint,
};
use dlcz_core::source_sim::{default_write_window, heralded_symmetric_mean};
use dlcz_core::stats::read_histogram;
use dlcz_core::{ExperimentConfig, FitError, ShapeModelParams, TrialRecord};
use serde::Serialize;

use crate::analyze::{group_by_delay, load_records, warn_on_hash_mismatch};
use crate::error::{CliError, CliResult, DataContext};
use crate::manifest::{config_or_default, manifest_path, resolve_config, usage, Recorder};
use crate::units::{us, MHZ, US};
use crate::{FitArgs, ModelKind};

#[derive(Serialize)]
struct ReportFile<'a> {
    manifest: String,
    #[serde(flatten)]
    report: &'a FitReport,
}

/// Outcome of one model: the report plus decomposition rows to write.
struct Fitted<R> {
    report: FitReport,
    rows: Vec<R>,
    summary: String,
}

pub fn decomposition_path(out: &Path) -> PathBuf {
    out.with_extension("decomposition.csv")
}

pub fn run(args: &FitArgs, argv: &[String]) -> CliResult<String> {
    let mut rec = Recorder::start(argv);
    if let Some(path) = &args.config.config {
        rec.input(path);
    }
    match args.model {
        ModelKind::Decay => {
            let input = required(&args.input, "--input")?;
            rec.input(input);
            let result = decay(args, input);
            finish(args, rec, "decay", result)
        }
        ModelKind::Shape => {
            let records = required(&args.records, "--records")?;
            let background = required(&args.background, "--background")?;
            rec.input(records);
            rec.input(background);
            let config = resolve_config(&args.config, records)?;
            let result = shape(args, &config, records, background);
            rec.config = Some(config);
            finish(args, rec, "shape", result)
        }
        ModelKind::Scan => {
            let input = required(&args.input, "--input")?;
            rec.input(input);
            let config = config_or_default(&args.config)?;
            let result = scan(args, &config, input);
            rec.config = Some(config);
            finish(args, rec, "scan", result)
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("this model needs {flag}")))
}

/// Writes the report (always) and the decomposition (on success), then the
/// manifest, and maps fit failures to exit codes.
fn finish<R: Serialize>(
    args: &FitArgs,
    rec: Recorder,
    model: &str,
    result: CliResult<Result<Fitted<R>, FitError>>,
) -> CliResult<String> {
    let outcome = result?;
    let report = match &outcome {
        Ok(f) => f.report.clone(),
        Err(e) => FitReport::failed(model, e),
    };
    let file = ReportFile { manifest: manifest_path(&args.out).display().to_string(), report: &report };
    let text = serde_json::to_string_pretty(&file).expect("report serializes");
    std::fs::write(&args.out, text + "\n").data(|| format!("writing {}", args.out.display()))?;
    match outcome {
        Ok(f) => {
            let decomposition = decomposition_path(&args.out);
            let out = File::create(&decomposition).data(|| format!("creating {}", decomposition.display()))?;
            let mut w = csv::Writer::from_writer(out);
            for row in &f.rows {
                w.serialize(row).data(|| format!("writing {}", decomposition.display()))?;
            }
            w.flush().data(|| format!("writing {}", decomposition.display()))?;
            drop(w);
            let manifest = rec.finish(&[&args.out, &decomposition])?;
            Ok(format!("{} -> {} (manifest {})", f.summary, args.out.display(), manifest.display()))
        }
        Err(e) => {
            rec.finish(&[&args.out])?;
            if e.is_convergence() {
                Err(CliError::Convergence(format!("{e}; report kept in {}", args.out.display())))
            } else {
                Err(CliError::Data(anyhow::Error::new(e).context(format!("{model} fit"))))
            }
        }
    }
}

#[derive(Serialize)]
struct DecayRow {
    t_s: f64,
    data: f64,
    stderr: f64,
    model: f64,
    residual: f64,
}

fn column(headers: &csv::StringRecord, name: &str) -> CliResult<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Data(anyhow::anyhow!("input has no '{name}' column")))
}

fn parse_cell(record: &csv::StringRecord, i: usize, line: usize) -> CliResult<Option<f64>> {
    let cell = record.get(i).unwrap_or("").trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).data(|| format!("line {line}: '{cell}'"))
}

fn decay(args: &FitArgs, input: &Path) -> CliResult<Result<Fitted<DecayRow>, FitError>> {
    let mut reader = csv::Reader::from_path(input).data(|| format!("opening {}", input.display()))?;
    let headers = reader.headers().data(|| format!("reading {}", input.display()))?.clone();
    let (ti, vi, ei) = (column(&headers, "delay_s")?, column(&headers, &args.column)?, column(&headers, &format!("{}_stderr", args.column))?);
    let tau_col = headers.iter().position(|h| h == "tau_r_s");

    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.data(|| format!("reading {}", input.display()))?;
        let tau_r = match tau_col {
            Some(i) => parse_cell(&record, i, line)?,
            None => None,
        };
        let t = parse_cell(&record, ti, line)?.ok_or_else(|| CliError::Data(anyhow::anyhow!("line {line}: empty delay_s")))?;
        rows.push((tau_r, t, parse_cell(&record, vi, line)?, parse_cell(&record, ei, line)?));
    }
    let mut windows: Vec<f64> = rows.iter().filter_map(|r| r.0).collect();
    windows.sort_by(f64::total_cmp);
    windows.dedup();
    let selected: Vec<_> = match args.tau_r {
        Some(tau) => rows.into_iter().filter(|r| r.0.is_some_and(|w| (w - us(tau)).abs() <= 1e-9 * us(tau))).collect(),
        None if windows.len() > 1 => return Err(usage("input holds several read windows; pick one with --tau-r")),
        None => rows,
    };
    // Undefined cells carry no information about the decay.
    let points: Vec<DecayPoint> = selected
        .iter()
        .filter_map(|&(_, t, v, e)| Some(DecayPoint { t, value: v?, stderr: e? }))
        .collect();
    let skipped = selected.len() - points.len();
    if skipped > 0 {
        eprintln!("dlcz: skipping {skipped} row(s) with undefined {}", args.column);
    }
    let model = if args.offset { DecayModel::Offset } else { DecayModel::Pure };
    Ok(fit_exp_decay(&points, model).map(|fit| Fitted {
        rows: points
            .iter()
            .map(|p| {
                let m = model.eval(fit.amplitude, fit.tau, p.t);
                DecayRow { t_s: p.t, data: p.value, stderr: p.stderr, model: m, residual: p.value - m }
            })
            .collect(),
        summary: format!(
            "fit decay: tau = {:.1} +/- {:.1} us, amplitude {:.4e}, reduced chi2 {:.2} over {} points",
            fit.tau / US,
            fit.tau_stderr / US,
            fit.amplitude,
            fit.reduced_chi_squared,
            points.len()
        ),
        report: FitReport::from(&fit),
    }))
}

#[derive(Serialize)]
struct ShapeRow {
    delay_s: f64,
    dataset: &'static str,
    t_start: f64,
    t_end: f64,
    data: f64,
    retrieval: f64,
    fwm: f64,
    leakage: f64,
    background: f64,
    noise_offset: f64,
    model: f64,
    residual: f64,
}

fn shape(
    args: &FitArgs,
    config: &ExperimentConfig,
    records_path: &Path,
    background_path: &Path,
) -> CliResult<Result<Fitted<ShapeRow>, FitError>> {
    if !(args.bin_width.is_finite() && args.bin_width > 0.0) {
        return Err(usage("--bin-width must be positive"));
    }
    if !(args.exclude.is_finite() && args.exclude >= 0.0) {
        return Err(usage("--exclude must be non-negative"));
    }
    let (header, records) = load_records(records_path)?;
    let (bg_header, background) = load_records(background_path)?;
    let hash = config.hash();
    warn_on_hash_mismatch(&header, &hash, records_path);
    warn_on_hash_mismatch(&bg_header, &hash, background_path);
    if !header.write_enabled || bg_header.write_enabled {
        return Err(anyhow::anyhow!("--records must have the write pulse on and --background off").into());
    }

    let ww = args.write_window.map(|w| w.seconds()).unwrap_or_else(|| default_write_window(config));
    let n_bins = (config.read_duration / (us(args.bin_width))).floor() as usize;
    if n_bins == 0 {
        return Err(usage("--bin-width exceeds the read pulse"));
    }
    let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 * us(args.bin_width)).collect();
    let thermal = config.mean_write_excitations * config.write_efficiency;
    let heralded = heralded_symmetric_mean(config, ww);
    let bg_groups = group_by_delay(&background);

    let hist = |rs: &[&TrialRecord], herald: bool| {
        let owned: Vec<TrialRecord> =
            rs.iter().filter(|r| !herald || ww.count(&r.write_clicks) > 0).map(|r| (*r).clone()).collect();
        read_histogram(&owned, &edges, |_| true).data(|| "histogram".into())
    };
    let mut sets = Vec::new();
    let mut labels = Vec::new();
    for (delay, group) in group_by_delay(&records) {
        let bg = bg_groups
            .iter()
            .find(|(d, _)| *d == delay)
            .ok_or_else(|| CliError::Data(anyhow::anyhow!("no background records at delay {delay} s")))?;
        let without = hist(&bg.1, false)?;
        let decay = (-delay / config.spin_wave_lifetime).exp();
        for (dataset, herald, n_ce) in [("all", false, thermal * decay), ("heralded", true, heralded * decay)] {
            let with_write = hist(&group, herald)?;
            if with_write.n_trials() == 0 {
                continue;
            }
            sets.push(DifferenceDataset { with_write, without_write: without.clone(), n_ce });
            labels.push((delay, dataset));
        }
    }

    let fixed = ShapeModelParams::from_config(config, 0.0);
    let filter = config.filter();
    let opts = ChiFitOptions { exclude_edges: us(args.exclude), delay_filter: Some(filter.clone()), ..ChiFitOptions::default() };
    let fit = match fit_chi_r(&sets, &fixed, &opts) {
        Ok(f) => f,
        Err(e) => return Ok(Err(e)),
    };
    let mut rows = Vec::new();
    for (set, &(delay, dataset)) in sets.iter().zip(&labels) {
        let params = ShapeModelParams { chi_r: fit.chi_r, n_ce: set.n_ce, ..fixed.clone() };
        let parts = match decompose_shape(&params, &set.with_write, Some(&filter)) {
            Ok(p) => p,
            Err(e) => return Ok(Err(e)),
        };
        rows.extend(parts.into_iter().map(|p| ShapeRow {
            delay_s: delay,
            dataset,
            t_start: p.t_start,
            t_end: p.t_end,
            data: p.data,
            retrieval: p.retrieval,
            fwm: p.fwm,
            leakage: p.leakage,
            background: p.background,
            noise_offset: p.noise_offset,
            model: p.model,
            residual: p.residual,
        }));
    }
    Ok(Ok(Fitted {
        rows,
        summary: format!(
            "fit shape: chi_r = {:.1} +/- {:.1} s^-1/2, reduced chi2 {:.2} over {} bins in {} dataset(s)",
            fit.chi_r,
            fit.chi_r_stderr,
            fit.reduced_chi_squared,
            fit.bins_used,
            sets.len()
        ),
        report: FitReport::from(&fit),
    }))
}

#[derive(Serialize)]
struct ScanRow {
    detuning_hz: f64,
    data: f64,
    stderr: f64,
    peak: f64,
    pedestal: f64,
    leakage: f64,
    background: f64,
    model: f64,
    residual: f64,
}

pub fn read_scan_points(input: &Path) -> CliResult<Vec<ScanPoint>> {
    let mut reader = csv::Reader::from_path(input).data(|| format!("opening {}", input.display()))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(k, r)| r.data(|| format!("{} line {}", input.display(), k + 2)))
        .collect()
}

fn scan(args: &FitArgs, config: &ExperimentConfig, input: &Path) -> CliResult<Result<Fitted<ScanRow>, FitError>> {
    let kind: ScanKind = args.kind.parse().map_err(|e: String| usage(e))?;
    if !(args.width_hint.is_finite() && args.width_hint > 0.0) {
        return Err(usage("--width-hint must be positive"));
    }
    let points = read_scan_points(input)?;
    let model = ScanModel::new(config.filter(), config.zeeman_splitting, kind);
    let fit = match fit_scan(&model, &points, args.width_hint * MHZ) {
        Ok(f) => f,
        Err(e) => return Ok(Err(e)),
    };
    let p = fit.params();
    let only = |q: ScanParams, d: f64| scan_forward(&model, &q, d);
    let zero = ScanParams { peak_amplitude: 0.0, pedestal_amplitude: 0.0, leakage_amplitude: 0.0, background: 0.0, ..p };
    let rows = points
        .iter()
        .map(|pt| {
            let m = scan_forward(&model, &p, pt.detuning);
            ScanRow {
                detuning_hz: pt.detuning,
                data: pt.counts,
                stderr: pt.stderr,
                peak: only(ScanParams { peak_amplitude: p.peak_amplitude, ..zero }, pt.detuning),
                pedestal: only(ScanParams { pedestal_amplitude: p.pedestal_amplitude, ..zero }, pt.detuning),
                leakage: only(ScanParams { leakage_amplitude: p.leakage_amplitude, ..zero }, pt.detuning),
                background: p.background,
                model: m,
                residual: pt.counts - m,
            }
        })
        .collect();
    Ok(Ok(Fitted {
        rows,
        summary: format!(
            "fit scan: write efficiency {:.4} +/- {:.4}, pedestal FWHM {:.2} MHz, reduced chi2 {:.2} over {} points",
            fit.write_efficiency,
            fit.write_efficiency_stderr,
            fit.pedestal_width / MHZ,
            fit.reduced_chi_squared,
            points.len()
        ),
        report: FitReport::from(&fit),
    }))
}
