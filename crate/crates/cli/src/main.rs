//! `dlcz`: simulate click records, analyze correlations, fit models.
//!
//! Durations on the command line are in microseconds and filter detunings in
//! megahertz; files use SI units throughout.

mod analyze;
mod error;
mod fit;
mod manifest;
mod scan;
mod simulate;
mod units;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;
use units::MicroWindow;

#[derive(Parser, Debug)]
#[command(name = "dlcz", version, about = "Heralded single-photon source: simulation and analysis pipeline")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate write/read trials and write JSONL click records.
    Simulate(SimulateArgs),
    /// Correlation statistics per write-read delay and read window.
    Analyze(AnalyzeArgs),
    /// Fit the shape, decay or spectral-scan model.
    Fit(FitArgs),
    /// Simulate a write- or read-photon spectral scan over filter detunings.
    Scan(ScanArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// Experiment configuration (JSON). Omitted fields take nominal values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Trials per write-read delay.
    #[arg(long)]
    pub trials: u64,
    /// Master seed (default: the configuration's).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write-read delays in us, comma separated (default: the configuration's).
    #[arg(long, value_delimiter = ',')]
    pub delays: Vec<f64>,
    /// Leave the write pulse off (background reference run).
    #[arg(long)]
    pub no_write: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Configuration for the detection efficiency; defaults to the one in the
    /// records' manifest, then to nominal.
    #[command(flatten)]
    pub config: ConfigArg,
    /// Write window `A,B` in us (default: write pulse plus record tail).
    #[arg(long)]
    pub write_window: Option<MicroWindow>,
    /// Read window `A,B` in us; overrides --tau-r.
    #[arg(long)]
    pub read_window: Option<MicroWindow>,
    /// Read window lengths in us, comma separated; each gives a window `[0, tau_R)`.
    #[arg(long, value_delimiter = ',', default_value = "40")]
    pub tau_r: Vec<f64>,
    /// Bootstrap resamples for standard errors (0 disables).
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Shape,
    Decay,
    Scan,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[command(flatten)]
    pub config: ConfigArg,
    /// shape: records with the write pulse on.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// shape: records with the write pulse off.
    #[arg(long)]
    pub background: Option<PathBuf>,
    /// shape: histogram bin width in us.
    #[arg(long, default_value_t = 2.0)]
    pub bin_width: f64,
    /// shape: span excluded at each end of the read window, us.
    #[arg(long, default_value_t = 25.0)]
    pub exclude: f64,
    /// shape: write window `A,B` in us for heralding.
    #[arg(long)]
    pub write_window: Option<MicroWindow>,
    /// decay: correlation CSV from `analyze`; scan: CSV from `scan`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// decay: column to fit against `delay_s` (its `_stderr` column gives weights).
    #[arg(long, default_value = "eta_r")]
    pub column: String,
    /// decay: fit `1 + C exp(-t/tau)` instead of `A exp(-t/tau)`.
    #[arg(long)]
    pub offset: bool,
    /// decay: use rows with this read-window length (us) when the table holds several.
    #[arg(long)]
    pub tau_r: Option<f64>,
    /// scan: which photon was scanned.
    #[arg(long, default_value = "write")]
    pub kind: String,
    /// scan: starting pedestal FWHM in MHz.
    #[arg(long, default_value_t = 1.0)]
    pub width_hint: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Filter detunings in MHz, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub detunings: Vec<f64>,
    /// Pulses per detuning.
    #[arg(long)]
    pub pulses: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Count write clicks (`write`) or read clicks (`read`, `read-no-write`).
    #[arg(long, default_value = "write")]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Simulate(a) => simulate::run(&a, &argv),
        Command::Analyze(a) => analyze::run(&a, &argv),
        Command::Fit(a) => fit::run(&a, &argv),
        Command::Scan(a) => scan::run(&a, &argv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dlcz: {e:#}");
            ExitCode::from(e.code())
        }
    }
}
