//! Simulation and analysis of a warm-vapour DLCZ-type heralded single-photon
//! source.
//!
//! - [`config`]: experiment parameters, validation and JSON I/O.
//! - [`filter_chain`]: Lorentzian filter cavities and their photon delay.
//! - [`source_sim`]: Monte Carlo click records for write/read trials.
//! - [`stats`]: windowed counts, correlation functions, bootstrap errors.
//! - [`fits`]: read-photon shape model, decay and spectral-scan fits.

pub mod config;
pub mod filter_chain;
pub mod fits;
pub mod source_sim;
pub mod stats;

pub use config::{load_config, load_config_str, validate, CavitySpec, ConfigError, ExperimentConfig, TimeSeries, Violation};
pub use filter_chain::FilterChain;
pub use fits::{FitError, ShapeModelParams};
pub use source_sim::{simulate, SimError, Simulator, SpinWaveState, TrialRecord};
pub use stats::{CorrelationResult, Histogram, StatsError, Window, WindowCounts};
