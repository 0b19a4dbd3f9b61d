//! Run manifests: one `<output>.manifest.json` next to every output file.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use dlcz_core::{load_config, ExperimentConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, DataContext};
use crate::ConfigArg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> CliResult<Self> {
        Ok(Self { path: path.display().to_string(), sha256: file_sha256(path)? })
    }
}

/// Everything needed to rerun a command: its arguments, the full
/// configuration it used and the digests of what it read and wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub config_hash: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    /// Unix time at the start of the run, seconds.
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
}

/// Collects manifest fields while a command runs.
pub struct Recorder {
    command: Vec<String>,
    started_unix_s: f64,
    clock: Instant,
    pub config: Option<ExperimentConfig>,
    pub seed: Option<u64>,
    inputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(argv: &[String]) -> Self {
        let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Self {
            command: argv.iter().skip(1).cloned().collect(),
            started_unix_s,
            clock: Instant::now(),
            config: None,
            seed: None,
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Writes the manifest for `outputs`, named after the first of them, and
    /// returns its path.
    pub fn finish(self, outputs: &[&Path]) -> CliResult<PathBuf> {
        let primary = outputs.first().expect("at least one output");
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            config_hash: self.config.as_ref().map(ExperimentConfig::hash),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs.iter().map(|p| FileRef::of(p)).collect::<CliResult<_>>()?,
            outputs: outputs.iter().map(|p| FileRef::of(p)).collect::<CliResult<_>>()?,
            started_unix_s: self.started_unix_s,
            wall_clock_s: self.clock.elapsed().as_secs_f64(),
        };
        let path = manifest_path(primary);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").data(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let f = File::open(path).data(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).data(|| format!("parsing {}", path.display()))
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let mut f = File::open(path).data(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).data(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn load_config_file(path: &Path) -> CliResult<ExperimentConfig> {
    let f = File::open(path).data(|| format!("opening config {}", path.display()))?;
    load_config(BufReader::new(f)).data(|| format!("config {}", path.display()))
}

/// `--config` if given, otherwise the configuration recorded in the manifest
/// of `data` (when there is one), otherwise nominal values.
pub fn resolve_config(arg: &ConfigArg, data: &Path) -> CliResult<ExperimentConfig> {
    if let Some(path) = &arg.config {
        return load_config_file(path);
    }
    let sibling = manifest_path(data);
    if sibling.exists() {
        if let Some(config) = read_manifest(&sibling)?.config {
            return Ok(config);
        }
    }
    Ok(ExperimentConfig::default())
}

pub fn config_or_default(arg: &ConfigArg) -> CliResult<ExperimentConfig> {
    match &arg.config {
        Some(path) => load_config_file(path),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(manifest_path(Path::new("/tmp/run/a.jsonl")), PathBuf::from("/tmp/run/a.jsonl.manifest.json"));
        assert_eq!(manifest_path(Path::new("b.csv")), PathBuf::from("b.csv.manifest.json"));
    }
}
