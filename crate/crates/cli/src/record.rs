use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// What one command run consumed and produced.
#[derive(Debug, Serialize)]
pub struct ExperimentManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Hex SHA-256 of `config` in its JSON form.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub parallel: bool,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("json value");
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects manifest fields while a command runs.
pub struct RunRecord {
    command: String,
    config: serde_json::Value,
    parallel: bool,
    started: SystemTime,
    clock: Instant,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord {
    pub fn new(command: &str, config: &impl Serialize, parallel: bool) -> Self {
        RunRecord {
            command: command.into(),
            config: serde_json::to_value(config).expect("plain config"),
            parallel,
            started: SystemTime::now(),
            clock: Instant::now(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn finish(self, path: &Path) -> Result<ExperimentManifest, CliError> {
        let m = ExperimentManifest {
            config_hash: config_hash(&self.config),
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            parallel: self.parallel,
            started_unix_s: self.started.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
        };
        crate::write_json(path, &m)?;
        Ok(m)
    }
}
