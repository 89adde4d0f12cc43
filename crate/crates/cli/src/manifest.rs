use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What produced the files in an output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config_path: Option<String>,
    /// The config after defaults and overrides were applied.
    pub config: Value,
    pub seeds: Value,
    pub out_dir: String,
    /// Files written next to this manifest.
    pub artifacts: Vec<String>,
    pub timings: Timings,
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub wall_seconds: f64,
}

/// Collects artifacts for one command and writes the manifest last.
pub struct Run {
    started: Instant,
    command: &'static str,
    out: std::path::PathBuf,
    artifacts: Vec<String>,
}

impl Run {
    /// Creates the output directory. Call only once inputs have been read.
    pub fn start(command: &'static str, out: &Path, started: Instant) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))?;
        Ok(Run {
            started,
            command,
            out: out.to_owned(),
            artifacts: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> std::path::PathBuf {
        self.out.join(name)
    }

    pub fn record(&mut self, name: &str) {
        self.artifacts.push(name.to_owned());
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("output serializes");
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(mut self, config_path: Option<&Path>, config: Value, seeds: Value) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config_path: config_path.map(|p| p.display().to_string()),
            config,
            seeds,
            out_dir: self.out.display().to_string(),
            artifacts: std::mem::take(&mut self.artifacts),
            timings: Timings {
                wall_seconds: self.started.elapsed().as_secs_f64(),
            },
        };
        self.write_json(MANIFEST_FILE, &manifest)
    }
}
