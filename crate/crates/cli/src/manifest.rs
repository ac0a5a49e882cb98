use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use pae_core::PaeError;

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Provenance record written once a command has produced all its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seeds: Vec<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seeds,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
        }
    }

    /// Writes to a temporary sibling and renames, so readers never see a
    /// half-written manifest.
    pub fn finish(mut self, path: &Path, outputs: &[PathBuf]) -> Result<(), PaeError> {
        if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
            return Err(PaeError::Contract(format!("listed output {} does not exist", missing.display())));
        }
        self.outputs = outputs.to_vec();
        self.finished_unix = unix_now();
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n";
        fs::write(&tmp, text).map_err(|e| PaeError::Io { path: tmp.clone(), source: e })?;
        fs::rename(&tmp, path).map_err(|e| PaeError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
