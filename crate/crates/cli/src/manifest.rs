//! Run manifests: everything needed to reproduce a command's outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: &'static str,
    pub seed: Option<u64>,
    /// Resolved configuration, including defaults.
    pub config: BTreeMap<String, serde_json::Value>,
    /// Input path as given, mapped to the SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION"),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("config values serialize");
        self.config.insert(key.to_string(), v);
    }

    pub fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), digest(bytes));
    }
}

pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects output files and writes them, then the manifest and timing
/// record, at the end of a run.
pub struct Outputs {
    files: BTreeMap<String, Vec<u8>>,
    started: Instant,
}

impl Outputs {
    pub fn new() -> Self {
        Self {
            files: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), contents.into());
    }

    pub fn write(self, dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
        let write = |name: &str, bytes: &[u8]| -> Result<(), CliError> {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| CliError::runtime(format!("{}: {e}", parent.display())))?;
            }
            std::fs::write(&path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
        };
        for (name, bytes) in &self.files {
            write(name, bytes)?;
        }
        let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        json.push('\n');
        write("run_manifest.json", json.as_bytes())?;
        let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let timing = serde_json::json!({
            "finished_unix": unix,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        write("run_time.json", format!("{timing:#}\n").as_bytes())
    }
}
