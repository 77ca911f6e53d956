use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use subsel_core::fsutil::write_json_atomic;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: &'static str,
    /// Effective configuration; loadable again through `--config`.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub wall_time_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_used: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_ratio: Option<f64>,
}

pub struct Run {
    command: &'static str,
    started: Instant,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub k_used: Option<usize>,
    pub energy_ratio: Option<f64>,
}

impl Run {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            k_used: None,
            energy_ratio: None,
        }
    }

    pub fn finish(self, dir: &Path) -> subsel_core::Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            workers: rayon::current_num_threads(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            k_used: self.k_used,
            energy_ratio: self.energy_ratio,
        };
        write_json_atomic(&path, &manifest)?;
        Ok(path)
    }
}
