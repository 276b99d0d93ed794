use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::RunConfig;

/// Provenance of one run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_secs: u64,
    pub duration_secs: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config_path: Option<&Path>, config: &RunConfig) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        ManifestBuilder {
            manifest: RunManifest {
                command: command.into(),
                config_path: config_path.map(Path::to_path_buf),
                config: config.clone(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                seed: None,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                started_unix_secs: started,
                duration_secs: 0.0,
            },
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn finish(mut self) -> RunManifest {
        self.manifest.duration_secs = self.clock.elapsed().as_secs_f64();
        self.manifest
    }
}
