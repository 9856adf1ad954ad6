use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pianet_core::data::write_text;
use pianet_core::{Error, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub outputs: Vec<PathBuf>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub version: &'static str,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        *self.timings.entry(phase.into()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    pub fn path_in(dir: &Path, command: &str) -> PathBuf {
        dir.join(format!("{command}.manifest.json"))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path_in(dir, &self.command);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))?;
        write_text(&path, &(text + "\n"))?;
        Ok(path)
    }
}
