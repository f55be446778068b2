use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

/// What a command did, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

pub struct Recorder {
    start: Instant,
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Self {
            start: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                config: serde_json::Value::Null,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                wall_time_s: 0.0,
            },
        }
    }

    pub fn config(&mut self, v: impl Serialize) -> &mut Self {
        self.manifest.config = serde_json::to_value(v).expect("config serializes");
        self
    }

    pub fn seed(&mut self, s: u64) -> &mut Self {
        self.manifest.seed = Some(s);
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.manifest.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.manifest.outputs.push(p.to_path_buf());
        self
    }

    /// `dir/run_manifest.json` for directory outputs.
    pub fn finish_in(mut self, dir: &Path) -> Result<PathBuf> {
        self.finish_at(dir.join("run_manifest.json"))
    }

    /// `file.manifest.json` for a single output file.
    pub fn finish_beside(mut self, file: &Path) -> Result<PathBuf> {
        let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        self.finish_at(file.with_file_name(name))
    }

    fn finish_at(&mut self, path: PathBuf) -> Result<PathBuf> {
        self.manifest.wall_time_s = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
