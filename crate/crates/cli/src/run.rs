//! The per-run manifest written at the end of every command.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;

use crate::cli::Precision;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: &'a [String],
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    seed: u64,
    precision: Option<Precision>,
    code_version: &'static str,
    config: &'a serde_json::Value,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
    started_at: String,
    wall_clock_seconds: f64,
}

pub struct Run {
    pub command: &'static str,
    pub out_dir: PathBuf,
    argv: Vec<String>,
    started: Instant,
    started_unix: i64,
    pub seed: u64,
    pub precision: Option<Precision>,
    pub config: serde_json::Value,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl Run {
    pub fn new(command: &'static str, out_dir: &Path, argv: Vec<String>) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64);
        Self {
            command,
            out_dir: out_dir.to_path_buf(),
            argv,
            started: Instant::now(),
            started_unix,
            seed: 0,
            precision: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input file with its content hash.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let sha256 = crossview::util::sha256_file(path)?;
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Path of an output under the run directory.
    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out_dir.join(rel)
    }

    /// Records an already written output file.
    pub fn output(&mut self, path: &Path) -> Result<()> {
        let sha256 = crossview::util::sha256_file(path)?;
        let shown = path.strip_prefix(&self.out_dir).unwrap_or(path);
        self.outputs.push(FileEntry { path: shown.display().to_string(), sha256 });
        Ok(())
    }

    /// Writes `bytes` to `rel` under the run directory and records it.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out(rel);
        crossview::util::write_atomic(&path, bytes)?;
        self.output(&path)?;
        Ok(path)
    }

    pub fn finish(self, outcome: &Result<()>) -> Result<()> {
        let started_at = chrono::DateTime::from_timestamp(self.started_unix, 0).map(|t| t.to_rfc3339()).unwrap_or_default();
        let m = RunManifest {
            command: self.command,
            argv: &self.argv,
            status: if outcome.is_ok() { "ok" } else { "error" },
            error: outcome.as_ref().err().map(|e| format!("{e:#}")),
            seed: self.seed,
            precision: self.precision,
            code_version: env!("CARGO_PKG_VERSION"),
            config: &self.config,
            inputs: &self.inputs,
            outputs: &self.outputs,
            started_at,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        crossview::util::write_atomic(&self.out_dir.join(RUN_MANIFEST), &bytes)?;
        Ok(())
    }
}
