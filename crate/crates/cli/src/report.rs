use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::{Level, LevelFilter, Log, Metadata, Record};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// One JSON object per log record on stderr.
struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = json!({
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "msg": record.args().to_string(),
        });
        eprintln!("{line}");
    }

    fn flush(&self) {}
}

pub fn init_logging(level: LevelFilter) {
    // A second call (tests running in-process) keeps the first logger.
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}

pub fn emit_error(kind: &str, msg: &str) {
    let line = json!({ "level": Level::Error.as_str().to_ascii_lowercase(), "kind": kind, "msg": msg });
    eprintln!("{line}");
}

/// Computed metrics plus the reason each skipped metric was skipped.
#[derive(Debug, Default, Serialize)]
pub struct Metrics {
    pub metrics: BTreeMap<String, f64>,
    pub omitted: BTreeMap<String, String>,
}

impl Metrics {
    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn omit(&mut self, name: &str, reason: impl Into<String>) {
        self.omitted.insert(name.to_string(), reason.into());
    }
}

#[derive(Debug, Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    arguments: Value,
    config: Value,
    seed: u64,
    inputs: &'a [InputRecord],
    versions: BTreeMap<&'static str, &'static str>,
    duration_secs: f64,
    outputs: &'a [String],
    summary: Value,
}

/// Tracks inputs and outputs of one run and writes `manifest.json` last.
pub struct Run {
    command: &'static str,
    out_dir: PathBuf,
    started: Instant,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
}

impl Run {
    pub fn new(command: &'static str, out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(Self {
            command,
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Path for an output file; it is listed in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out_dir.join(name)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.output(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        jointscale::io::write_atomic(&path, text.as_bytes())?;
        Ok(())
    }

    pub fn write_lines(&mut self, name: &str, lines: impl IntoIterator<Item = Value>) -> Result<()> {
        let path = self.output(name);
        let mut text = String::new();
        for line in lines {
            text.push_str(&line.to_string());
            text.push('\n');
        }
        jointscale::io::write_atomic(&path, text.as_bytes())?;
        Ok(())
    }

    pub fn finish(self, arguments: &impl Serialize, config: Value, seed: u64, summary: Value) -> Result<()> {
        let mut outputs = self.outputs.clone();
        outputs.push("manifest.json".into());
        let versions = BTreeMap::from([("jointscale", env!("CARGO_PKG_VERSION")), ("manifest_format", "1")]);
        let manifest = Manifest {
            command: self.command,
            argv: std::env::args().collect(),
            arguments: serde_json::to_value(arguments)?,
            config,
            seed,
            inputs: &self.inputs,
            versions,
            duration_secs: self.started.elapsed().as_secs_f64(),
            outputs: &outputs,
            summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        jointscale::io::write_atomic(&self.out_dir.join("manifest.json"), text.as_bytes())?;
        Ok(())
    }
}
