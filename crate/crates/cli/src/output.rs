// SPDX-License-Identifier: Apache-2.0

//! Everything a run writes: the lock file, reports and the sidecar log.
//!
//! Report files are deterministic. Wall-clock measurements are stripped from
//! them and appended to `run.log` together with timestamps.

use crate::error::CliError;
use serde::Serialize;
use serde_json::{json, Value};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const LOCK_FILE: &str = ".wfad.lock";
pub const LOG_FILE: &str = "run.log";
const TIMING_KEY: &str = "wall_clock_seconds";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    command: String,
    started: SystemTime,
    timings: Vec<(String, f64)>,
}

impl OutputDir {
    pub fn claim(dir: &Path, command: &str) -> Result<OutputDir, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {} command {command}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => return Err(CliError::io(lock, e)),
        }
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            started: SystemTime::now(),
            timings: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `{command, config_hash, report}` as pretty JSON, moving any
    /// wall-clock fields to the sidecar log.
    pub fn write_report<T: Serialize>(
        &mut self,
        name: &str,
        config_hash: &str,
        report: &T,
    ) -> Result<PathBuf, CliError> {
        let mut value = serde_json::to_value(report).map_err(|e| CliError::Data(e.to_string()))?;
        let mut found = Vec::new();
        strip_timings(&mut value, name, &mut found);
        self.timings.extend(found);
        let doc = json!({
            "command": self.command,
            "config_hash": config_hash,
            "report": value,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Appends the run summary to the sidecar log.
    pub fn log(&self, status: &str) {
        let now = SystemTime::now();
        let stamp = now.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let elapsed = now.duration_since(self.started).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut line = format!("{stamp} {} {status} elapsed={elapsed:.3}s", self.command);
        for (what, secs) in &self.timings {
            line.push_str(&format!(" {what}={secs:.3}s"));
        }
        line.push('\n');
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(self.path(LOG_FILE)) {
            let _ = f.write_all(line.as_bytes());
        }
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

fn strip_timings(value: &mut Value, at: &str, found: &mut Vec<(String, f64)>) {
    match value {
        Value::Object(map) => {
            if let Some(v) = map.remove(TIMING_KEY) {
                if let Some(secs) = v.as_f64() {
                    found.push((at.to_string(), secs));
                }
            }
            for (k, v) in map.iter_mut() {
                strip_timings(v, &format!("{at}.{k}"), found);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                strip_timings(v, &format!("{at}[{i}]"), found);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutputDir::claim(dir.path(), "split").unwrap();
        assert!(matches!(
            OutputDir::claim(dir.path(), "split"),
            Err(CliError::Locked(_))
        ));
        drop(first);
        assert!(OutputDir::claim(dir.path(), "split").is_ok());
    }

    #[test]
    fn timings_move_to_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::claim(dir.path(), "train").unwrap();
        let report = json!({"epochs": [1, 2], "wall_clock_seconds": 1.5, "inner": {"wall_clock_seconds": 0.5}});
        let path = out.write_report("r.json", "abc", &report).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(!text.contains(TIMING_KEY));
        assert!(text.contains("\"config_hash\": \"abc\""));
        out.log("ok");
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert!(log.contains("r.json=1.500s") && log.contains("r.json.inner=0.500s"));
    }
}
