//! Per-invocation output directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use slip_core::trainer::{metric_line, MetricRecord};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<parent>/<command>-<timestamp>`, adding a counter on collision.
    pub fn create(parent: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{command}-{stamp}");
        for i in 0.. {
            let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
            let path = parent.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        unreachable!()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.file(CONFIG_FILE);
        fs::write(&p, cfg.to_toml()?).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<PathBuf> {
        let p = self.file(REPORT_FILE);
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn metrics_writer(&self) -> Result<fs::File> {
        let p = self.file(METRICS_FILE);
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .with_context(|| format!("opening {}", p.display()))
    }

    pub fn append_metrics(&self, records: &[MetricRecord]) -> Result<()> {
        let mut f = self.metrics_writer()?;
        for r in records {
            writeln!(f, "{}", metric_line(r))?;
        }
        Ok(())
    }
}
