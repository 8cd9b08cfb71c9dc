//! Run directories and the append-only metrics log.
//!
//! Every run writes into `<output_root>/<run_id>/`: a `config.txt` echo of
//! the resolved configuration, a `metrics.csv` log, checkpoints, and any
//! evaluation tables. The metrics log is a long-format CSV —
//!
//! ```text
//! schema_version,run_id,step,metric,index,value
//! 1,conv-a,10,train_loss,,3.25
//! 1,conv-a,600,loss_profile,3,2.91
//! ```
//!
//! — where `index` is empty for scalars and the element index for vector
//! metrics. Values print in Rust's shortest round-trip float form and no
//! wall-clock data is recorded, so re-running a config reproduces the file
//! byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::error::{Error, Result};

/// Bumped whenever a column changes meaning.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const METRICS_HEADER: &str = "schema_version,run_id,step,metric,index,value";

/// Resolves where run directories live: explicit config value, then the
/// `BLOCKDLM_OUT` environment variable, then `./runs`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(root) = &cfg.output_root {
        return root.clone();
    }
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    PathBuf::from("runs")
}

/// One run's directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates (or reuses) the directory for `cfg` and writes the config
    /// echo into it.
    pub fn create(cfg: &ExperimentConfig) -> Result<RunDir> {
        let path = output_root(cfg).join(&cfg.run_id);
        std::fs::create_dir_all(&path)?;
        std::fs::write(path.join("config.txt"), cfg.echo())?;
        Ok(RunDir { path })
    }

    /// Wraps an existing run directory.
    pub fn open(path: &Path) -> Result<RunDir> {
        if !path.is_dir() {
            return Err(Error::Config(format!(
                "run directory {} does not exist",
                path.display()
            )));
        }
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Creates (if needed) and returns a subdirectory.
    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.path.join(name);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

/// Append-only writer for `metrics.csv`.
pub struct MetricsWriter {
    out: BufWriter<File>,
    run_id: String,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: &str) -> Result<MetricsWriter> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter {
            out,
            run_id: run_id.to_string(),
        })
    }

    fn row(&mut self, step: usize, metric: &str, index: Option<usize>, value: f64) -> Result<()> {
        debug_assert!(
            metric
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '/')),
            "metric name {metric:?} would need CSV quoting"
        );
        let index = index.map(|i| i.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{METRICS_SCHEMA_VERSION},{},{step},{metric},{index},{value}",
            self.run_id
        )?;
        Ok(())
    }

    pub fn scalar(&mut self, step: usize, metric: &str, value: f64) -> Result<()> {
        self.row(step, metric, None, value)
    }

    pub fn vector(&mut self, step: usize, metric: &str, values: &[f64]) -> Result<()> {
        for (i, &v) in values.iter().enumerate() {
            self.row(step, metric, Some(i), v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// One parsed metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub step: usize,
    pub metric: String,
    pub index: Option<usize>,
    pub value: f64,
}

/// Reads a metrics file back; used by report emission and tests.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == METRICS_HEADER => {}
        other => {
            return Err(Error::Config(format!(
                "unexpected metrics header {other:?} in {}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Config(format!(
                "metrics line {}: expected 6 fields, got {}",
                ln + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("metrics line {}: bad {what}", ln + 2));
        let version: u32 = fields[0].parse().map_err(|_| bad("schema version"))?;
        if version != METRICS_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "metrics schema version {version} unsupported (expected {METRICS_SCHEMA_VERSION})"
            )));
        }
        rows.push(MetricsRow {
            run_id: fields[1].to_string(),
            step: fields[2].parse().map_err(|_| bad("step"))?,
            metric: fields[3].to_string(),
            index: if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].parse().map_err(|_| bad("index"))?)
            },
            value: fields[5].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}
