//! Report emission: turns a run's metrics log into per-metric CSV tables
//! and a JSON summary of final values. Data only — plotting is left to
//! external tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::evals::GenEvalRow;
use super::metrics::{read_metrics, RunDir};
use super::sweeps::{BlockSweepCell, MaskSweepRow};
use crate::error::{Error, Result};

fn fmt_tau(tau: Option<f64>) -> String {
    match tau {
        None => "off".into(),
        Some(v) => format!("{v}"),
    }
}

/// Renders the generation trade-off table (`task,eval_block_size,tau,
/// accuracy,mean_tpf,mean_nfe,mean_refresh,n`).
pub fn gen_table_csv(rows: &[GenEvalRow]) -> String {
    let mut out = String::from("task,eval_block_size,tau,accuracy,mean_tpf,mean_nfe,mean_refresh,n\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.task.name(),
            r.eval_block_size,
            fmt_tau(r.tau),
            r.accuracy,
            r.mean_tpf,
            r.mean_nfe,
            r.mean_refresh,
            r.n
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Writes [`gen_table_csv`] to a file.
pub fn write_gen_table(rows: &[GenEvalRow], path: &Path) -> Result<()> {
    std::fs::write(path, gen_table_csv(rows))?;
    Ok(())
}

/// Renders the block-size sweep matrix in long form.
pub fn block_sweep_csv(cells: &[BlockSweepCell]) -> String {
    let mut out = String::from("train_block,eval_block,accuracy,mean_tpf\n");
    for c in cells {
        writeln!(out, "{},{},{},{}", c.train_block, c.eval_block, c.accuracy, c.mean_tpf)
            .expect("writing to a String cannot fail");
    }
    out
}

/// Writes [`block_sweep_csv`] to a file.
pub fn write_block_sweep(cells: &[BlockSweepCell], path: &Path) -> Result<()> {
    std::fs::write(path, block_sweep_csv(cells))?;
    Ok(())
}

/// Renders the masking-scheme sweep table.
pub fn mask_sweep_csv(rows: &[MaskSweepRow]) -> String {
    let mut out = String::from("scheme,half_life,tau,accuracy,mean_tpf,mean_nfe\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            if r.half_life.is_finite() {
                format!("{}", r.half_life)
            } else {
                "inf".into()
            },
            fmt_tau(r.tau),
            r.accuracy,
            r.mean_tpf,
            r.mean_nfe
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Writes [`mask_sweep_csv`] to a file.
pub fn write_mask_sweep(rows: &[MaskSweepRow], path: &Path) -> Result<()> {
    std::fs::write(path, mask_sweep_csv(rows))?;
    Ok(())
}

/// Splits a run's `metrics.csv` into one tidy `step,index,value` CSV per
/// metric under `report/`, plus `report/summary.json` holding each scalar
/// metric's final value. Returns the written paths.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let run = RunDir::open(run_dir)?;
    let metrics_path = run.file("metrics.csv");
    if !metrics_path.is_file() {
        return Err(Error::Config(format!(
            "{} has no metrics.csv",
            run_dir.display()
        )));
    }
    let rows = read_metrics(&metrics_path)?;
    let report_dir = run.subdir("report")?;

    let mut by_metric: BTreeMap<String, Vec<(usize, Option<usize>, f64)>> = BTreeMap::new();
    for row in &rows {
        by_metric
            .entry(row.metric.clone())
            .or_default()
            .push((row.step, row.index, row.value));
    }

    let mut written = Vec::new();
    let mut summary: Vec<(String, f64)> = Vec::new();
    for (metric, entries) in &by_metric {
        let file_name = format!("{}.csv", metric.replace(['/', '.'], "_"));
        let path = report_dir.join(file_name);
        let mut out = String::from("step,index,value\n");
        for (step, index, value) in entries {
            let index = index.map(|i| i.to_string()).unwrap_or_default();
            writeln!(out, "{step},{index},{value}").expect("writing to a String cannot fail");
        }
        std::fs::write(&path, out)?;
        written.push(path);
        if let Some(last_scalar) = entries.iter().rev().find(|(_, index, _)| index.is_none()) {
            summary.push((metric.clone(), last_scalar.2));
        }
    }

    let summary_path = report_dir.join("summary.json");
    let run_id = rows.first().map(|r| r.run_id.clone()).unwrap_or_default();
    let json = serde_json::json!({
        "run_id": run_id,
        "final": summary
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::json!(v)))
            .collect::<serde_json::Map<String, serde_json::Value>>(),
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&json)?)?;
    written.push(summary_path);
    Ok(written)
}
