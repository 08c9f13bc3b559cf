//! Markdown summary of a finished run directory.

use std::fmt::Write as _;
use std::path::Path;

use crate::metrics::MetricReport;
use crate::training::read_loss_log;
use crate::{Error, Result};

pub const SUMMARY_FILE: &str = "summary.md";
/// Evaluation output looked up inside a run directory.
pub const METRICS_FILE: &str = "metrics.json";

/// Trailing window used for the smoothed loss column.
const LOSS_WINDOW: usize = 100;

/// Builds the summary text. Requires `config.json` and a nonempty
/// `losses.csv`; metrics and sample grids are included when present.
pub fn summarize(run_dir: &Path) -> Result<String> {
    let incomplete = |reason: &str| Error::IncompleteRun {
        path: run_dir.to_path_buf(),
        reason: reason.to_string(),
    };
    let cfg_path = run_dir.join("config.json");
    if !cfg_path.exists() {
        return Err(incomplete("missing config.json"));
    }
    let log_path = run_dir.join("losses.csv");
    if !log_path.exists() {
        return Err(incomplete("missing losses.csv"));
    }
    let cfg_text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config: serde_json::Value = serde_json::from_str(&cfg_text)?;
    let log = read_loss_log(&log_path)?;
    let Some((last_step, last)) = log.last() else {
        return Err(incomplete("losses.csv has no rows"));
    };

    let mut out = String::new();
    writeln!(out, "# Run summary\n").unwrap();
    writeln!(out, "Steps completed: {last_step}\n").unwrap();

    writeln!(out, "## Configuration\n\n```json\n{}\n```\n", serde_json::to_string_pretty(&config)?).unwrap();

    let window = &log[log.len().saturating_sub(LOSS_WINDOW)..];
    writeln!(out, "## Final losses\n").unwrap();
    writeln!(out, "| term | last step | mean of last {} |", window.len()).unwrap();
    writeln!(out, "|---|---:|---:|").unwrap();
    for (name, v) in last {
        let mean = window.iter().map(|(_, r)| r[name]).sum::<f64>() / window.len() as f64;
        writeln!(out, "| {name} | {v:.6} | {mean:.6} |").unwrap();
    }
    writeln!(out).unwrap();

    let metrics_path = run_dir.join(METRICS_FILE);
    writeln!(out, "## Metrics\n").unwrap();
    if metrics_path.exists() {
        let report = MetricReport::load(&metrics_path)?;
        writeln!(out, "Checkpoint: `{}`\n", report.checkpoint_hash).unwrap();
        writeln!(out, "| metric | value |").unwrap();
        writeln!(out, "|---|---:|").unwrap();
        for (name, v) in &report.metrics {
            writeln!(out, "| {name} | {v:.6} |").unwrap();
        }
        if !report.seeds.is_empty() {
            let seeds: Vec<String> = report.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
            writeln!(out, "\nSeeds: {}", seeds.join(", ")).unwrap();
        }
    } else {
        writeln!(out, "No evaluation recorded (`{METRICS_FILE}` absent).").unwrap();
    }
    writeln!(out).unwrap();

    writeln!(out, "## Sample grids\n").unwrap();
    let samples = run_dir.join("samples");
    let mut grids: Vec<(u64, String)> = Vec::new();
    if samples.is_dir() {
        for entry in std::fs::read_dir(&samples).map_err(|e| Error::io(&samples, e))? {
            let name = entry.map_err(|e| Error::io(&samples, e))?.file_name().to_string_lossy().into_owned();
            if let Some(step) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".png")) {
                if let Ok(step) = step.parse() {
                    grids.push((step, name));
                }
            }
        }
    }
    grids.sort();
    if grids.is_empty() {
        writeln!(out, "None written.").unwrap();
    }
    for (_, name) in grids {
        writeln!(out, "- samples/{name}").unwrap();
    }
    Ok(out)
}

/// Writes [`summarize`] output to `run_dir/summary.md`.
pub fn write_summary(run_dir: &Path) -> Result<std::path::PathBuf> {
    let text = summarize(run_dir)?;
    let path = run_dir.join(SUMMARY_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
