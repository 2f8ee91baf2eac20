//! Run reports. Serialization goes through structs whose field order is
//! the field order you see here, and nothing time- or host-dependent is
//! recorded, so rerunning an identical config rewrites an identical file.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub kind: String,
    pub classes: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArchSummary {
    pub canonical: String,
    pub params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterRow {
    pub threshold: f64,
    pub accuracy_all_pct: f64,
    /// Absent when every sample was discarded.
    pub accuracy_filtered_pct: Option<f64>,
    pub discarded_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GaussianRow {
    pub sigma: f64,
    pub threshold: f64,
    pub accuracy_all_pct: f64,
    pub accuracy_filtered_pct: Option<f64>,
    pub discarded_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRow {
    pub epochs_run: usize,
    /// Absent when early stopping was disabled.
    pub best_dev_accuracy_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleResults {
    pub test_accuracy_pct: f64,
    pub member_test_accuracy_pct: Vec<f64>,
    pub ece: f64,
    pub ece_bins: usize,
    /// Normalized prediction entropy over correctly / wrongly classified
    /// samples; absent for one member or when a subset is empty.
    pub diversity_correct_pct: Option<f64>,
    pub diversity_wrong_pct: Option<f64>,
    pub overhead: f64,
    pub base_params: usize,
    pub member_params: Vec<usize>,
    pub uncertainty_clean: FilterRow,
    pub fgsm_eps: f64,
    pub fgsm_accuracy_pct: f64,
    pub gaussian: Vec<GaussianRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleReport {
    pub label: String,
    pub mode: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub arch: ArchSummary,
    pub members: usize,
    pub p: f64,
    pub lambda: f64,
    pub scope: String,
    pub combine: String,
    pub scaling_loss: Vec<f64>,
    pub kept_per_member: Vec<Vec<usize>>,
    pub training: Vec<TrainRow>,
    pub results: EnsembleResults,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemoryRow {
    pub extra_head_floats: usize,
    pub mask_bits: usize,
    pub mask_bits_per_task: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClReport {
    pub label: String,
    pub mode: String,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub arch: ArchSummary,
    pub tasks: usize,
    pub p: f64,
    pub scope: String,
    pub extraction: String,
    /// Row i holds task-j accuracies measured after training task i;
    /// entries above the diagonal are null.
    pub r_matrix: Vec<Vec<Option<f64>>>,
    pub cl_accuracy: f64,
    pub first_task_drop_pct: f64,
    /// Per task, per prunable layer: claimed neurons as a percentage of
    /// the layer width. Empty for the no-mask baseline.
    pub mask_density_pct: Vec<Vec<f64>>,
    pub memory: MemoryRow,
}

/// Pretty-printed JSON plus a trailing newline, written atomically enough
/// for a single process: rendered fully in memory, then one write call.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// One line per (row, column) pair, `%.6` fixed precision, for sweeps.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Collects every report.json directly in `dir` or one level below and
/// flattens the headline numbers into CSV, one row per report. Fields that
/// a report kind lacks stay blank.
pub fn summarize_dir(dir: &Path) -> Result<String> {
    let mut paths = Vec::new();
    let direct = dir.join("report.json");
    if direct.exists() {
        paths.push(direct);
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_dir() {
            let r = p.join("report.json");
            if r.exists() {
                paths.push(r);
            }
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no report.json under {}", dir.display())));
    }
    let mut rows = String::from("path,label,mode,test_accuracy_pct,cl_accuracy,ece,overhead\n");
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Format {
            path: p.display().to_string(),
            offset: 0,
            msg: e.to_string(),
        })?;
        let s = |o: Option<f64>| o.map(fmt_f64).unwrap_or_default();
        rows.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.display(),
            v["label"].as_str().unwrap_or("?"),
            v["mode"].as_str().unwrap_or("?"),
            s(v["results"]["test_accuracy_pct"].as_f64()),
            s(v["cl_accuracy"].as_f64()),
            s(v["results"]["ece"].as_f64()),
            s(v["results"]["overhead"].as_f64()),
        ));
    }
    Ok(rows)
}
