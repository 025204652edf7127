//! Run artifacts: the JSON run summary plus CSV tables for metrics,
//! convergence and score distributions.
//!
//! Everything written here is a pure function of the run inputs -- no wall
//! clock, no map iteration order -- so re-running a seeded pipeline
//! produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationResult;
use crate::evaluation::{MetricsReport, PerKindBreakdown};
use crate::graph::GraphStats;
use crate::propagation::PropagationConfig;

pub const HISTOGRAM_BINS: usize = 20;

/// P(malicious) histogram with fixed-width bins over [0, 1]; scores of
/// exactly 1.0 land in the last bin.
pub fn histogram(scores: impl Iterator<Item = f64>, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for s in scores {
        let idx = ((s * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// The three score distributions a run passes through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreHistograms {
    pub bins: usize,
    pub initial: Vec<u64>,
    pub propagated: Vec<u64>,
    pub calibrated: Vec<u64>,
}

impl ScoreHistograms {
    pub fn from_stages(initial: &[f64], propagated: &[f64], calibrated: &[f64]) -> Self {
        ScoreHistograms {
            bins: HISTOGRAM_BINS,
            initial: histogram(initial.iter().copied(), HISTOGRAM_BINS),
            propagated: histogram(propagated.iter().copied(), HISTOGRAM_BINS),
            calibrated: histogram(calibrated.iter().copied(), HISTOGRAM_BINS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSummary {
    pub iterations_used: usize,
    pub converged: bool,
    pub final_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub t_star: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub mean_abs_score_shift: f64,
    /// Mean |shift of P(malicious)| per entity kind, in percent.
    pub per_kind_shift_percent: BTreeMap<String, f64>,
}

impl CalibrationSummary {
    pub fn from_result(
        result: &CalibrationResult,
        per_kind_shift_percent: BTreeMap<String, f64>,
    ) -> Self {
        CalibrationSummary {
            t_star: result.t_star,
            nll_before: result.nll_before,
            nll_after: result.nll_after,
            mean_abs_score_shift: result.mean_abs_score_shift,
            per_kind_shift_percent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub train_present: usize,
    pub validation_present: usize,
    pub test_present: usize,
}

/// One row of the per-batch series (graph size and score quality over
/// simulated time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStatsRow {
    pub batch_index: usize,
    pub batch_end: String,
    pub records_applied: u64,
    pub num_nodes: u64,
    pub num_edges: u64,
    pub lcc_size: u64,
    pub num_entities: u64,
    pub f1_macro: f64,
    pub pr_auc: Option<f64>,
    pub t_star: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Everything one pipeline run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub batches_applied: usize,
    pub propagation_config: PropagationConfig,
    pub graph: GraphStats,
    pub propagation: PropagationSummary,
    pub calibration: CalibrationSummary,
    pub split: SplitCounts,
    pub metrics: MetricsReport,
    pub per_kind: PerKindBreakdown,
}

#[derive(Debug, thiserror::Error)]
#[error("report output {path}: {message}")]
pub struct ReportError {
    pub path: String,
    pub message: String,
}

fn io_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> ReportError + '_ {
    move |e| ReportError {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Paths of the artifacts one run emits.
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub summary_json: PathBuf,
    pub metrics_csv: PathBuf,
    pub residual_trace_csv: PathBuf,
    pub histograms_csv: PathBuf,
}

/// Writes the four run artifacts into `out_dir`:
/// `run_summary.json`, `metrics.csv`, `residual_trace.csv` and
/// `score_histograms.csv`.
pub fn emit_report(
    report: &RunReport,
    residual_trace: &[f64],
    histograms: &ScoreHistograms,
    out_dir: &Path,
) -> Result<ReportFiles, ReportError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let summary_json = out_dir.join("run_summary.json");
    let text = serde_json::to_string_pretty(report).map_err(io_err(&summary_json))?;
    fs::write(&summary_json, text + "\n").map_err(io_err(&summary_json))?;

    let metrics_csv = out_dir.join("metrics.csv");
    {
        let mut f = fs::File::create(&metrics_csv).map_err(io_err(&metrics_csv))?;
        writeln!(
            f,
            "scope,support,positives,negatives,precision_macro,recall_macro,f1_macro,pr_auc,best_threshold,tp,fp,tn,fn"
        )
        .map_err(io_err(&metrics_csv))?;
        let mut write_row = |scope: &str, m: &MetricsReport| -> std::io::Result<()> {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                scope,
                m.support,
                m.positives,
                m.negatives,
                m.precision_macro,
                m.recall_macro,
                m.f1_macro,
                fmt_opt(m.pr_auc),
                m.best_threshold,
                m.confusion.tp,
                m.confusion.fp,
                m.confusion.tn,
                m.confusion.fn_
            )
        };
        write_row("global", &report.metrics).map_err(io_err(&metrics_csv))?;
        for (kind, m) in &report.per_kind.per_kind {
            write_row(kind, m).map_err(io_err(&metrics_csv))?;
        }
    }

    let residual_trace_csv = out_dir.join("residual_trace.csv");
    {
        let mut f = fs::File::create(&residual_trace_csv).map_err(io_err(&residual_trace_csv))?;
        writeln!(f, "iteration,residual").map_err(io_err(&residual_trace_csv))?;
        for (i, r) in residual_trace.iter().enumerate() {
            writeln!(f, "{},{}", i + 1, r).map_err(io_err(&residual_trace_csv))?;
        }
    }

    let histograms_csv = out_dir.join("score_histograms.csv");
    {
        let mut f = fs::File::create(&histograms_csv).map_err(io_err(&histograms_csv))?;
        writeln!(f, "stage,bin,bin_lo,bin_hi,count").map_err(io_err(&histograms_csv))?;
        let width = 1.0 / histograms.bins as f64;
        for (stage, counts) in [
            ("initial", &histograms.initial),
            ("propagated", &histograms.propagated),
            ("calibrated", &histograms.calibrated),
        ] {
            for (bin, count) in counts.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    stage,
                    bin,
                    bin as f64 * width,
                    (bin + 1) as f64 * width,
                    count
                )
                .map_err(io_err(&histograms_csv))?;
            }
        }
    }

    Ok(ReportFiles {
        summary_json,
        metrics_csv,
        residual_trace_csv,
        histograms_csv,
    })
}

/// Writes the per-batch series as CSV.
pub fn write_batch_stats(rows: &[BatchStatsRow], path: &Path) -> Result<(), ReportError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    writeln!(
        f,
        "batch_index,batch_end,records_applied,num_nodes,num_edges,lcc_size,num_entities,f1_macro,pr_auc,t_star,iterations_used,converged"
    )
    .map_err(io_err(path))?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.batch_index,
            r.batch_end,
            r.records_applied,
            r.num_nodes,
            r.num_edges,
            r.lcc_size,
            r.num_entities,
            r.f1_macro,
            fmt_opt(r.pr_auc),
            r.t_star,
            r.iterations_used,
            r.converged
        )
        .map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts() {
        let scores = [0.0, 0.049, 0.5, 0.951, 1.0, 0.33];
        let h = histogram(scores.iter().copied(), HISTOGRAM_BINS);
        assert_eq!(h.iter().sum::<u64>(), scores.len() as u64);
        assert_eq!(h[0], 2); // 0.0 and 0.049
        assert_eq!(h[HISTOGRAM_BINS - 1], 2); // 0.951 and 1.0
    }

    #[test]
    fn histogram_all_mass_at_half() {
        let h = histogram(std::iter::repeat(0.5).take(10), 20);
        assert_eq!(h[10], 10);
        assert_eq!(h.iter().sum::<u64>(), 10);
    }
}
