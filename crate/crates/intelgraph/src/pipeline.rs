//! The end-to-end batch pipeline: ingest, prune, initialize, propagate,
//! calibrate, score, report.
//!
//! Each batch replays the hourly production job at desk scale: telemetry
//! is applied and pruned, labels are initialized with the train split of
//! the known intel masked, propagation runs to tolerance, a temperature is
//! fit on the validation split, and the held-out test split is scored with
//! calibrated probabilities. Time comes from batch timestamps only, so a
//! config plus seed fully determines every output byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationResult};
use crate::evaluation::{
    self, MetricsReport, PerKindBreakdown, SplitAssignment, Stratum, DEFAULT_MIN_SUPPORT,
};
use crate::graph::{EdgePolicyTable, EntityKind, GraphConfig, IntelGraph, NodeId, NodeLayer};
use crate::labels::{self, BootstrapWeights, KnownIntel, LabelMatrix};
use crate::propagation::{self, PropagationConfig, PropagationResult};
use crate::report::{
    emit_report, write_batch_stats, BatchStatsRow, CalibrationSummary, PropagationSummary,
    ReportFiles, RunReport, ScoreHistograms, SplitCounts,
};
use crate::synth::{PlantedTruth, TruthLabel};
use crate::telemetry::{
    apply_batch, parse_batch, GuideMapping, SignalLedger, TelemetryBatch, TelemetryFormat,
};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationBounds {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for CalibrationBounds {
    fn default() -> Self {
        CalibrationBounds {
            t_min: calibration::DEFAULT_T_MIN,
            t_max: calibration::DEFAULT_T_MAX,
        }
    }
}

/// Run configuration, loaded from JSON. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub telemetry_dir: PathBuf,
    pub telemetry_format: TelemetryFormat,
    pub guide_mapping: Option<PathBuf>,
    pub intel: PathBuf,
    pub truth: Option<PathBuf>,
    pub edge_policy: Option<PathBuf>,
    pub bootstrap_weights: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub propagation: PropagationConfig,
    pub calibration: CalibrationBounds,
    pub split_seed: u64,
    pub batch_hours: f64,
    pub clock_slack_hours: f64,
    pub min_support: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            telemetry_dir: PathBuf::from("telemetry"),
            telemetry_format: TelemetryFormat::Jsonl,
            guide_mapping: None,
            intel: PathBuf::from("intel.json"),
            truth: None,
            edge_policy: None,
            bootstrap_weights: None,
            output_dir: PathBuf::from("run"),
            propagation: PropagationConfig::default(),
            calibration: CalibrationBounds::default(),
            split_seed: 42,
            batch_hours: crate::telemetry::DEFAULT_BATCH_HOURS,
            clock_slack_hours: 0.0,
            min_support: DEFAULT_MIN_SUPPORT,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::config("run config", format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::config("run config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.telemetry_dir = resolve(base, &config.telemetry_dir);
        config.intel = resolve(base, &config.intel);
        config.output_dir = resolve(base, &config.output_dir);
        config.truth = config.truth.map(|p| resolve(base, &p));
        config.edge_policy = config.edge_policy.map(|p| resolve(base, &p));
        config.bootstrap_weights = config.bootstrap_weights.map(|p| resolve(base, &p));
        config.guide_mapping = config.guide_mapping.map(|p| resolve(base, &p));
        Ok(config)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Pipeline failures, tagged by stage and classed for the exit-code
/// contract: config errors exit 2, data errors 3, numeric failures 4.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error [{stage}]: {message}")]
    Config { stage: &'static str, message: String },
    #[error("data error [{stage}]: {message}")]
    Data { stage: &'static str, message: String },
    #[error("numeric error [{stage}]: {message}")]
    Numeric { stage: &'static str, message: String },
}

impl PipelineError {
    pub fn config(stage: &'static str, message: impl ToString) -> Self {
        PipelineError::Config {
            stage,
            message: message.to_string(),
        }
    }
    pub fn data(stage: &'static str, message: impl ToString) -> Self {
        PipelineError::Data {
            stage,
            message: message.to_string(),
        }
    }
    pub fn numeric(stage: &'static str, message: impl ToString) -> Self {
        PipelineError::Numeric {
            stage,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } => 2,
            PipelineError::Data { .. } => 3,
            PipelineError::Numeric { .. } => 4,
        }
    }
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub files: ReportFiles,
    pub batch_stats_path: PathBuf,
    pub scores_path: PathBuf,
    pub batch_rows: Vec<BatchStatsRow>,
}

struct LoadedInputs {
    policies: EdgePolicyTable,
    weights: BootstrapWeights,
    intel: KnownIntel,
    truth: Option<PlantedTruth>,
    mapping: Option<GuideMapping>,
    batch_files: Vec<PathBuf>,
}

fn load_inputs(config: &RunConfig) -> Result<LoadedInputs, PipelineError> {
    let policies = match &config.edge_policy {
        Some(path) => EdgePolicyTable::load(path)
            .map_err(|e| PipelineError::config("edge policy", e))?,
        None => EdgePolicyTable::builtin(),
    };
    let weights = match &config.bootstrap_weights {
        Some(path) => BootstrapWeights::load(path)
            .map_err(|e| PipelineError::config("bootstrap weights", e))?,
        None => BootstrapWeights::default(),
    };
    let mapping = match (&config.telemetry_format, &config.guide_mapping) {
        (TelemetryFormat::GuideCsv, Some(path)) => {
            Some(GuideMapping::load(path).map_err(|e| PipelineError::config("guide mapping", e))?)
        }
        (TelemetryFormat::GuideCsv, None) => {
            return Err(PipelineError::config(
                "guide mapping",
                "guide_csv telemetry needs a guide_mapping file",
            ))
        }
        _ => None,
    };
    let intel =
        labels::load_intel(&config.intel).map_err(|e| PipelineError::data("intel", e))?;
    if intel.is_empty() {
        return Err(PipelineError::data("intel", "known intel file is empty"));
    }
    let truth = config
        .truth
        .as_ref()
        .map(|p| PlantedTruth::load(p))
        .transpose()
        .map_err(|e| PipelineError::data("truth", e))?;

    let ext = match config.telemetry_format {
        TelemetryFormat::Jsonl => "jsonl",
        TelemetryFormat::GuideCsv => "csv",
    };
    let mut batch_files: Vec<PathBuf> = fs::read_dir(&config.telemetry_dir)
        .map_err(|e| {
            PipelineError::data(
                "telemetry",
                format!("{}: {e}", config.telemetry_dir.display()),
            )
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == ext).unwrap_or(false))
        .collect();
    batch_files.sort();
    if batch_files.is_empty() {
        return Err(PipelineError::data(
            "telemetry",
            format!(
                "no .{ext} batch files in {}",
                config.telemetry_dir.display()
            ),
        ));
    }
    Ok(LoadedInputs {
        policies,
        weights,
        intel,
        truth,
        mapping,
        batch_files,
    })
}

/// Per-batch working set: the intel resolved to live nodes per stratum.
struct ResolvedSplit {
    train_scores: BTreeMap<NodeId, f64>,
    validation: Vec<(NodeId, bool)>,
    test: Vec<(NodeId, bool, EntityKind)>,
}

fn resolve_split(
    graph: &IntelGraph,
    intel: &KnownIntel,
    split: &SplitAssignment,
    truth: Option<&PlantedTruth>,
) -> ResolvedSplit {
    let mut resolved = ResolvedSplit {
        train_scores: BTreeMap::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for ((kind, key), &score) in intel {
        let Some(node) = graph.node_by_key(*kind, key) else {
            continue;
        };
        let label = match truth.and_then(|t| t.label_of(*kind, key)) {
            Some(l) => l == TruthLabel::Malicious,
            None => score >= 0.5,
        };
        match split.stratum_of(*kind, key) {
            Some(Stratum::Train) => {
                resolved.train_scores.insert(node.id, score);
            }
            Some(Stratum::Validation) => resolved.validation.push((node.id, label)),
            Some(Stratum::Test) => resolved.test.push((node.id, label, *kind)),
            None => {}
        }
    }
    resolved
}

/// Mean |P(malicious) shift| per entity kind between two label matrices,
/// in percent, over unmasked entity-layer rows.
fn per_kind_shift(
    graph: &IntelGraph,
    before: &LabelMatrix,
    after: &LabelMatrix,
) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<&'static str, (f64, u64)> = BTreeMap::new();
    for i in 0..before.len() {
        if before.mask[i] {
            continue;
        }
        let node = graph.node(before.order[i]).expect("exported node is live");
        if !node.kind.is_entity_layer() {
            continue;
        }
        let d = (after.rows[i][1] - before.rows[i][1]).abs();
        let slot = sums.entry(node.kind.name()).or_insert((0.0, 0));
        slot.0 += d;
        slot.1 += 1;
    }
    sums.into_iter()
        .map(|(kind, (sum, n))| (kind.to_string(), 100.0 * sum / n as f64))
        .collect()
}

struct BatchArtifacts {
    propagation: PropagationResult,
    calibrated: LabelMatrix,
    y0: LabelMatrix,
    fit: CalibrationResult,
    metrics: MetricsReport,
    per_kind: PerKindBreakdown,
    resolved: ResolvedSplit,
}

/// Runs the full pipeline over a prepared graph for one batch snapshot.
fn run_snapshot(
    graph: &IntelGraph,
    ledger: &SignalLedger,
    intel: &KnownIntel,
    split: &SplitAssignment,
    truth: Option<&PlantedTruth>,
    weights: &BootstrapWeights,
    prop_config: &PropagationConfig,
    bounds: &CalibrationBounds,
    min_support: usize,
) -> Result<BatchArtifacts, PipelineError> {
    let now = graph.clock();
    let export = graph.to_sparse(now);
    if export.order.is_empty() {
        return Err(PipelineError::data(
            "export",
            "graph is empty after pruning; nothing to propagate",
        ));
    }
    let resolved = resolve_split(graph, intel, split, truth);

    // Bootstrap evidence is only injected for nodes outside the held-out
    // strata, so validation and test scores come from propagation alone.
    let mut held_out: std::collections::HashSet<NodeId> = std::collections::HashSet::new();
    for (id, _) in &resolved.validation {
        held_out.insert(*id);
    }
    for (id, _, _) in &resolved.test {
        held_out.insert(*id);
    }
    let mut bootstrap = ledger.resolve(graph);
    bootstrap.retain(|id, _| !held_out.contains(id));

    let y0 = labels::initialize_labels(
        graph,
        &export.order,
        &resolved.train_scores,
        &bootstrap,
        weights,
    )
    .map_err(|e| PipelineError::numeric("initialize", e))?;

    // Split leakage guard: held-out nodes must never enter propagation
    // masked.
    for (i, id) in y0.order.iter().enumerate() {
        if y0.mask[i] && held_out.contains(id) {
            return Err(PipelineError::numeric(
                "initialize",
                format!("held-out node {id:?} would be masked"),
            ));
        }
    }

    let a_hat = propagation::degree_normalize(&export.matrix)
        .map_err(|e| PipelineError::numeric("normalize", e))?;
    let propagated = propagation::propagate(&a_hat, &y0, prop_config)
        .map_err(|e| PipelineError::numeric("propagate", e))?;

    let index_of = &export.index_of;
    let val_rows: Vec<[f64; 2]> = resolved
        .validation
        .iter()
        .map(|(id, _)| propagated.labels.rows[index_of[id] as usize])
        .collect();
    let val_labels: Vec<bool> = resolved.validation.iter().map(|(_, l)| *l).collect();
    let fit = calibration::fit_temperature(&val_rows, &val_labels, bounds.t_min, bounds.t_max)
        .map_err(|e| PipelineError::numeric("calibrate", e))?;
    let (calibrated, graph_shift) = calibration::calibrate_graph(&propagated.labels, fit.t_star)
        .map_err(|e| PipelineError::numeric("calibrate", e))?;
    let mut fit = fit;
    fit.mean_abs_score_shift = graph_shift;

    let test_scores: Vec<f64> = resolved
        .test
        .iter()
        .map(|(id, _, _)| calibrated.rows[index_of[id] as usize][1])
        .collect();
    let test_labels: Vec<bool> = resolved.test.iter().map(|(_, l, _)| *l).collect();
    let test_kinds: Vec<EntityKind> = resolved.test.iter().map(|(_, _, k)| *k).collect();
    if test_scores.is_empty() {
        return Err(PipelineError::data(
            "score",
            "no test-split nodes present in the graph",
        ));
    }
    let metrics = evaluation::compute_metrics(&test_scores, &test_labels)
        .map_err(|e| PipelineError::numeric("score", e))?;
    let per_kind = evaluation::per_kind_breakdown(&test_scores, &test_labels, &test_kinds, min_support)
        .map_err(|e| PipelineError::numeric("score", e))?;

    Ok(BatchArtifacts {
        propagation: propagated,
        calibrated,
        y0,
        fit,
        metrics,
        per_kind,
        resolved,
    })
}

/// Runs the multi-batch pipeline and writes all artifacts into the
/// configured output directory.
pub fn run(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    let inputs = load_inputs(config)?;
    let split_keys: Vec<(EntityKind, String)> = inputs.intel.keys().cloned().collect();
    let split = evaluation::split(&split_keys, config.split_seed)
        .map_err(|e| PipelineError::data("split", e))?;

    let mut graph = IntelGraph::with_config(
        inputs.policies.clone(),
        GraphConfig {
            clock_slack_hours: config.clock_slack_hours,
        },
    );
    let mut ledger = SignalLedger::default();
    let mut batch_rows: Vec<BatchStatsRow> = Vec::new();
    let mut last_artifacts: Option<BatchArtifacts> = None;

    for (index, file) in inputs.batch_files.iter().enumerate() {
        let parsed = parse_batch(
            file,
            config.telemetry_format,
            None,
            inputs.mapping.as_ref(),
        )
        .map_err(|e| PipelineError::data("ingest", format!("{}: {e}", file.display())))?;
        let mut batch: TelemetryBatch = parsed.batch;
        if batch.records.is_empty() {
            let start = if graph.clock().hours().is_finite() {
                graph.clock()
            } else {
                Timestamp::from_hours(0.0)
            };
            batch.batch_start = start;
            batch.batch_end = start.plus_hours(config.batch_hours);
        } else {
            let cadence_end = batch.batch_start.plus_hours(config.batch_hours);
            if cadence_end.hours() > batch.batch_end.hours() {
                batch.batch_end = cadence_end;
            }
        }

        let update = apply_batch(&mut graph, &batch, &mut ledger)
            .map_err(|e| PipelineError::data("ingest", format!("{}: {e}", file.display())))?;

        // Materialize train intel into node reputations so graph stats
        // reflect the current knowledge state.
        let resolved_train: Vec<(NodeId, f64)> = inputs
            .intel
            .iter()
            .filter(|((kind, key), _)| {
                split.stratum_of(*kind, key) == Some(Stratum::Train)
                    && graph.node_by_key(*kind, key).is_some()
            })
            .map(|((kind, key), score)| (graph.node_by_key(*kind, key).unwrap().id, *score))
            .collect();
        for (id, score) in resolved_train {
            graph
                .set_reputation(id, score)
                .map_err(|e| PipelineError::numeric("initialize", e))?;
        }

        let artifacts = run_snapshot(
            &graph,
            &ledger,
            &inputs.intel,
            &split,
            inputs.truth.as_ref(),
            &inputs.weights,
            &config.propagation,
            &config.calibration,
            config.min_support,
        )?;

        let stats = graph.stats();
        batch_rows.push(BatchStatsRow {
            batch_index: index,
            batch_end: batch.batch_end.to_rfc3339(),
            records_applied: update.records_applied,
            num_nodes: stats.num_nodes,
            num_edges: stats.num_edges,
            lcc_size: stats.lcc_size,
            num_entities: stats.num_entities,
            f1_macro: artifacts.metrics.f1_macro,
            pr_auc: artifacts.metrics.pr_auc,
            t_star: artifacts.fit.t_star,
            iterations_used: artifacts.propagation.iterations_used,
            converged: artifacts.propagation.converged,
        });
        last_artifacts = Some(artifacts);
    }

    let artifacts = last_artifacts.expect("at least one batch file");
    let stats = graph.stats();

    let per_kind_shift_percent =
        per_kind_shift(&graph, &artifacts.propagation.labels, &artifacts.calibrated);
    let split_counts = SplitCounts {
        train: split.count(Stratum::Train),
        validation: split.count(Stratum::Validation),
        test: split.count(Stratum::Test),
        train_present: artifacts.resolved.train_scores.len(),
        validation_present: artifacts.resolved.validation.len(),
        test_present: artifacts.resolved.test.len(),
    };
    let report = RunReport {
        seed: config.split_seed,
        batches_applied: inputs.batch_files.len(),
        propagation_config: config.propagation,
        graph: stats,
        propagation: PropagationSummary {
            iterations_used: artifacts.propagation.iterations_used,
            converged: artifacts.propagation.converged,
            final_residual: artifacts
                .propagation
                .residual_trace
                .last()
                .copied()
                .unwrap_or(0.0),
        },
        calibration: CalibrationSummary::from_result(&artifacts.fit, per_kind_shift_percent),
        split: split_counts,
        metrics: artifacts.metrics.clone(),
        per_kind: artifacts.per_kind.clone(),
    };

    let histograms = ScoreHistograms::from_stages(
        &artifacts.y0.rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
        &artifacts
            .propagation
            .labels
            .rows
            .iter()
            .map(|r| r[1])
            .collect::<Vec<_>>(),
        &artifacts.calibrated.rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
    );
    let files = emit_report(
        &report,
        &artifacts.propagation.residual_trace,
        &histograms,
        &config.output_dir,
    )
    .map_err(|e| PipelineError::data("report", e))?;

    let batch_stats_path = config.output_dir.join("batch_stats.csv");
    write_batch_stats(&batch_rows, &batch_stats_path)
        .map_err(|e| PipelineError::data("report", e))?;

    // Final calibrated scores for every entity-layer node.
    let mut scores: KnownIntel = BTreeMap::new();
    for (i, id) in artifacts.calibrated.order.iter().enumerate() {
        let node = graph.node(*id).expect("live");
        if node.layer == NodeLayer::Entity || node.layer == NodeLayer::ParentEntity {
            scores.insert(
                (node.kind, node.key.clone()),
                artifacts.calibrated.rows[i][1],
            );
        }
    }
    let scores_path = config.output_dir.join("scores.json");
    labels::save_intel(&scores, &scores_path)
        .map_err(|e| PipelineError::data("report", e))?;

    Ok(RunOutcome {
        report,
        files,
        batch_stats_path,
        scores_path,
        batch_rows,
    })
}

/// Standalone metric computation for externally produced scores against a
/// truth file.
pub fn evaluate_files(
    scores_path: &Path,
    truth_path: &Path,
    min_support: usize,
) -> Result<(MetricsReport, PerKindBreakdown), PipelineError> {
    let scores = labels::load_intel(scores_path)
        .map_err(|e| PipelineError::data("evaluate", e))?;
    let truth = PlantedTruth::load(truth_path)
        .map_err(|e| PipelineError::data("evaluate", e))?;
    let mut s = Vec::new();
    let mut l = Vec::new();
    let mut k = Vec::new();
    for ((kind, key), score) in &scores {
        if let Some(label) = truth.label_of(*kind, key) {
            s.push(*score);
            l.push(label == TruthLabel::Malicious);
            k.push(*kind);
        }
    }
    if s.is_empty() {
        return Err(PipelineError::data(
            "evaluate",
            "scores and truth share no keys",
        ));
    }
    let metrics = evaluation::compute_metrics(&s, &l)
        .map_err(|e| PipelineError::numeric("evaluate", e))?;
    let per_kind = evaluation::per_kind_breakdown(&s, &l, &k, min_support)
        .map_err(|e| PipelineError::numeric("evaluate", e))?;
    Ok((metrics, per_kind))
}
