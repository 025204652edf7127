//! Telemetry parsing and incremental graph updates.
//!
//! Telemetry arrives as batches of alert records (JSON lines, or CSV via a
//! column-mapping adapter). Applying a batch upserts the org / incident /
//! alert / entity chain, derives parent-entity links (file directory, email
//! sender and cluster, URL domain, IP /24 range), accumulates
//! cross-organizational grading signals, and prunes at the batch end.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{EntityKind, GraphError, IntelGraph, NodeId, NodeLayer, PruneReport};
use crate::labels::BootstrapSignals;
use crate::time::Timestamp;

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.01;
pub const DEFAULT_BATCH_HOURS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AlertGrade {
    TruePositive,
    FalsePositive,
    BenignPositive,
    #[default]
    Ungraded,
}

/// Attributes of one piece of evidence that are observed alongside it and
/// feed parent derivation (a file's directory, an email's sender and
/// clusters). Domains and IP ranges are derived from the key itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email_address: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub email_clusters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub kind: EntityKind,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<EvidenceContext>,
}

/// One normalized alert observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    #[serde(with = "rfc3339_hours")]
    pub timestamp: Timestamp,
    pub org_key: String,
    pub incident_key: String,
    pub alert_key: String,
    #[serde(default)]
    pub alert_disrupted: bool,
    #[serde(default)]
    pub evidence: Vec<EvidenceItem>,
    #[serde(default, skip_serializing_if = "is_ungraded")]
    pub alert_grade: AlertGrade,
}

fn is_ungraded(g: &AlertGrade) -> bool {
    *g == AlertGrade::Ungraded
}

mod rfc3339_hours {
    use super::Timestamp;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        Timestamp::parse_rfc3339(&raw).map_err(serde::de::Error::custom)
    }
}

/// A timestamped batch of records, ordered by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryBatch {
    pub batch_start: Timestamp,
    pub batch_end: Timestamp,
    pub records: Vec<TelemetryRecord>,
}

/// Outcome of parsing one batch file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedBatch {
    pub batch: TelemetryBatch,
    pub rows_total: usize,
    pub rows_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TelemetryFormat {
    Jsonl,
    GuideCsv,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("telemetry file {0}: {1}")]
    Io(String, String),
    #[error("batch rejected: {skipped} of {total} rows malformed")]
    Rejected { skipped: usize, total: usize },
    #[error("batch ending {batch_end:?} precedes graph clock {clock:?}")]
    OutOfOrderBatch { batch_end: f64, clock: f64 },
    #[error("evidence kind {0} is not an entity-layer kind")]
    InvalidEvidenceKind(EntityKind),
    #[error("record field {0} is empty")]
    EmptyField(&'static str),
    #[error("column mapping: {0}")]
    BadMapping(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn validate_record(record: &TelemetryRecord) -> Result<(), IngestError> {
    for (name, value) in [
        ("org_key", &record.org_key),
        ("incident_key", &record.incident_key),
        ("alert_key", &record.alert_key),
    ] {
        if value.trim().is_empty() {
            return Err(IngestError::EmptyField(name));
        }
    }
    for item in &record.evidence {
        if item.kind.layer() != NodeLayer::Entity {
            return Err(IngestError::InvalidEvidenceKind(item.kind));
        }
        if item.key.trim().is_empty() {
            return Err(IngestError::EmptyField("evidence key"));
        }
    }
    Ok(())
}

fn assemble_batch(
    mut records: Vec<TelemetryRecord>,
    rows_total: usize,
    mut rows_skipped: usize,
    window: Option<(Timestamp, Timestamp)>,
) -> Result<ParsedBatch, IngestError> {
    if let Some((start, end)) = window {
        let before = records.len();
        records.retain(|r| r.timestamp >= start && r.timestamp < end);
        rows_skipped += before - records.len();
    }
    if rows_total > 0 && rows_skipped * 2 > rows_total {
        return Err(IngestError::Rejected {
            skipped: rows_skipped,
            total: rows_total,
        });
    }
    records.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
    let (batch_start, batch_end) = match window {
        Some(w) => w,
        None => {
            if records.is_empty() {
                (Timestamp::from_hours(0.0), Timestamp::from_hours(0.0))
            } else {
                let start = records.first().unwrap().timestamp;
                // Exclusive end: nudge one second past the last record.
                let end = records.last().unwrap().timestamp.plus_hours(1.0 / 3600.0);
                (start, end)
            }
        }
    };
    Ok(ParsedBatch {
        batch: TelemetryBatch {
            batch_start,
            batch_end,
            records,
        },
        rows_total,
        rows_skipped,
    })
}

/// Parses one batch file. Malformed rows are counted and skipped; a batch
/// with more than half its rows malformed is rejected. When `window` is
/// given, records outside `[start, end)` count as malformed; otherwise the
/// window is derived from the record timestamps.
pub fn parse_batch(
    path: &Path,
    format: TelemetryFormat,
    window: Option<(Timestamp, Timestamp)>,
    guide_mapping: Option<&GuideMapping>,
) -> Result<ParsedBatch, IngestError> {
    match format {
        TelemetryFormat::Jsonl => parse_jsonl(path, window),
        TelemetryFormat::GuideCsv => {
            let mapping = guide_mapping.ok_or_else(|| {
                IngestError::BadMapping("guide_csv format needs a column mapping".into())
            })?;
            parse_guide_csv(path, mapping, window)
        }
    }
}

fn parse_jsonl(
    path: &Path,
    window: Option<(Timestamp, Timestamp)>,
) -> Result<ParsedBatch, IngestError> {
    let file =
        File::open(path).map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut rows_total = 0usize;
    let mut rows_skipped = 0usize;
    for line in reader.lines() {
        let line =
            line.map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        rows_total += 1;
        match serde_json::from_str::<TelemetryRecord>(&line) {
            Ok(record) if validate_record(&record).is_ok() => records.push(record),
            _ => rows_skipped += 1,
        }
    }
    assemble_batch(records, rows_total, rows_skipped, window)
}

/// Writes a batch back out as JSON lines (one record per line).
pub fn write_batch_jsonl(batch: &TelemetryBatch, path: &Path) -> Result<(), IngestError> {
    let mut file = File::create(path)
        .map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
    for record in &batch.records {
        let line = serde_json::to_string(record)
            .map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
        writeln!(file, "{line}")
            .map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
    }
    Ok(())
}

/// Column mapping for CSV telemetry exports. Scalar fields name the source
/// column; evidence columns each map a column to an entity kind (non-empty
/// cells become evidence items).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuideMapping {
    pub timestamp: String,
    /// strftime format; RFC 3339 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_format: Option<String>,
    pub org_key: String,
    pub incident_key: String,
    pub alert_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert_disrupted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alert_grade: Option<String>,
    pub evidence: Vec<GuideEvidenceColumn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuideEvidenceColumn {
    pub kind: EntityKind,
    pub column: String,
}

impl GuideMapping {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
        serde_json::from_str(&text)
            .map_err(|e| IngestError::BadMapping(format!("{}: {e}", path.display())))
    }
}

fn parse_grade(raw: &str) -> AlertGrade {
    match raw.trim().to_ascii_lowercase().as_str() {
        "truepositive" | "tp" | "true positive" => AlertGrade::TruePositive,
        "falsepositive" | "fp" | "false positive" => AlertGrade::FalsePositive,
        "benignpositive" | "bp" | "benign positive" => AlertGrade::BenignPositive,
        _ => AlertGrade::Ungraded,
    }
}

fn parse_guide_csv(
    path: &Path,
    mapping: &GuideMapping,
    window: Option<(Timestamp, Timestamp)>,
) -> Result<ParsedBatch, IngestError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| IngestError::Io(path.display().to_string(), e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::BadMapping(format!("column '{name}' not in header")))
    };
    let ts_col = col(&mapping.timestamp)?;
    let org_col = col(&mapping.org_key)?;
    let inc_col = col(&mapping.incident_key)?;
    let alert_col = col(&mapping.alert_key)?;
    let disrupted_col = mapping
        .alert_disrupted
        .as_deref()
        .map(col)
        .transpose()?;
    let grade_col = mapping.alert_grade.as_deref().map(col).transpose()?;
    let evidence_cols: Vec<(EntityKind, usize)> = mapping
        .evidence
        .iter()
        .map(|e| col(&e.column).map(|i| (e.kind, i)))
        .collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut rows_total = 0usize;
    let mut rows_skipped = 0usize;
    for row in reader.records() {
        let row = match row {
            Ok(r) => r,
            Err(_) => {
                rows_total += 1;
                rows_skipped += 1;
                continue;
            }
        };
        rows_total += 1;
        let cell = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let ts = match &mapping.timestamp_format {
            Some(fmt) => Timestamp::parse_with_format(&cell(ts_col), fmt),
            None => Timestamp::parse_rfc3339(&cell(ts_col)),
        };
        let Ok(timestamp) = ts else {
            rows_skipped += 1;
            continue;
        };
        let record = TelemetryRecord {
            timestamp,
            org_key: cell(org_col),
            incident_key: cell(inc_col),
            alert_key: cell(alert_col),
            alert_disrupted: disrupted_col
                .map(|i| matches!(cell(i).to_ascii_lowercase().as_str(), "true" | "1" | "yes"))
                .unwrap_or(false),
            evidence: evidence_cols
                .iter()
                .filter(|(_, i)| !cell(*i).is_empty())
                .map(|(kind, i)| EvidenceItem {
                    kind: *kind,
                    key: cell(*i),
                    context: None,
                })
                .collect(),
            alert_grade: grade_col.map(|i| parse_grade(&cell(i))).unwrap_or_default(),
        };
        if validate_record(&record).is_ok() {
            records.push(record);
        } else {
            rows_skipped += 1;
        }
    }
    assemble_batch(records, rows_total, rows_skipped, window)
}

/// What one batch application changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub records_applied: u64,
    pub nodes_added: u64,
    pub nodes_refreshed: u64,
    pub edges_added: u64,
    pub edges_refreshed: u64,
    /// Edge-creation events per kind pair (refreshes excluded).
    pub edges_added_by_kind: BTreeMap<String, u64>,
    pub prune: PruneReport,
}

/// Accumulated grading evidence per entity, kept across batches and
/// resolved to node ids on demand.
#[derive(Debug, Clone, Default)]
pub struct SignalLedger {
    per_entity: HashMap<(EntityKind, String), EntitySignals>,
}

#[derive(Debug, Clone, Default)]
struct EntitySignals {
    orgs_true_positive: BTreeSet<String>,
    orgs_observing: BTreeSet<String>,
    alerts_linked: u64,
    tp_graded_alerts: u64,
    fp_or_bp_graded_alerts: u64,
}

impl SignalLedger {
    fn observe(&mut self, kind: EntityKind, key: &str, org: &str, grade: AlertGrade) {
        let entry = self
            .per_entity
            .entry((kind, key.to_string()))
            .or_default();
        entry.alerts_linked += 1;
        entry.orgs_observing.insert(org.to_string());
        match grade {
            AlertGrade::TruePositive => {
                entry.tp_graded_alerts += 1;
                entry.orgs_true_positive.insert(org.to_string());
            }
            AlertGrade::FalsePositive | AlertGrade::BenignPositive => {
                entry.fp_or_bp_graded_alerts += 1;
            }
            AlertGrade::Ungraded => {}
        }
    }

    pub fn signals(&self, kind: EntityKind, key: &str) -> Option<BootstrapSignals> {
        let key = IntelGraph::canonical_key(key);
        self.per_entity.get(&(kind, key)).map(|e| BootstrapSignals {
            orgs_true_positive: e.orgs_true_positive.len() as u64,
            products_flagging: 0,
            unique_detectors: 0,
            alerts_linked: e.alerts_linked,
            orgs_observing: e.orgs_observing.len() as u64,
            tp_graded_alerts: e.tp_graded_alerts,
            fp_or_bp_graded_alerts: e.fp_or_bp_graded_alerts,
        })
    }

    /// Signals for every graded entity still live in the graph.
    pub fn resolve(&self, graph: &IntelGraph) -> BTreeMap<NodeId, BootstrapSignals> {
        let mut out = BTreeMap::new();
        for ((kind, key), entry) in &self.per_entity {
            if entry.tp_graded_alerts == 0 && entry.fp_or_bp_graded_alerts == 0 {
                continue;
            }
            if let Some(node) = graph.node_by_key(*kind, key) {
                out.insert(
                    node.id,
                    self.signals(*kind, key).expect("entry exists"),
                );
            }
        }
        out
    }
}

/// Derived parent keys for one evidence item.
fn derived_parents(item: &EvidenceItem) -> Vec<(EntityKind, String)> {
    let mut parents = Vec::new();
    match item.kind {
        EntityKind::Sha1 => {
            if let Some(dir) = item.context.as_ref().and_then(|c| c.file_dir.as_deref()) {
                if !dir.trim().is_empty() {
                    parents.push((EntityKind::FileDir, dir.to_string()));
                }
            }
        }
        EntityKind::EmailId => {
            if let Some(ctx) = &item.context {
                if let Some(addr) = ctx.email_address.as_deref() {
                    if !addr.trim().is_empty() {
                        parents.push((EntityKind::EmailAddress, addr.to_string()));
                    }
                }
                for cluster in &ctx.email_clusters {
                    if !cluster.trim().is_empty() {
                        parents.push((EntityKind::EmailCluster, cluster.clone()));
                    }
                }
            }
        }
        EntityKind::Url => {
            if let Some(domain) = url_domain(&item.key) {
                parents.push((EntityKind::UrlDomain, domain));
            }
        }
        EntityKind::IpAddress => {
            if let Some(range) = ip_slash24(&item.key) {
                parents.push((EntityKind::IpRange, range));
            }
        }
        _ => {}
    }
    parents
}

/// Host portion of a URL, lower-cased. Tolerates scheme-less keys.
pub fn url_domain(raw: &str) -> Option<String> {
    let raw = raw.trim();
    let parsed = url::Url::parse(raw)
        .ok()
        .filter(|u| u.host_str().is_some())
        .or_else(|| url::Url::parse(&format!("http://{raw}")).ok());
    parsed
        .and_then(|u| u.host_str().map(|h| h.to_lowercase()))
        .filter(|h| !h.is_empty())
}

/// The /24 network containing an IPv4 address, e.g. `1.2.3.4` -> `1.2.3.0/24`.
pub fn ip_slash24(raw: &str) -> Option<String> {
    let ip: std::net::Ipv4Addr = raw.trim().parse().ok()?;
    let o = ip.octets();
    Some(format!("{}.{}.{}.0/24", o[0], o[1], o[2]))
}

/// Applies one batch: upserts the org/incident/alert/entity chain, links
/// derived parents, marks disrupted alerts, then prunes at the batch end.
/// Batches must arrive in order; record timestamps are clamped to the
/// graph clock so replays cannot move time backwards.
pub fn apply_batch(
    graph: &mut IntelGraph,
    batch: &TelemetryBatch,
    ledger: &mut SignalLedger,
) -> Result<UpdateReport, IngestError> {
    if graph.clock().hours().is_finite() && batch.batch_end.hours() < graph.clock().hours() {
        return Err(IngestError::OutOfOrderBatch {
            batch_end: batch.batch_end.hours(),
            clock: graph.clock().hours(),
        });
    }
    for record in &batch.records {
        validate_record(record)?;
    }

    let mut report = UpdateReport::default();
    for record in &batch.records {
        let now = if graph.clock().hours().is_finite() {
            Timestamp::from_hours(record.timestamp.hours().max(graph.clock().hours()))
        } else {
            record.timestamp
        };

        let org = upsert_counted(graph, EntityKind::OrgId, &record.org_key, now, &mut report)?;
        let incident = upsert_counted(
            graph,
            EntityKind::IncidentId,
            &record.incident_key,
            now,
            &mut report,
        )?;
        let alert = upsert_counted(
            graph,
            EntityKind::AlertId,
            &record.alert_key,
            now,
            &mut report,
        )?;
        link_counted(graph, org, incident, now, &mut report)?;
        link_counted(graph, incident, alert, now, &mut report)?;
        if record.alert_disrupted {
            graph.set_reputation(alert, 1.0)?;
        }

        for item in &record.evidence {
            let entity = upsert_counted(graph, item.kind, &item.key, now, &mut report)?;
            link_counted(graph, alert, entity, now, &mut report)?;
            ledger.observe(
                item.kind,
                &IntelGraph::canonical_key(&item.key),
                &IntelGraph::canonical_key(&record.org_key),
                record.alert_grade,
            );
            for (parent_kind, parent_key) in derived_parents(item) {
                let parent = upsert_counted(graph, parent_kind, &parent_key, now, &mut report)?;
                link_counted(graph, entity, parent, now, &mut report)?;
            }
        }
        report.records_applied += 1;
    }

    graph.advance_to(batch.batch_end)?;
    report.prune = graph.prune(batch.batch_end, DEFAULT_PRUNE_THRESHOLD);
    Ok(report)
}

fn upsert_counted(
    graph: &mut IntelGraph,
    kind: EntityKind,
    key: &str,
    now: Timestamp,
    report: &mut UpdateReport,
) -> Result<NodeId, IngestError> {
    let existed = graph.node_by_key(kind, key).is_some();
    let id = graph.upsert_node(kind, key, now)?;
    if existed {
        report.nodes_refreshed += 1;
    } else {
        report.nodes_added += 1;
    }
    Ok(id)
}

fn link_counted(
    graph: &mut IntelGraph,
    a: NodeId,
    b: NodeId,
    now: Timestamp,
    report: &mut UpdateReport,
) -> Result<(), IngestError> {
    let existed = graph.edge_between(a, b).is_some();
    let eid = graph.add_edge(a, b, now)?;
    if existed {
        report.edges_refreshed += 1;
    } else {
        report.edges_added += 1;
        let pair = graph.edge(eid).expect("edge just added").pair;
        *report.edges_added_by_kind.entry(pair.label()).or_insert(0) += 1;
    }
    Ok(())
}
