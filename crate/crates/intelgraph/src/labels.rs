//! Reputation initialization: the label matrix Y(0), bootstrap scoring
//! from cross-organizational signals, and the high-confidence
//! classification thresholds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{EntityKind, IntelGraph, NodeId, NodeLayer};

/// Classification thresholds: scores at or above this are malicious...
pub const MALICIOUS_THRESHOLD: f64 = 0.9;
/// ...and scores at or below this are benign.
pub const BENIGN_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Malicious,
    Benign,
    Unknown,
}

/// Maps a reputation score to its verdict. Boundary-inclusive on both
/// thresholds.
pub fn classify(score: f64) -> Result<Verdict, LabelError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(LabelError::ScoreOutOfRange(score));
    }
    Ok(if score >= MALICIOUS_THRESHOLD {
        Verdict::Malicious
    } else if score <= BENIGN_THRESHOLD {
        Verdict::Benign
    } else {
        Verdict::Unknown
    })
}

/// N x 2 row-stochastic label matrix. Row i is
/// `[P(benign), P(malicious)]` for node `order[i]`; masked rows are
/// high-confidence labels frozen during propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub order: Vec<NodeId>,
    pub rows: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
}

impl LabelMatrix {
    /// Builds from per-row P(malicious) scores, deriving rows and mask.
    pub fn from_scores(order: Vec<NodeId>, scores: &[f64]) -> Result<Self, LabelError> {
        assert_eq!(order.len(), scores.len());
        let mut rows = Vec::with_capacity(scores.len());
        let mut mask = Vec::with_capacity(scores.len());
        for &s in scores {
            if !(0.0..=1.0).contains(&s) {
                return Err(LabelError::ScoreOutOfRange(s));
            }
            rows.push([1.0 - s, s]);
            mask.push(s >= MALICIOUS_THRESHOLD || s <= BENIGN_THRESHOLD);
        }
        Ok(LabelMatrix { order, rows, mask })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn p_malicious(&self, i: usize) -> f64 {
        self.rows[i][1]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Cross-organizational evidence counts for one entity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapSignals {
    pub orgs_true_positive: u64,
    pub products_flagging: u64,
    pub unique_detectors: u64,
    pub alerts_linked: u64,
    pub orgs_observing: u64,
    pub tp_graded_alerts: u64,
    pub fp_or_bp_graded_alerts: u64,
}

impl BootstrapSignals {
    pub fn is_zero(&self) -> bool {
        *self == BootstrapSignals::default()
    }
}

/// Factor weights for the bootstrap aggregation. The first six factors
/// raise the score, the last lowers it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapWeights {
    pub orgs_true_positive: f64,
    pub products_flagging: f64,
    pub unique_detectors: f64,
    pub alerts_linked: f64,
    pub orgs_observing: f64,
    pub tp_graded_alerts: f64,
    pub fp_or_bp_graded_alerts: f64,
}

impl Default for BootstrapWeights {
    fn default() -> Self {
        BootstrapWeights {
            orgs_true_positive: 0.3,
            products_flagging: 0.2,
            unique_detectors: 0.2,
            alerts_linked: 0.15,
            orgs_observing: 0.15,
            tp_graded_alerts: 0.3,
            fp_or_bp_graded_alerts: 0.5,
        }
    }
}

impl BootstrapWeights {
    pub fn validate(&self) -> Result<(), LabelError> {
        let ws = [
            self.orgs_true_positive,
            self.products_flagging,
            self.unique_detectors,
            self.alerts_linked,
            self.orgs_observing,
            self.tp_graded_alerts,
            self.fp_or_bp_graded_alerts,
        ];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(LabelError::InvalidWeights);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabelError::Io(path.display().to_string(), e.to_string()))?;
        let weights: BootstrapWeights = serde_json::from_str(&text)
            .map_err(|e| LabelError::Io(path.display().to_string(), e.to_string()))?;
        weights.validate()?;
        Ok(weights)
    }
}

/// Composite reputation from aggregated signals: a logistic over
/// log-compressed factor counts. Zero evidence lands exactly on 0.5;
/// malicious factors saturate the score upward, graded false/benign
/// positives pull it down.
pub fn bootstrap_score(signals: &BootstrapSignals, weights: &BootstrapWeights) -> f64 {
    let up = weights.orgs_true_positive * ln1p_count(signals.orgs_true_positive)
        + weights.products_flagging * ln1p_count(signals.products_flagging)
        + weights.unique_detectors * ln1p_count(signals.unique_detectors)
        + weights.alerts_linked * ln1p_count(signals.alerts_linked)
        + weights.orgs_observing * ln1p_count(signals.orgs_observing)
        + weights.tp_graded_alerts * ln1p_count(signals.tp_graded_alerts);
    let down = weights.fp_or_bp_graded_alerts * ln1p_count(signals.fp_or_bp_graded_alerts);
    logistic(up - down)
}

fn ln1p_count(x: u64) -> f64 {
    (x as f64).ln_1p()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Known intelligence: high-confidence scores keyed by (kind, key).
pub type KnownIntel = BTreeMap<(EntityKind, String), f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntelRecord {
    pub kind: EntityKind,
    pub key: String,
    pub score: f64,
}

pub fn load_intel(path: &Path) -> Result<KnownIntel, LabelError> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabelError::Io(path.display().to_string(), e.to_string()))?;
    let records: Vec<IntelRecord> = serde_json::from_str(&text)
        .map_err(|e| LabelError::Io(path.display().to_string(), e.to_string()))?;
    let mut intel = KnownIntel::new();
    for r in records {
        if !(0.0..=1.0).contains(&r.score) {
            return Err(LabelError::ScoreOutOfRange(r.score));
        }
        intel.insert((r.kind, IntelGraph::canonical_key(&r.key)), r.score);
    }
    Ok(intel)
}

pub fn save_intel(intel: &KnownIntel, path: &Path) -> Result<(), LabelError> {
    let records: Vec<IntelRecord> = intel
        .iter()
        .map(|((kind, key), score)| IntelRecord {
            kind: *kind,
            key: key.clone(),
            score: *score,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records)
        .map_err(|e| LabelError::Io(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| LabelError::Io(path.display().to_string(), e.to_string()))
}

/// Builds Y(0) over `order`:
/// alerts keep their stored reputation (0.5, or 1.0 once disrupted),
/// incidents inherit the highest score among their alerts, organizations
/// start unknown, and entities take known intel, then bootstrap evidence,
/// then 0.5.
pub fn initialize_labels(
    graph: &IntelGraph,
    order: &[NodeId],
    known_intel: &BTreeMap<NodeId, f64>,
    bootstrap: &BTreeMap<NodeId, BootstrapSignals>,
    weights: &BootstrapWeights,
) -> Result<LabelMatrix, LabelError> {
    weights.validate()?;
    for (&id, &score) in known_intel {
        if graph.node(id).is_none() {
            return Err(LabelError::UnknownNode(id));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(LabelError::ScoreOutOfRange(score));
        }
    }

    let mut scores = vec![0.5f64; order.len()];
    // First pass: everything except incidents.
    for (i, &id) in order.iter().enumerate() {
        let node = graph.node(id).ok_or(LabelError::UnknownNode(id))?;
        scores[i] = match node.layer {
            NodeLayer::Alert => {
                if let Some(&s) = known_intel.get(&id) {
                    s
                } else {
                    node.reputation
                }
            }
            NodeLayer::Organization | NodeLayer::Incident => {
                known_intel.get(&id).copied().unwrap_or(0.5)
            }
            NodeLayer::Entity | NodeLayer::ParentEntity => {
                if let Some(&s) = known_intel.get(&id) {
                    s
                } else if let Some(signals) = bootstrap.get(&id) {
                    if signals.is_zero() {
                        0.5
                    } else {
                        bootstrap_score(signals, weights)
                    }
                } else {
                    0.5
                }
            }
        };
    }
    // Second pass: incidents inherit the max over their alert neighbors.
    for (i, &id) in order.iter().enumerate() {
        let node = graph.node(id).expect("checked above");
        if node.layer != NodeLayer::Incident || known_intel.contains_key(&id) {
            continue;
        }
        let mut best: Option<f64> = None;
        for edge in graph.incident_edges(id) {
            let other = if edge.src == id { edge.dst } else { edge.src };
            let neighbor = graph.node(other).expect("edge endpoints live");
            if neighbor.layer != NodeLayer::Alert {
                continue;
            }
            let s = known_intel.get(&other).copied().unwrap_or(neighbor.reputation);
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
        if let Some(s) = best {
            scores[i] = s;
        }
    }

    LabelMatrix::from_scores(order.to_vec(), &scores)
}

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("known intel references node {0:?} which is not in the graph")]
    UnknownNode(NodeId),
    #[error("bootstrap weights must be nonnegative finite reals")]
    InvalidWeights,
    #[error("intel file {0}: {1}")]
    Io(String, String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgePolicyTable, EntityKind::*};
    use crate::time::Timestamp;

    fn t(h: f64) -> Timestamp {
        Timestamp::from_hours(h)
    }

    #[test]
    fn classify_thresholds_are_inclusive() {
        assert_eq!(classify(0.9).unwrap(), Verdict::Malicious);
        assert_eq!(classify(0.1).unwrap(), Verdict::Benign);
        assert_eq!(classify(0.5).unwrap(), Verdict::Unknown);
        assert_eq!(classify(0.899999).unwrap(), Verdict::Unknown);
        assert!(classify(1.2).is_err());
        assert!(classify(-0.1).is_err());
        assert!(classify(f64::NAN).is_err());
    }

    #[test]
    fn bootstrap_neutral_on_zero_evidence() {
        let s = bootstrap_score(&BootstrapSignals::default(), &BootstrapWeights::default());
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_heavy_evidence_crosses_malicious_threshold() {
        let signals = BootstrapSignals {
            orgs_true_positive: 10,
            products_flagging: 3,
            unique_detectors: 5,
            alerts_linked: 50,
            orgs_observing: 12,
            tp_graded_alerts: 40,
            fp_or_bp_graded_alerts: 0,
        };
        let s = bootstrap_score(&signals, &BootstrapWeights::default());
        assert!(s >= 0.9, "expected >= 0.9, got {s}");
    }

    #[test]
    fn bootstrap_fp_dominated_crosses_benign_threshold() {
        let signals = BootstrapSignals {
            fp_or_bp_graded_alerts: 100,
            ..Default::default()
        };
        let s = bootstrap_score(&signals, &BootstrapWeights::default());
        assert!(s <= 0.1, "expected <= 0.1, got {s}");
    }

    fn chain_graph() -> (IntelGraph, Vec<NodeId>) {
        // org - incident - alert1/alert2 - sha1
        let mut g = IntelGraph::new(EdgePolicyTable::builtin());
        let org = g.upsert_node(OrgId, "org-1", t(0.0)).unwrap();
        let inc = g.upsert_node(IncidentId, "inc-1", t(0.0)).unwrap();
        let a1 = g.upsert_node(AlertId, "al-1", t(0.0)).unwrap();
        let a2 = g.upsert_node(AlertId, "al-2", t(0.0)).unwrap();
        let sha = g.upsert_node(Sha1, "aabb", t(0.0)).unwrap();
        g.add_edge(org, inc, t(0.0)).unwrap();
        g.add_edge(inc, a1, t(0.0)).unwrap();
        g.add_edge(inc, a2, t(0.0)).unwrap();
        g.add_edge(a1, sha, t(0.0)).unwrap();
        (g, vec![org, inc, a1, a2, sha])
    }

    #[test]
    fn incident_inherits_max_alert_score() {
        let (mut g, ids) = chain_graph();
        // a2 disrupted
        g.set_reputation(ids[3], 1.0).unwrap();
        let order: Vec<NodeId> = g.to_sparse(t(0.0)).order;
        let y0 = initialize_labels(
            &g,
            &order,
            &BTreeMap::new(),
            &BTreeMap::new(),
            &BootstrapWeights::default(),
        )
        .unwrap();
        let inc_pos = order.iter().position(|&id| id == ids[1]).unwrap();
        assert_eq!(y0.p_malicious(inc_pos), 1.0);
        assert!(y0.mask[inc_pos]);
    }

    #[test]
    fn unknown_entity_is_unmasked_half() {
        let (g, ids) = chain_graph();
        let order = g.to_sparse(t(0.0)).order;
        let y0 = initialize_labels(
            &g,
            &order,
            &BTreeMap::new(),
            &BTreeMap::new(),
            &BootstrapWeights::default(),
        )
        .unwrap();
        let sha_pos = order.iter().position(|&id| id == ids[4]).unwrap();
        assert_eq!(y0.rows[sha_pos], [0.5, 0.5]);
        assert!(!y0.mask[sha_pos]);
    }

    #[test]
    fn intel_masks_confident_entities() {
        let (g, ids) = chain_graph();
        let order = g.to_sparse(t(0.0)).order;
        let mut intel = BTreeMap::new();
        intel.insert(ids[4], 0.95);
        let y0 = initialize_labels(
            &g,
            &order,
            &intel,
            &BTreeMap::new(),
            &BootstrapWeights::default(),
        )
        .unwrap();
        let sha_pos = order.iter().position(|&id| id == ids[4]).unwrap();
        assert!((y0.rows[sha_pos][0] - 0.05).abs() < 1e-12);
        assert!((y0.rows[sha_pos][1] - 0.95).abs() < 1e-12);
        assert!(y0.mask[sha_pos]);
    }

    #[test]
    fn intel_for_missing_node_errors() {
        let (g, _) = chain_graph();
        let order = g.to_sparse(t(0.0)).order;
        let mut intel = BTreeMap::new();
        intel.insert(NodeId(999), 0.95);
        let err = initialize_labels(
            &g,
            &order,
            &intel,
            &BTreeMap::new(),
            &BootstrapWeights::default(),
        );
        assert!(matches!(err, Err(LabelError::UnknownNode(_))));
    }

    #[test]
    fn rows_are_stochastic_and_mask_matches_thresholds() {
        let (mut g, ids) = chain_graph();
        g.set_reputation(ids[3], 1.0).unwrap();
        let order = g.to_sparse(t(0.0)).order;
        let mut intel = BTreeMap::new();
        intel.insert(ids[4], 0.07);
        let y0 = initialize_labels(
            &g,
            &order,
            &intel,
            &BTreeMap::new(),
            &BootstrapWeights::default(),
        )
        .unwrap();
        for i in 0..y0.len() {
            let sum = y0.rows[i][0] + y0.rows[i][1];
            assert!((sum - 1.0).abs() <= 1e-9);
            let verdict = classify(y0.p_malicious(i)).unwrap();
            assert_eq!(y0.mask[i], verdict != Verdict::Unknown);
        }
    }
}
