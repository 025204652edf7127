//! Ground-truth splitting and classification metrics.
//!
//! Splits are a deterministic function of (node key, seed): keys are
//! ranked by a stable 64-bit hash and cut 70/10/20, so the same inputs
//! land in the same stratum on every platform and run. Metrics follow the
//! usual imbalanced-data conventions: macro-averaged precision, recall
//! and F1 over the two classes, and a micro (pooled) PR-AUC integrated
//! step-wise over the distinct-score operating points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::EntityKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stratum {
    Train,
    Validation,
    Test,
}

/// Deterministic per-key stratum assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub strata: BTreeMap<(EntityKind, String), Stratum>,
}

impl SplitAssignment {
    pub fn stratum_of(&self, kind: EntityKind, key: &str) -> Option<Stratum> {
        self.strata.get(&(kind, key.to_string())).copied()
    }

    pub fn count(&self, stratum: Stratum) -> usize {
        self.strata.values().filter(|&&s| s == stratum).count()
    }
}

/// FNV-1a over (kind, key) mixed with the seed, finished with a
/// splitmix64 avalanche. Stable across platforms and releases.
pub(crate) fn stable_hash(kind: &str, key: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in kind.bytes().chain(std::iter::once(0x1f)).chain(key.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Splits ground-truth keys 70/10/20 into train / validation / test.
/// Requires at least 10 keys so every stratum is populated.
pub fn split(
    keys: &[(EntityKind, String)],
    seed: u64,
) -> Result<SplitAssignment, EvalError> {
    let n = keys.len();
    if n < 10 {
        return Err(EvalError::TooFewNodes { got: n, need: 10 });
    }
    let mut ranked: Vec<(u64, &(EntityKind, String))> = keys
        .iter()
        .map(|k| (stable_hash(k.0.name(), &k.1, seed), k))
        .collect();
    ranked.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let train_end = n * 7 / 10;
    let val_end = n * 8 / 10;
    let mut strata = BTreeMap::new();
    for (rank, (_, key)) in ranked.into_iter().enumerate() {
        let stratum = if rank < train_end {
            Stratum::Train
        } else if rank < val_end {
            Stratum::Validation
        } else {
            Stratum::Test
        };
        strata.insert(key.clone(), stratum);
    }
    Ok(SplitAssignment { seed, strata })
}

/// Confusion counts at a fixed threshold (malicious = positive).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn rate(num: u64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision_malicious(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fp)
    }

    pub fn recall_malicious(&self) -> f64 {
        Self::rate(self.tp, self.tp + self.fn_)
    }

    pub fn precision_benign(&self) -> f64 {
        Self::rate(self.tn, self.tn + self.fn_)
    }

    pub fn recall_benign(&self) -> f64 {
        Self::rate(self.tn, self.tn + self.fp)
    }

    pub fn f1_malicious(&self) -> f64 {
        f1(self.precision_malicious(), self.recall_malicious())
    }

    pub fn f1_benign(&self) -> f64 {
        f1(self.precision_benign(), self.recall_benign())
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Metrics over one node set. Macro metrics average the malicious and
/// benign classes at the best-F1 operating point; PR-AUC pools all nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub support: u64,
    pub positives: u64,
    pub negatives: u64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    /// None when the set contains a single class.
    pub pr_auc: Option<f64>,
    /// Score threshold that maximizes the malicious-class F1.
    pub best_threshold: f64,
    pub confusion: Confusion,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least {need} ground-truth nodes, got {got}")]
    TooFewNodes { got: usize, need: usize },
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric set is empty")]
    EmptySet,
    #[error("PR-AUC is undefined on a single-class set")]
    SingleClass,
}

/// The PR curve's operating points: one per distinct score, descending.
/// Returns (threshold, cumulative tp, cumulative fp) triples.
fn operating_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Equal scores share one operating point.
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((threshold, tp, fp));
    }
    points
}

/// Micro PR-AUC by interpolation-free step integration over distinct
/// score thresholds. Errors when only one class is present.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    if positives == 0 || positives == labels.len() as u64 {
        return Err(EvalError::SingleClass);
    }
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in operating_points(scores, labels) {
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(auc)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptySet);
    }
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Computes the full metric set for one pool of scored nodes. The
/// confusion matrix and macro metrics are reported at the threshold that
/// maximizes the malicious-class F1 over the PR curve's operating points;
/// PR-AUC is None (not an error) on single-class sets so the rest of the
/// report stays usable.
pub fn compute_metrics(scores: &[f64], labels: &[bool]) -> Result<MetricsReport, EvalError> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;

    let mut best_threshold = f64::INFINITY;
    let mut best_f1 = -1.0;
    for (threshold, tp, fp) in operating_points(scores, labels) {
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if positives == 0 {
            0.0
        } else {
            tp as f64 / positives as f64
        };
        let f = f1(p, r);
        if f > best_f1 {
            best_f1 = f;
            best_threshold = threshold;
        }
    }
    let confusion = Confusion::at_threshold(scores, labels, best_threshold);
    Ok(MetricsReport {
        support: labels.len() as u64,
        positives,
        negatives,
        precision_macro: 0.5 * (confusion.precision_malicious() + confusion.precision_benign()),
        recall_macro: 0.5 * (confusion.recall_malicious() + confusion.recall_benign()),
        f1_macro: 0.5 * (confusion.f1_malicious() + confusion.f1_benign()),
        pr_auc: pr_auc(scores, labels).ok(),
        best_threshold,
        confusion,
    })
}

/// Per-kind breakdown plus the kinds skipped for thin support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerKindBreakdown {
    pub min_support: usize,
    pub per_kind: BTreeMap<String, MetricsReport>,
    /// (kind, ground-truth count) pairs below the support floor.
    pub skipped: Vec<(String, usize)>,
}

pub const DEFAULT_MIN_SUPPORT: usize = 100;

/// Splits the pooled test set by entity kind and reports each kind with
/// at least `min_support` ground-truth nodes.
pub fn per_kind_breakdown(
    scores: &[f64],
    labels: &[bool],
    kinds: &[EntityKind],
    min_support: usize,
) -> Result<PerKindBreakdown, EvalError> {
    if scores.len() != labels.len() || scores.len() != kinds.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut grouped: BTreeMap<EntityKind, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for i in 0..scores.len() {
        let slot = grouped.entry(kinds[i]).or_default();
        slot.0.push(scores[i]);
        slot.1.push(labels[i]);
    }
    let mut breakdown = PerKindBreakdown {
        min_support,
        per_kind: BTreeMap::new(),
        skipped: Vec::new(),
    };
    for (kind, (s, l)) in grouped {
        if s.len() < min_support {
            breakdown.skipped.push((kind.name().to_string(), s.len()));
            continue;
        }
        breakdown
            .per_kind
            .insert(kind.name().to_string(), compute_metrics(&s, &l)?);
    }
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EntityKind::*;

    fn keys(n: usize) -> Vec<(EntityKind, String)> {
        (0..n).map(|i| (Sha1, format!("hash-{i:04}"))).collect()
    }

    #[test]
    fn split_exact_on_divisible_sizes() {
        let assignment = split(&keys(100), 42).unwrap();
        assert_eq!(assignment.count(Stratum::Train), 70);
        assert_eq!(assignment.count(Stratum::Validation), 10);
        assert_eq!(assignment.count(Stratum::Test), 20);
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(&keys(137), 7).unwrap();
        let b = split(&keys(137), 7).unwrap();
        assert_eq!(a.strata, b.strata);
        let c = split(&keys(137), 8).unwrap();
        assert_ne!(a.strata, c.strata, "different seed should reshuffle");
    }

    #[test]
    fn split_order_independent() {
        let mut ks = keys(50);
        let a = split(&ks, 3).unwrap();
        ks.reverse();
        let b = split(&ks, 3).unwrap();
        assert_eq!(a.strata, b.strata);
    }

    #[test]
    fn split_ten_nodes() {
        let assignment = split(&keys(10), 1).unwrap();
        assert_eq!(assignment.count(Stratum::Train), 7);
        assert_eq!(assignment.count(Stratum::Validation), 1);
        assert_eq!(assignment.count(Stratum::Test), 2);
    }

    #[test]
    fn split_rejects_tiny_sets() {
        assert!(matches!(
            split(&keys(9), 1),
            Err(EvalError::TooFewNodes { .. })
        ));
    }

    #[test]
    fn perfect_scores_are_perfect() {
        let labels = vec![true, true, false, false, true];
        let scores: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let report = compute_metrics(&scores, &labels).unwrap();
        assert_eq!(report.f1_macro, 1.0);
        assert_eq!(report.pr_auc, Some(1.0));
        assert_eq!(report.confusion.tp, 3);
        assert_eq!(report.confusion.tn, 2);
        assert_eq!(report.confusion.total(), 5);
    }

    #[test]
    fn flipped_scores_have_zero_malicious_recall_at_top_threshold() {
        // Scores anti-correlated with labels: the malicious class never
        // outranks benign, so recall at any high-precision point is poor.
        let labels = vec![true, true, false, false];
        let scores = vec![0.1, 0.2, 0.8, 0.9];
        let c = Confusion::at_threshold(&scores, &labels, 0.8);
        assert_eq!(c.recall_malicious(), 0.0);
        assert_eq!(c.tp, 0);
        assert_eq!(c.fp, 2);
    }

    #[test]
    fn pr_auc_matches_hand_computed_case() {
        let labels = vec![true, true, false, false];
        let scores = vec![0.9, 0.4, 0.6, 0.1];
        let auc = pr_auc(&scores, &labels).unwrap();
        assert!((auc - 5.0 / 6.0).abs() < 1e-12);
        assert!((auc - brute_force_pr_auc(&scores, &labels)).abs() < 1e-15);
    }

    #[test]
    fn pr_auc_single_class_errors_but_metrics_do_not() {
        let labels = vec![true, true];
        let scores = vec![0.9, 0.8];
        assert!(matches!(pr_auc(&scores, &labels), Err(EvalError::SingleClass)));
        let report = compute_metrics(&scores, &labels).unwrap();
        assert_eq!(report.pr_auc, None);
        assert_eq!(report.confusion.total(), 2);
    }

    #[test]
    fn tied_scores_share_an_operating_point() {
        let labels = vec![true, false, true, false];
        let scores = vec![0.5, 0.5, 0.5, 0.5];
        let auc = pr_auc(&scores, &labels).unwrap();
        // One point: recall 1, precision 0.5.
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn per_kind_skips_thin_support() {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut kinds = Vec::new();
        for i in 0..100 {
            scores.push(if i % 3 == 0 { 0.9 } else { 0.1 });
            labels.push(i % 3 == 0);
            kinds.push(IpAddress);
        }
        for i in 0..99 {
            scores.push(0.5);
            labels.push(i % 2 == 0);
            kinds.push(Url);
        }
        let breakdown =
            per_kind_breakdown(&scores, &labels, &kinds, DEFAULT_MIN_SUPPORT).unwrap();
        assert!(breakdown.per_kind.contains_key("IpAddress"));
        assert_eq!(breakdown.skipped, vec![("URL".to_string(), 99)]);
    }

    #[test]
    fn per_kind_all_below_support_is_empty() {
        let scores = vec![0.9, 0.1];
        let labels = vec![true, false];
        let kinds = vec![Sha1, Sha1];
        let breakdown = per_kind_breakdown(&scores, &labels, &kinds, 100).unwrap();
        assert!(breakdown.per_kind.is_empty());
        assert_eq!(breakdown.skipped.len(), 1);
    }

    /// O(n^2) oracle: recompute precision/recall from scratch at every
    /// distinct threshold and step-integrate.
    pub(crate) fn brute_force_pr_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let positives = labels.iter().filter(|&&l| l).count() as f64;
        let mut auc = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(labels) {
                if s >= t {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / positives;
            let precision = tp / (tp + fp);
            auc += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        auc
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(compute_metrics(&[], &[]), Err(EvalError::EmptySet)));
    }
}
