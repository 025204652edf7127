//! Edge decay policies: how a relationship's weight ages and when it dies.
//!
//! Every edge kind pair carries a decay function (constant, linear or
//! exponential), an initial weight, an optional per-hour decay rate and a
//! maximum alive time. The shipped defaults can be overridden with a JSON
//! policy file; production deployments tune these values.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EntityKind;

/// Decay function families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayFn {
    Constant,
    Linear,
    Exponential,
}

impl fmt::Display for DecayFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecayFn::Constant => write!(f, "Constant"),
            DecayFn::Linear => write!(f, "Linear"),
            DecayFn::Exponential => write!(f, "Exponential"),
        }
    }
}

/// How one edge kind ages.
///
/// Linear weights reach zero exactly at the max alive time; exponential
/// weights are clamped to zero once the edge outlives its bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPolicy {
    pub function: DecayFn,
    pub initial_weight: f64,
    /// Per-hour rate; only meaningful for `Exponential`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_rate: Option<f64>,
    pub max_alive_hours: f64,
}

impl DecayPolicy {
    pub const fn constant(initial_weight: f64, max_alive_hours: f64) -> Self {
        DecayPolicy {
            function: DecayFn::Constant,
            initial_weight,
            decay_rate: None,
            max_alive_hours,
        }
    }

    pub const fn linear(initial_weight: f64, max_alive_hours: f64) -> Self {
        DecayPolicy {
            function: DecayFn::Linear,
            initial_weight,
            decay_rate: None,
            max_alive_hours,
        }
    }

    pub const fn exponential(initial_weight: f64, rate: f64, max_alive_hours: f64) -> Self {
        DecayPolicy {
            function: DecayFn::Exponential,
            initial_weight,
            decay_rate: Some(rate),
            max_alive_hours,
        }
    }

    /// Weight after `age` hours. Clamps: never negative, zero past the max
    /// alive time.
    pub fn weight_at(&self, age_hours: f64) -> f64 {
        let age = age_hours.max(0.0);
        if age > self.max_alive_hours {
            return 0.0;
        }
        match self.function {
            DecayFn::Constant => self.initial_weight,
            DecayFn::Linear => self.initial_weight * (1.0 - age / self.max_alive_hours).max(0.0),
            DecayFn::Exponential => {
                let rate = self.decay_rate.unwrap_or(0.0);
                self.initial_weight * (-rate * age).exp()
            }
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.initial_weight < 0.0 || !self.initial_weight.is_finite() {
            return Err(PolicyError::Invalid(format!(
                "initial weight must be a nonnegative real, got {}",
                self.initial_weight
            )));
        }
        if self.max_alive_hours <= 0.0 || !self.max_alive_hours.is_finite() {
            return Err(PolicyError::Invalid(format!(
                "max alive time must be positive, got {}",
                self.max_alive_hours
            )));
        }
        match (self.function, self.decay_rate) {
            (DecayFn::Exponential, Some(r)) if r > 0.0 => Ok(()),
            (DecayFn::Exponential, _) => Err(PolicyError::Invalid(
                "exponential policies need decay_rate > 0".into(),
            )),
            (_, Some(_)) => Err(PolicyError::Invalid(
                "decay_rate is only valid for exponential policies".into(),
            )),
            (_, None) => Ok(()),
        }
    }
}

/// An unordered kind pair identifying one edge type. Stored with the
/// lower-layer kind first, so lookups are direction-insensitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgePairKind {
    pub source: EntityKind,
    pub target: EntityKind,
}

impl EdgePairKind {
    /// Normalizes so that `source` is the lower layer.
    pub fn new(a: EntityKind, b: EntityKind) -> Self {
        if (a.layer() as u8, a as u8) <= (b.layer() as u8, b as u8) {
            EdgePairKind {
                source: a,
                target: b,
            }
        } else {
            EdgePairKind {
                source: b,
                target: a,
            }
        }
    }

    pub fn label(&self) -> String {
        format!("{}->{}", self.source, self.target)
    }
}

/// One row of a policy config file. Mirrors the policy table columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRow {
    pub source_kind: EntityKind,
    pub target_kind: EntityKind,
    pub decay: DecayFn,
    pub initial_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_rate: Option<f64>,
    pub max_alive_hours: f64,
}

/// The full edge-type table: which kind pairs may be linked and how each
/// link decays.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePolicyTable {
    policies: BTreeMap<EdgePairKind, DecayPolicy>,
}

impl Default for EdgePolicyTable {
    fn default() -> Self {
        Self::builtin()
    }
}

impl EdgePolicyTable {
    /// The shipped defaults for all 18 edge types across the five layers.
    pub fn builtin() -> Self {
        use EntityKind::*;
        let rows: &[(EntityKind, EntityKind, DecayPolicy)] = &[
            (OrgId, IncidentId, DecayPolicy::constant(0.1, 168.0)),
            (IncidentId, AlertId, DecayPolicy::constant(1.0, 168.0)),
            (AlertId, Sha1, DecayPolicy::constant(1.0, 168.0)),
            (AlertId, CampaignId, DecayPolicy::constant(1.0, 120.0)),
            (AlertId, SessionId, DecayPolicy::constant(1.0, 168.0)),
            (AlertId, EmailId, DecayPolicy::constant(1.0, 24.0)),
            (AlertId, AppId, DecayPolicy::linear(1.0, 48.0)),
            (AlertId, Url, DecayPolicy::linear(1.0, 12.0)),
            (AlertId, IpAddress, DecayPolicy::linear(1.0, 12.0)),
            (AlertId, DeviceName, DecayPolicy::exponential(1.0, 0.19, 12.0)),
            (AlertId, ResourceId, DecayPolicy::exponential(1.0, 0.24, 12.0)),
            (AlertId, RegistryKey, DecayPolicy::exponential(1.0, 0.24, 12.0)),
            (AlertId, RegistryVal, DecayPolicy::exponential(1.0, 0.24, 12.0)),
            (Sha1, FileDir, DecayPolicy::exponential(1.0, 0.24, 24.0)),
            (EmailId, EmailAddress, DecayPolicy::linear(1.0, 12.0)),
            (EmailId, EmailCluster, DecayPolicy::linear(0.5, 6.0)),
            (Url, UrlDomain, DecayPolicy::linear(0.5, 6.0)),
            (IpAddress, IpRange, DecayPolicy::linear(0.5, 12.0)),
        ];
        let mut policies = BTreeMap::new();
        for &(a, b, p) in rows {
            policies.insert(EdgePairKind::new(a, b), p);
        }
        EdgePolicyTable { policies }
    }

    pub fn lookup(&self, a: EntityKind, b: EntityKind) -> Option<&DecayPolicy> {
        self.policies.get(&EdgePairKind::new(a, b))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&EdgePairKind, &DecayPolicy)> {
        self.policies.iter()
    }

    pub fn from_rows(rows: Vec<PolicyRow>) -> Result<Self, PolicyError> {
        let mut policies = BTreeMap::new();
        for row in rows {
            let policy = DecayPolicy {
                function: row.decay,
                initial_weight: row.initial_weight,
                decay_rate: row.decay_rate,
                max_alive_hours: row.max_alive_hours,
            };
            policy.validate()?;
            let src_layer = row.source_kind.layer() as u8;
            let dst_layer = row.target_kind.layer() as u8;
            if dst_layer != src_layer + 1 && src_layer != dst_layer + 1 {
                return Err(PolicyError::Invalid(format!(
                    "{} and {} are not adjacent layers",
                    row.source_kind, row.target_kind
                )));
            }
            let pair = EdgePairKind::new(row.source_kind, row.target_kind);
            if policies.insert(pair, policy).is_some() {
                return Err(PolicyError::Invalid(format!(
                    "duplicate policy for {}",
                    pair.label()
                )));
            }
        }
        if policies.is_empty() {
            return Err(PolicyError::Invalid("policy table is empty".into()));
        }
        Ok(EdgePolicyTable { policies })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PolicyError::Io(path.display().to_string(), e.to_string()))?;
        let rows: Vec<PolicyRow> = serde_json::from_str(&text)
            .map_err(|e| PolicyError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_rows(rows)
    }

    pub fn to_rows(&self) -> Vec<PolicyRow> {
        self.policies
            .iter()
            .map(|(pair, p)| PolicyRow {
                source_kind: pair.source,
                target_kind: pair.target,
                decay: p.function,
                initial_weight: p.initial_weight,
                decay_rate: p.decay_rate,
                max_alive_hours: p.max_alive_hours,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let text = serde_json::to_string_pretty(&self.to_rows())
            .map_err(|e| PolicyError::Io(path.display().to_string(), e.to_string()))?;
        fs::write(path, text).map_err(|e| PolicyError::Io(path.display().to_string(), e.to_string()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid edge policy: {0}")]
    Invalid(String),
    #[error("policy file {0}: {1}")]
    Io(String, String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::EntityKind::*;

    #[test]
    fn builtin_table_shape() {
        let table = EdgePolicyTable::builtin();
        assert_eq!(table.pairs().count(), 18);
        let p = table.lookup(AlertId, Sha1).unwrap();
        assert_eq!(p.function, DecayFn::Constant);
        assert_eq!(p.initial_weight, 1.0);
        assert_eq!(p.max_alive_hours, 168.0);
        let p = table.lookup(OrgId, IncidentId).unwrap();
        assert_eq!(p.initial_weight, 0.1);
        let p = table.lookup(EmailId, EmailCluster).unwrap();
        assert_eq!(p.initial_weight, 0.5);
        assert_eq!(p.max_alive_hours, 6.0);
    }

    #[test]
    fn lookup_is_direction_insensitive() {
        let table = EdgePolicyTable::builtin();
        assert_eq!(table.lookup(Sha1, AlertId), table.lookup(AlertId, Sha1));
        assert!(table.lookup(Sha1, Sha1).is_none());
    }

    #[test]
    fn linear_weight_halves_at_half_life() {
        // URL edges: linear, w0=1, max alive 12h
        let p = EdgePolicyTable::builtin().lookup(AlertId, Url).copied().unwrap();
        assert!((p.weight_at(6.0) - 0.5).abs() < 1e-12);
        assert_eq!(p.weight_at(12.0), 0.0);
        assert_eq!(p.weight_at(13.0), 0.0);
    }

    #[test]
    fn exponential_weight() {
        // DeviceName edges: exponential, rate 0.19/h
        let p = EdgePolicyTable::builtin()
            .lookup(AlertId, DeviceName)
            .copied()
            .unwrap();
        let expected = (-0.19_f64 * 12.0).exp();
        assert!((p.weight_at(12.0) - expected).abs() < 1e-12);
        assert_eq!(p.weight_at(12.1), 0.0);
    }

    #[test]
    fn constant_weight_until_expiry() {
        let p = EdgePolicyTable::builtin().lookup(AlertId, Sha1).copied().unwrap();
        assert_eq!(p.weight_at(100.0), 1.0);
        assert_eq!(p.weight_at(169.0), 0.0);
    }

    #[test]
    fn json_round_trip(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let table = EdgePolicyTable::builtin();
        table.save(&path).unwrap();
        let loaded = EdgePolicyTable::load(&path).unwrap();
        assert_eq!(table, loaded);
    }

    #[test]
    fn rejects_bad_rows() {
        let rows = vec![PolicyRow {
            source_kind: AlertId,
            target_kind: Sha1,
            decay: DecayFn::Exponential,
            initial_weight: 1.0,
            decay_rate: None,
            max_alive_hours: 12.0,
        }];
        assert!(EdgePolicyTable::from_rows(rows).is_err());

        let rows = vec![PolicyRow {
            source_kind: OrgId,
            target_kind: Sha1,
            decay: DecayFn::Constant,
            initial_weight: 1.0,
            decay_rate: None,
            max_alive_hours: 12.0,
        }];
        assert!(EdgePolicyTable::from_rows(rows).is_err(), "non-adjacent layers");
    }
}
