//! The dynamic security intelligence graph.
//!
//! An undirected, weighted, five-partite graph: organizations link to
//! incidents, incidents to alerts, alerts to entities, and entities to the
//! parent entities that aggregate them. Edge weights decay with age under
//! per-kind policies; pruning drops dead weight, expired nodes and
//! islands. Mutation is single-writer (`&mut self`); reads are shared.

pub mod policy;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::labels::{classify, Verdict};
use crate::sparse::CsrMatrix;
use crate::time::Timestamp;

pub use policy::{DecayFn, DecayPolicy, EdgePairKind, EdgePolicyTable, PolicyError, PolicyRow};

/// The five node layers, from organizations down to parent entities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeLayer {
    Organization = 1,
    Incident = 2,
    Alert = 3,
    Entity = 4,
    ParentEntity = 5,
}

/// Every node kind the graph knows about: the three identifier kinds for
/// layers 1-3, eleven entity kinds and five parent-entity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    OrgId,
    IncidentId,
    AlertId,
    #[serde(rename = "SHA1")]
    Sha1,
    CampaignId,
    SessionId,
    EmailId,
    AppId,
    #[serde(rename = "URL")]
    Url,
    IpAddress,
    DeviceName,
    ResourceId,
    RegistryKey,
    RegistryVal,
    FileDir,
    EmailAddress,
    EmailCluster,
    #[serde(rename = "URLDomain")]
    UrlDomain,
    IpRange,
}

impl EntityKind {
    pub const ALL: [EntityKind; 19] = [
        EntityKind::OrgId,
        EntityKind::IncidentId,
        EntityKind::AlertId,
        EntityKind::Sha1,
        EntityKind::CampaignId,
        EntityKind::SessionId,
        EntityKind::EmailId,
        EntityKind::AppId,
        EntityKind::Url,
        EntityKind::IpAddress,
        EntityKind::DeviceName,
        EntityKind::ResourceId,
        EntityKind::RegistryKey,
        EntityKind::RegistryVal,
        EntityKind::FileDir,
        EntityKind::EmailAddress,
        EntityKind::EmailCluster,
        EntityKind::UrlDomain,
        EntityKind::IpRange,
    ];

    /// The layer this kind always occupies.
    pub fn layer(self) -> NodeLayer {
        use EntityKind::*;
        match self {
            OrgId => NodeLayer::Organization,
            IncidentId => NodeLayer::Incident,
            AlertId => NodeLayer::Alert,
            Sha1 | CampaignId | SessionId | EmailId | AppId | Url | IpAddress | DeviceName
            | ResourceId | RegistryKey | RegistryVal => NodeLayer::Entity,
            FileDir | EmailAddress | EmailCluster | UrlDomain | IpRange => NodeLayer::ParentEntity,
        }
    }

    pub fn is_entity_layer(self) -> bool {
        matches!(self.layer(), NodeLayer::Entity | NodeLayer::ParentEntity)
    }

    pub fn name(self) -> &'static str {
        use EntityKind::*;
        match self {
            OrgId => "OrgId",
            IncidentId => "IncidentId",
            AlertId => "AlertId",
            Sha1 => "SHA1",
            CampaignId => "CampaignId",
            SessionId => "SessionId",
            EmailId => "EmailId",
            AppId => "AppId",
            Url => "URL",
            IpAddress => "IpAddress",
            DeviceName => "DeviceName",
            ResourceId => "ResourceId",
            RegistryKey => "RegistryKey",
            RegistryVal => "RegistryVal",
            FileDir => "FileDir",
            EmailAddress => "EmailAddress",
            EmailCluster => "EmailCluster",
            UrlDomain => "URLDomain",
            IpRange => "IpRange",
        }
    }

    pub fn parse(s: &str) -> Option<EntityKind> {
        EntityKind::ALL.iter().copied().find(|k| k.name() == s)
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u32);

/// A vertex: one observed identifier with its reputation state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub layer: NodeLayer,
    pub kind: EntityKind,
    pub key: String,
    pub created_at: Timestamp,
    pub last_seen: Timestamp,
    /// P(malicious) in [0,1]; 0.5 means unknown.
    pub reputation: f64,
}

/// An undirected weighted link between adjacent layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub id: EdgeId,
    pub src: NodeId,
    pub dst: NodeId,
    pub pair: EdgePairKind,
    pub policy: DecayPolicy,
    pub created_at: Timestamp,
}

impl EdgeRecord {
    /// Current weight at `now`; clamps to zero past the max alive time.
    pub fn weight_at(&self, now: Timestamp) -> f64 {
        self.policy.weight_at(now.since(self.created_at))
    }
}

/// What one prune pass removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Edges whose current weight fell below the threshold.
    pub edges_decayed: u64,
    /// Nodes unseen for longer than their max-alive bound.
    pub nodes_expired: u64,
    /// Edges dropped because an endpoint expired.
    pub edges_expired: u64,
    /// Nodes left with no edges.
    pub nodes_isolated: u64,
}

impl PruneReport {
    pub fn total_nodes(&self) -> u64 {
        self.nodes_expired + self.nodes_isolated
    }
    pub fn total_edges(&self) -> u64 {
        self.edges_decayed + self.edges_expired
    }
}

/// Fractions of entity nodes currently classified unknown / benign /
/// malicious.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelFractions {
    pub unknown: f64,
    pub benign: f64,
    pub malicious: f64,
}

/// Snapshot statistics, one row of the graph-over-time series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub num_nodes: u64,
    pub num_edges: u64,
    pub num_orgs: u64,
    pub num_incidents: u64,
    pub num_alerts: u64,
    pub num_entities: u64,
    pub lcc_size: u64,
    /// Fraction of live edges per kind pair (keys like `EmailId->EmailCluster`).
    pub edge_distribution: BTreeMap<String, f64>,
    /// Computed over entity-layer nodes (layers 4-5); falls back to all
    /// nodes when the graph has no entities yet.
    pub label_fractions: LabelFractions,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("node key must be nonempty")]
    EmptyKey,
    #[error("timestamp {now:?} precedes graph clock {clock:?} by more than the allowed slack {slack}h")]
    ClockWentBackwards {
        now: f64,
        clock: f64,
        slack: f64,
    },
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("self loops are not allowed")]
    SelfLoop,
    #[error("no edge policy for kind pair {0} / {1}")]
    NoPolicy(EntityKind, EntityKind),
}

/// Graph-wide knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphConfig {
    /// How far (hours) a timestamp may lag the graph clock before it is
    /// rejected. Lagging-but-within-slack timestamps are clamped forward.
    pub clock_slack_hours: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            clock_slack_hours: 0.0,
        }
    }
}

/// The dynamic intelligence graph.
#[derive(Debug, Clone)]
pub struct IntelGraph {
    config: GraphConfig,
    policies: EdgePolicyTable,
    nodes: Vec<Option<NodeRecord>>,
    edges: Vec<Option<EdgeRecord>>,
    key_index: HashMap<(EntityKind, String), NodeId>,
    edge_index: HashMap<(NodeId, NodeId), EdgeId>,
    adjacency: Vec<Vec<EdgeId>>,
    clock: Timestamp,
    live_nodes: u64,
    live_edges: u64,
}

impl IntelGraph {
    pub fn new(policies: EdgePolicyTable) -> Self {
        Self::with_config(policies, GraphConfig::default())
    }

    pub fn with_config(policies: EdgePolicyTable, config: GraphConfig) -> Self {
        IntelGraph {
            config,
            policies,
            nodes: Vec::new(),
            edges: Vec::new(),
            key_index: HashMap::new(),
            edge_index: HashMap::new(),
            adjacency: Vec::new(),
            clock: Timestamp(f64::NEG_INFINITY),
            live_nodes: 0,
            live_edges: 0,
        }
    }

    pub fn policies(&self) -> &EdgePolicyTable {
        &self.policies
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn num_nodes(&self) -> u64 {
        self.live_nodes
    }

    pub fn num_edges(&self) -> u64 {
        self.live_edges
    }

    /// Canonical key form: trimmed and lower-cased.
    pub fn canonical_key(key: &str) -> String {
        key.trim().to_lowercase()
    }

    fn advance_clock(&mut self, now: Timestamp) -> Result<Timestamp, GraphError> {
        if now.hours() < self.clock.hours() - self.config.clock_slack_hours {
            return Err(GraphError::ClockWentBackwards {
                now: now.hours(),
                clock: self.clock.hours(),
                slack: self.config.clock_slack_hours,
            });
        }
        // Within slack: clamp forward so graph time never decreases.
        let effective = if now.hours() < self.clock.hours() {
            self.clock
        } else {
            now
        };
        self.clock = effective;
        Ok(effective)
    }

    /// Moves the graph clock forward without touching any node. Subject to
    /// the same backwards-slack rule as mutations.
    pub fn advance_to(&mut self, now: Timestamp) -> Result<Timestamp, GraphError> {
        self.advance_clock(now)
    }

    /// Inserts or refreshes a node. Existing (kind, key) nodes get their
    /// `last_seen` bumped; new nodes start unknown (reputation 0.5).
    pub fn upsert_node(
        &mut self,
        kind: EntityKind,
        key: &str,
        now: Timestamp,
    ) -> Result<NodeId, GraphError> {
        let key = Self::canonical_key(key);
        if key.is_empty() {
            return Err(GraphError::EmptyKey);
        }
        let now = self.advance_clock(now)?;
        if let Some(&id) = self.key_index.get(&(kind, key.clone())) {
            let node = self.nodes[id.0 as usize]
                .as_mut()
                .expect("indexed node is live");
            node.last_seen = now;
            return Ok(id);
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Some(NodeRecord {
            id,
            layer: kind.layer(),
            kind,
            key: key.clone(),
            created_at: now,
            last_seen: now,
            reputation: 0.5,
        }));
        self.adjacency.push(Vec::new());
        self.key_index.insert((kind, key), id);
        self.live_nodes += 1;
        Ok(id)
    }

    /// Adds (or refreshes) the undirected edge between two existing nodes.
    /// Refreshing resets `created_at`, returning the weight to its initial
    /// value.
    pub fn add_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        now: Timestamp,
    ) -> Result<EdgeId, GraphError> {
        if src == dst {
            return Err(GraphError::SelfLoop);
        }
        let (src_kind, dst_kind) = {
            let a = self.node(src).ok_or(GraphError::UnknownNode(src))?;
            let b = self.node(dst).ok_or(GraphError::UnknownNode(dst))?;
            (a.kind, b.kind)
        };
        let policy = *self
            .policies
            .lookup(src_kind, dst_kind)
            .ok_or(GraphError::NoPolicy(src_kind, dst_kind))?;
        let now = self.advance_clock(now)?;
        let key = Self::edge_key(src, dst);
        if let Some(&eid) = self.edge_index.get(&key) {
            let edge = self.edges[eid.0 as usize]
                .as_mut()
                .expect("indexed edge is live");
            edge.created_at = now;
            edge.policy = policy;
            return Ok(eid);
        }
        let eid = EdgeId(self.edges.len() as u32);
        self.edges.push(Some(EdgeRecord {
            id: eid,
            src,
            dst,
            pair: EdgePairKind::new(src_kind, dst_kind),
            policy,
            created_at: now,
        }));
        self.adjacency[src.0 as usize].push(eid);
        self.adjacency[dst.0 as usize].push(eid);
        self.edge_index.insert(key, eid);
        self.live_edges += 1;
        Ok(eid)
    }

    fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeRecord> {
        self.nodes.get(id.0 as usize).and_then(|n| n.as_ref())
    }

    pub fn node_by_key(&self, kind: EntityKind, key: &str) -> Option<&NodeRecord> {
        let key = Self::canonical_key(key);
        self.key_index
            .get(&(kind, key))
            .and_then(|&id| self.node(id))
    }

    pub fn edge(&self, id: EdgeId) -> Option<&EdgeRecord> {
        self.edges.get(id.0 as usize).and_then(|e| e.as_ref())
    }

    pub fn edge_between(&self, a: NodeId, b: NodeId) -> Option<&EdgeRecord> {
        self.edge_index
            .get(&Self::edge_key(a, b))
            .and_then(|&id| self.edge(id))
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.iter().filter_map(|n| n.as_ref())
    }

    pub fn live_edges(&self) -> impl Iterator<Item = &EdgeRecord> {
        self.edges.iter().filter_map(|e| e.as_ref())
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adjacency
            .get(id.0 as usize)
            .map(|a| a.len())
            .unwrap_or(0)
    }

    pub fn incident_edges(&self, id: NodeId) -> impl Iterator<Item = &EdgeRecord> {
        self.adjacency
            .get(id.0 as usize)
            .into_iter()
            .flatten()
            .filter_map(move |&eid| self.edge(eid))
    }

    pub fn set_reputation(&mut self, id: NodeId, score: f64) -> Result<(), GraphError> {
        let node = self
            .nodes
            .get_mut(id.0 as usize)
            .and_then(|n| n.as_mut())
            .ok_or(GraphError::UnknownNode(id))?;
        node.reputation = score.clamp(0.0, 1.0);
        Ok(())
    }

    fn remove_edge_internal(&mut self, eid: EdgeId) {
        if let Some(edge) = self.edges[eid.0 as usize].take() {
            self.edge_index.remove(&Self::edge_key(edge.src, edge.dst));
            for end in [edge.src, edge.dst] {
                let adj = &mut self.adjacency[end.0 as usize];
                if let Some(pos) = adj.iter().position(|&e| e == eid) {
                    adj.swap_remove(pos);
                }
            }
            self.live_edges -= 1;
        }
    }

    fn remove_node_internal(&mut self, id: NodeId) {
        let incident: Vec<EdgeId> = self.adjacency[id.0 as usize].clone();
        for eid in incident {
            self.remove_edge_internal(eid);
        }
        if let Some(node) = self.nodes[id.0 as usize].take() {
            self.key_index.remove(&(node.kind, node.key));
            self.live_nodes -= 1;
        }
    }

    /// A node's max-alive bound: the largest max-alive time across its
    /// current edge kinds, measured from `last_seen`.
    fn node_max_alive(&self, id: NodeId) -> Option<f64> {
        let mut bound: Option<f64> = None;
        for edge in self.incident_edges(id) {
            let m = edge.policy.max_alive_hours;
            bound = Some(bound.map_or(m, |b: f64| b.max(m)));
        }
        bound
    }

    /// Removes decayed edges, expired nodes and isolated nodes, in that
    /// order.
    pub fn prune(&mut self, now: Timestamp, weight_threshold: f64) -> PruneReport {
        let mut report = PruneReport::default();

        // (a) edges below the weight threshold (includes edges past their
        // max alive time, whose weight clamps to zero)
        let dead_edges: Vec<EdgeId> = self
            .live_edges()
            .filter(|e| e.weight_at(now) < weight_threshold)
            .map(|e| e.id)
            .collect();
        for eid in dead_edges {
            self.remove_edge_internal(eid);
            report.edges_decayed += 1;
        }

        // (b) nodes unseen for longer than their lifespan
        let expired: Vec<NodeId> = self
            .live_nodes()
            .filter_map(|n| {
                let bound = self.node_max_alive(n.id)?;
                (now.since(n.last_seen) > bound).then_some(n.id)
            })
            .collect();
        for id in expired {
            report.edges_expired += self.adjacency[id.0 as usize].len() as u64;
            self.remove_node_internal(id);
            report.nodes_expired += 1;
        }

        // (c) whatever is now isolated
        let isolated: Vec<NodeId> = self
            .live_nodes()
            .filter(|n| self.adjacency[n.id.0 as usize].is_empty())
            .map(|n| n.id)
            .collect();
        for id in isolated {
            self.remove_node_internal(id);
            report.nodes_isolated += 1;
        }

        report
    }

    /// Size of the largest connected component under the current live
    /// edges (weights are not consulted).
    pub fn largest_connected_component(&self) -> u64 {
        let mut dsu = DisjointSet::new(self.nodes.len());
        for edge in self.live_edges() {
            dsu.union(edge.src.0 as usize, edge.dst.0 as usize);
        }
        let mut sizes: HashMap<usize, u64> = HashMap::new();
        for node in self.live_nodes() {
            *sizes.entry(dsu.find(node.id.0 as usize)).or_insert(0) += 1;
        }
        sizes.values().copied().max().unwrap_or(0)
    }

    /// Exports the weighted symmetric adjacency at `now`, with nodes in a
    /// stable (kind, key) order so repeated exports are identical.
    pub fn to_sparse(&self, now: Timestamp) -> SparseExport {
        let mut order: Vec<NodeId> = self.live_nodes().map(|n| n.id).collect();
        order.sort_by(|&a, &b| {
            let na = self.node(a).expect("live");
            let nb = self.node(b).expect("live");
            (na.kind, na.key.as_str()).cmp(&(nb.kind, nb.key.as_str()))
        });
        let mut index_of = HashMap::with_capacity(order.len());
        for (i, &id) in order.iter().enumerate() {
            index_of.insert(id, i as u32);
        }
        let mut triplets = Vec::with_capacity(self.live_edges as usize * 2);
        for edge in self.live_edges() {
            let w = edge.weight_at(now);
            let i = index_of[&edge.src];
            let j = index_of[&edge.dst];
            triplets.push((i, j, w));
            triplets.push((j, i, w));
        }
        SparseExport {
            matrix: CsrMatrix::from_triplets(order.len(), triplets),
            order,
            index_of,
        }
    }

    /// Snapshot statistics over live nodes and edges.
    pub fn stats(&self) -> GraphStats {
        let mut stats = GraphStats {
            num_nodes: self.live_nodes,
            num_edges: self.live_edges,
            lcc_size: self.largest_connected_component(),
            ..Default::default()
        };
        let mut entity_counts = (0u64, 0u64, 0u64); // unknown, benign, malicious
        let mut all_counts = (0u64, 0u64, 0u64);
        let mut num_entity_nodes = 0u64;
        for node in self.live_nodes() {
            match node.layer {
                NodeLayer::Organization => stats.num_orgs += 1,
                NodeLayer::Incident => stats.num_incidents += 1,
                NodeLayer::Alert => stats.num_alerts += 1,
                NodeLayer::Entity | NodeLayer::ParentEntity => stats.num_entities += 1,
            }
            let verdict = classify(node.reputation).unwrap_or(Verdict::Unknown);
            let slot = match verdict {
                Verdict::Unknown => 0,
                Verdict::Benign => 1,
                Verdict::Malicious => 2,
            };
            let all = &mut all_counts;
            match slot {
                0 => all.0 += 1,
                1 => all.1 += 1,
                _ => all.2 += 1,
            }
            if node.kind.is_entity_layer() {
                num_entity_nodes += 1;
                match slot {
                    0 => entity_counts.0 += 1,
                    1 => entity_counts.1 += 1,
                    _ => entity_counts.2 += 1,
                }
            }
        }
        let (counts, denom) = if num_entity_nodes > 0 {
            (entity_counts, num_entity_nodes)
        } else {
            (all_counts, self.live_nodes)
        };
        if denom > 0 {
            stats.label_fractions = LabelFractions {
                unknown: counts.0 as f64 / denom as f64,
                benign: counts.1 as f64 / denom as f64,
                malicious: counts.2 as f64 / denom as f64,
            };
        }
        let mut edge_counts: BTreeMap<EdgePairKind, u64> = BTreeMap::new();
        for edge in self.live_edges() {
            *edge_counts.entry(edge.pair).or_insert(0) += 1;
        }
        if self.live_edges > 0 {
            for (pair, count) in edge_counts {
                stats
                    .edge_distribution
                    .insert(pair.label(), count as f64 / self.live_edges as f64);
            }
        }
        stats
    }
}

/// Sparse adjacency plus the node ordering it was built with.
#[derive(Debug, Clone)]
pub struct SparseExport {
    pub matrix: CsrMatrix,
    /// Row/column i of the matrix is node `order[i]`.
    pub order: Vec<NodeId>,
    pub index_of: HashMap<NodeId, u32>,
}


/// Union-find with path halving and union by size.
struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.size[ra] += self.size[rb];
        self.parent[rb] = ra;
    }
}
