//! Deterministic synthetic telemetry with planted ground truth.
//!
//! The generator simulates a region: organizations raise mostly-benign
//! incidents against pools of org-local and globally shared benign
//! infrastructure, while a set of long-lived malicious campaigns reuses
//! its own pool of entities (clusters, senders, subnets, domains, file
//! hashes) across organizations. Guilt-by-association recovery is
//! possible exactly because campaign entities co-occur; the homophily
//! parameter sets how reliably a campaign-attached entity is actually
//! malicious.
//!
//! All randomness flows from one ChaCha8 stream seeded by the config, so
//! a seed fully determines the output on every platform.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::stable_hash;
use crate::graph::{EntityKind, IntelGraph};
use crate::labels::KnownIntel;
use crate::telemetry::{
    AlertGrade, EvidenceContext, EvidenceItem, TelemetryBatch, TelemetryRecord,
};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPriors {
    pub unknown: f64,
    pub benign: f64,
    pub malicious: f64,
}

impl Default for LabelPriors {
    fn default() -> Self {
        LabelPriors {
            unknown: 0.39,
            benign: 0.58,
            malicious: 0.03,
        }
    }
}

/// Region generator configuration. Every field has a default, so config
/// files only need to override what they change.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_orgs: u32,
    /// Poisson rate of new incidents per organization per batch.
    pub incidents_per_org_per_batch: f64,
    /// Mean alerts per incident (1 + Poisson(mean - 1)).
    pub alerts_per_incident: f64,
    /// Mean evidence items per alert (1 + Poisson(rate - 1)).
    pub entities_per_alert: f64,
    /// Relative edge-kind weights, keyed like `AlertId->EmailId`.
    /// Normalized to sum to 1 at validation.
    pub edge_kind_mixture: BTreeMap<String, f64>,
    pub label_priors: LabelPriors,
    /// Probability that an entity attached to a malicious campaign is
    /// itself malicious.
    pub homophily: f64,
    pub num_batches: u32,
    pub batch_hours: f64,
    /// First batch start, RFC 3339.
    pub start_time: String,
    pub num_campaigns: u32,
    /// Fraction of incidents driven by a campaign. Derived from the label
    /// priors when absent.
    pub malicious_incident_rate: Option<f64>,
    /// Fraction of the planted truth exposed as known intel. Derived from
    /// the label priors (benign + malicious mass) when absent.
    pub reveal_fraction: Option<f64>,
    /// Probability a second email cluster attaches to a message. Email
    /// cluster links die fast (6h), so the steady-state share of cluster
    /// edges in a pruned snapshot runs below the generated share; the
    /// default leans above the mixture ratio to compensate.
    pub extra_cluster_probability: f64,
    /// Fraction of alerts carrying a customer grade.
    pub grade_fraction: f64,
    /// Probability a campaign alert is automatically disrupted.
    pub disruption_rate: f64,
    /// Probability a campaign alert draws victim-side (org) evidence
    /// instead of campaign infrastructure.
    pub victim_mix: f64,
    /// Probability a new incident slot continues a recent incident of the
    /// same org instead of opening a fresh one. Long-running incidents
    /// keep accumulating correlated alerts, which keeps their older alerts
    /// coupled to live evidence.
    pub incident_continuation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 7,
            num_orgs: 900,
            incidents_per_org_per_batch: 0.5,
            alerts_per_incident: 2.64,
            entities_per_alert: 2.8,
            edge_kind_mixture: default_mixture(),
            label_priors: LabelPriors::default(),
            homophily: 0.9,
            num_batches: 24,
            batch_hours: 1.0,
            start_time: "2025-06-02T00:00:00Z".to_string(),
            num_campaigns: 40,
            malicious_incident_rate: None,
            reveal_fraction: None,
            extra_cluster_probability: 0.85,
            grade_fraction: 0.0,
            disruption_rate: 0.02,
            victim_mix: 0.15,
        }
    }
}

/// Relative edge-type weights mirroring the shipped policy table's
/// observed distribution column, normalized to sum to 1.
pub fn default_mixture() -> BTreeMap<String, f64> {
    let raw: &[(&str, f64)] = &[
        ("OrgId->IncidentId", 2.5),
        ("IncidentId->AlertId", 6.6),
        ("AlertId->SHA1", 0.47),
        ("AlertId->CampaignId", 0.05),
        ("AlertId->SessionId", 0.02),
        ("AlertId->EmailId", 12.0),
        ("AlertId->AppId", 1e-3),
        ("AlertId->URL", 0.32),
        ("AlertId->IpAddress", 5.3),
        ("AlertId->DeviceName", 0.31),
        ("AlertId->ResourceId", 1e-4),
        ("AlertId->RegistryKey", 0.02),
        ("AlertId->RegistryVal", 0.02),
        ("SHA1->FileDir", 0.25),
        ("EmailId->EmailAddress", 1.0),
        ("EmailId->EmailCluster", 19.0),
        ("URL->URLDomain", 0.05),
        ("IpAddress->IpRange", 0.32),
    ];
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    raw.iter()
        .map(|(k, w)| (k.to_string(), w / total))
        .collect()
}

impl GeneratorConfig {
    pub fn load(path: &Path) -> Result<Self, GenError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))?;
        let mut config: GeneratorConfig = serde_json::from_str(&text)
            .map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Normalizes the mixture and checks ranges.
    pub fn validate(&mut self) -> Result<(), GenError> {
        if self.num_orgs == 0 {
            return Err(GenError::BadConfig("num_orgs must be positive".into()));
        }
        if self.num_batches == 0 || self.batch_hours <= 0.0 {
            return Err(GenError::BadConfig("batch plan must be nonempty".into()));
        }
        if !(0.5..=1.0).contains(&self.homophily) {
            return Err(GenError::BadConfig(format!(
                "homophily must lie in [0.5, 1], got {}",
                self.homophily
            )));
        }
        let priors_sum =
            self.label_priors.unknown + self.label_priors.benign + self.label_priors.malicious;
        if (priors_sum - 1.0).abs() > 1e-9 {
            return Err(GenError::BadConfig(format!(
                "label priors must sum to 1, got {priors_sum}"
            )));
        }
        let total: f64 = self.edge_kind_mixture.values().sum();
        if !(total > 0.0) {
            return Err(GenError::BadConfig("edge mixture has no mass".into()));
        }
        for w in self.edge_kind_mixture.values_mut() {
            *w /= total;
        }
        Timestamp::parse_rfc3339(&self.start_time)
            .map_err(|e| GenError::BadConfig(e.to_string()))?;
        Ok(())
    }

    pub fn effective_malicious_incident_rate(&self) -> f64 {
        self.malicious_incident_rate.unwrap_or_else(|| {
            let truth_malicious = self.label_priors.malicious
                / (self.label_priors.malicious + self.label_priors.benign);
            0.8 * truth_malicious
        })
    }

    pub fn effective_reveal_fraction(&self) -> f64 {
        self.reveal_fraction
            .unwrap_or(self.label_priors.benign + self.label_priors.malicious)
    }

    fn mixture_weight(&self, label: &str) -> f64 {
        self.edge_kind_mixture.get(label).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TruthLabel {
    Malicious,
    Benign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedEntity {
    pub label: TruthLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub campaign: Option<String>,
}

/// Ground truth for every generated entity, plus campaign membership.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub entities: BTreeMap<(EntityKind, String), PlantedEntity>,
}

impl PlantedTruth {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn label_of(&self, kind: EntityKind, key: &str) -> Option<TruthLabel> {
        self.entities
            .get(&(kind, IntelGraph::canonical_key(key)))
            .map(|e| e.label)
    }

    pub fn save(&self, path: &Path) -> Result<(), GenError> {
        #[derive(Serialize)]
        struct Row<'a> {
            kind: EntityKind,
            key: &'a str,
            label: TruthLabel,
            #[serde(skip_serializing_if = "Option::is_none")]
            campaign: Option<&'a String>,
        }
        let rows: Vec<Row> = self
            .entities
            .iter()
            .map(|((kind, key), e)| Row {
                kind: *kind,
                key,
                label: e.label,
                campaign: e.campaign.as_ref(),
            })
            .collect();
        let text = serde_json::to_string(&rows)
            .map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))?;
        fs::write(path, text).map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        #[derive(Deserialize)]
        struct Row {
            kind: EntityKind,
            key: String,
            label: TruthLabel,
            #[serde(default)]
            campaign: Option<String>,
        }
        let text = fs::read_to_string(path)
            .map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))?;
        let rows: Vec<Row> = serde_json::from_str(&text)
            .map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))?;
        let mut truth = PlantedTruth::default();
        for row in rows {
            truth.entities.insert(
                (row.kind, IntelGraph::canonical_key(&row.key)),
                PlantedEntity {
                    label: row.label,
                    campaign: row.campaign,
                },
            );
        }
        Ok(truth)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("generator config: {0}")]
    BadConfig(String),
    #[error("reveal fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("{0}: {1}")]
    Io(String, String),
}

/// Exposes a deterministic subset of the planted truth as known intel:
/// malicious entities score 0.95, benign 0.05. Selection ranks entities by
/// a seed-keyed stable hash, so the subset is identical across runs and
/// platforms.
pub fn reveal_fraction(
    truth: &PlantedTruth,
    fraction: f64,
    seed: u64,
) -> Result<KnownIntel, GenError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(GenError::BadFraction(fraction));
    }
    let mut ranked: Vec<(u64, &(EntityKind, String))> = truth
        .entities
        .keys()
        .map(|k| (stable_hash(k.0.name(), &k.1, seed ^ 0x5eed_4e7e), k))
        .collect();
    ranked.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let take = ((truth.entities.len() as f64) * fraction).ceil() as usize;
    let mut intel = KnownIntel::new();
    for (_, key) in ranked.into_iter().take(take) {
        let label = truth.entities[key].label;
        let score = match label {
            TruthLabel::Malicious => 0.95,
            TruthLabel::Benign => 0.05,
        };
        intel.insert(key.clone(), score);
    }
    Ok(intel)
}

// ---------------------------------------------------------------------------
// Generation internals
// ---------------------------------------------------------------------------

/// Where an entity draw comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Context {
    Benign { org: u32 },
    Campaign { campaign: u32 },
}

/// Which pool serves a draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PoolKey {
    Org(u32, EntityKind),
    Campaign(u32, EntityKind),
    Global(EntityKind),
}

/// Grow-until-cap key pool. Below the cap a draw mints a fresh key with
/// probability `mint`; at the cap it always reuses.
#[derive(Debug)]
struct KeyPool {
    cap: usize,
    mint: f64,
    keys: Vec<String>,
}

impl KeyPool {
    fn new(cap: usize, mint: f64) -> Self {
        KeyPool {
            cap,
            mint,
            keys: Vec::new(),
        }
    }
}

struct Generator {
    config: GeneratorConfig,
    rng: ChaCha8Rng,
    truth: PlantedTruth,
    pools: BTreeMap<PoolKey, KeyPool>,
    seq: u64,
    alert_kind_weights: Vec<(EntityKind, f64)>,
    sender_rate: f64,
    dir_rate: f64,
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    // Knuth's method; lambdas here are small.
    if lambda <= 0.0 {
        return 0;
    }
    let l = (-lambda).exp();
    let mut k = 0u32;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
        if k > 10_000 {
            return k;
        }
    }
}

fn fresh_pool(key: PoolKey) -> KeyPool {
    use EntityKind::*;
    match key {
        PoolKey::Org(_, kind) => match kind {
            IpAddress => KeyPool::new(8, 0.5),
            DeviceName => KeyPool::new(24, 0.5),
            Url => KeyPool::new(10, 0.5),
            Sha1 => KeyPool::new(16, 0.5),
            _ => KeyPool::new(12, 0.5),
        },
        PoolKey::Campaign(_, kind) => match kind {
            IpAddress => KeyPool::new(12, 0.45),
            Url => KeyPool::new(8, 0.45),
            Sha1 => KeyPool::new(6, 0.4),
            EmailCluster => KeyPool::new(3, 0.6),
            EmailAddress => KeyPool::new(3, 0.6),
            FileDir => KeyPool::new(2, 0.5),
            _ => KeyPool::new(6, 0.45),
        },
        PoolKey::Global(kind) => match kind {
            IpAddress => KeyPool::new(150, 0.3),
            Url => KeyPool::new(160, 0.4),
            Sha1 => KeyPool::new(200, 0.35),
            EmailCluster => KeyPool::new(120, 0.35),
            EmailAddress => KeyPool::new(240, 0.35),
            FileDir => KeyPool::new(40, 0.3),
            _ => KeyPool::new(120, 0.35),
        },
    }
}

/// Probability a benign draw of this kind comes from the globally shared
/// pool instead of the org-local one. Shared benign services are what
/// stitch organizations into one large component.
fn global_share(kind: EntityKind) -> f64 {
    use EntityKind::*;
    match kind {
        IpAddress => 0.3,
        Url => 0.5,
        Sha1 => 0.4,
        AppId => 0.9,
        RegistryKey | RegistryVal => 0.5,
        EmailCluster | EmailAddress | FileDir => 1.0,
        _ => 0.2,
    }
}

impl Generator {
    fn new(mut config: GeneratorConfig) -> Result<Self, GenError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let alert_pairs: &[(EntityKind, &str)] = &[
            (EntityKind::Sha1, "AlertId->SHA1"),
            (EntityKind::CampaignId, "AlertId->CampaignId"),
            (EntityKind::SessionId, "AlertId->SessionId"),
            (EntityKind::EmailId, "AlertId->EmailId"),
            (EntityKind::AppId, "AlertId->AppId"),
            (EntityKind::Url, "AlertId->URL"),
            (EntityKind::IpAddress, "AlertId->IpAddress"),
            (EntityKind::DeviceName, "AlertId->DeviceName"),
            (EntityKind::ResourceId, "AlertId->ResourceId"),
            (EntityKind::RegistryKey, "AlertId->RegistryKey"),
            (EntityKind::RegistryVal, "AlertId->RegistryVal"),
        ];
        let alert_kind_weights: Vec<(EntityKind, f64)> = alert_pairs
            .iter()
            .map(|(kind, label)| (*kind, config.mixture_weight(label)))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        if alert_kind_weights.is_empty() {
            return Err(GenError::BadConfig(
                "mixture assigns no mass to alert evidence kinds".into(),
            ));
        }
        let email_w = config.mixture_weight("AlertId->EmailId").max(1e-12);
        let sender_rate = (config.mixture_weight("EmailId->EmailAddress") / email_w).min(1.0);
        let sha_w = config.mixture_weight("AlertId->SHA1").max(1e-12);
        let dir_rate = (config.mixture_weight("SHA1->FileDir") / sha_w).min(1.0);
        Ok(Generator {
            config,
            rng,
            truth: PlantedTruth::default(),
            pools: BTreeMap::new(),
            seq: 0,
            alert_kind_weights,
            sender_rate,
            dir_rate,
        })
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    /// Registers an entity's planted label the first time it is seen.
    fn plant(&mut self, kind: EntityKind, key: &str, context: Context) {
        let canonical = IntelGraph::canonical_key(key);
        if self.truth.entities.contains_key(&(kind, canonical.clone())) {
            return;
        }
        let (label, campaign) = match context {
            Context::Benign { .. } => (TruthLabel::Benign, None),
            Context::Campaign { campaign } => {
                let malicious = self.rng.random::<f64>() < self.config.homophily;
                (
                    if malicious {
                        TruthLabel::Malicious
                    } else {
                        TruthLabel::Benign
                    },
                    Some(format!("camp-{campaign:03}")),
                )
            }
        };
        self.truth
            .entities
            .insert((kind, canonical), PlantedEntity { label, campaign });
    }

    fn mint_key(&mut self, kind: EntityKind, context: Context) -> String {
        let seq = self.next_seq();
        let rng = &mut self.rng;
        match (kind, context) {
            (EntityKind::EmailId, _) => format!("msg-{seq:08x}"),
            (EntityKind::IpAddress, Context::Benign { org }) => {
                format!("10.{}.{}.{}", org / 250, org % 250, rng.random_range(1..255))
            }
            (EntityKind::IpAddress, Context::Campaign { campaign }) => {
                let subnet = rng.random_range(0..2u32);
                format!(
                    "203.{}.{}.{}",
                    campaign / 100,
                    (campaign * 2 + subnet) % 250,
                    rng.random_range(1..255)
                )
            }
            (EntityKind::Url, Context::Benign { org }) => {
                if rng.random::<f64>() < 0.5 {
                    format!(
                        "https://svc-{:02}.example.com/p/{seq:06x}",
                        rng.random_range(0..60u32)
                    )
                } else {
                    format!("https://portal-{org:04}.example.org/p/{seq:06x}")
                }
            }
            (EntityKind::Url, Context::Campaign { campaign }) => {
                let host = rng.random_range(0..2u32);
                format!("https://lure-{campaign:03}-{host}.example.net/x/{seq:06x}")
            }
            (EntityKind::Sha1, _) => format!(
                "{:016x}{:016x}{:08x}",
                rng.random::<u64>(),
                rng.random::<u64>(),
                rng.random::<u32>()
            ),
            (EntityKind::DeviceName, Context::Benign { org }) => {
                format!("host-{org:04}-{:03}", rng.random_range(0..400u32))
            }
            (EntityKind::DeviceName, Context::Campaign { .. }) => {
                format!("host-ext-{:04}", rng.random_range(0..2000u32))
            }
            (EntityKind::CampaignId, Context::Campaign { campaign }) => {
                format!("mailcamp-{campaign:03}-{}", rng.random_range(0..4u32))
            }
            (EntityKind::CampaignId, Context::Benign { .. }) => format!("bulk-{seq:06x}"),
            (EntityKind::SessionId, _) => format!("sess-{seq:08x}"),
            (EntityKind::AppId, _) => format!("app-{:03}", rng.random_range(0..40u32)),
            (EntityKind::ResourceId, _) => format!("res-{seq:08x}"),
            (EntityKind::RegistryKey, _) => {
                format!("hklm\\software\\vendor-{:03}\\run", rng.random_range(0..80u32))
            }
            (EntityKind::RegistryVal, _) => format!("regval-{seq:06x}"),
            (EntityKind::EmailAddress, Context::Benign { .. }) => {
                format!("sender{:04}@mail.example.com", rng.random_range(0..4000u32))
            }
            (EntityKind::EmailAddress, Context::Campaign { campaign }) => {
                format!(
                    "offer{:02}@lure-{campaign:03}.example.net",
                    rng.random_range(0..40u32)
                )
            }
            (EntityKind::EmailCluster, Context::Benign { .. }) => {
                format!("cl-bulk-{:04}", rng.random_range(0..3000u32))
            }
            (EntityKind::EmailCluster, Context::Campaign { campaign }) => {
                format!("cl-camp-{campaign:03}-{}", rng.random_range(0..6u32))
            }
            (EntityKind::FileDir, Context::Campaign { .. }) => {
                format!("c:\\programdata\\stage-{:03}", rng.random_range(0..200u32))
            }
            (EntityKind::FileDir, Context::Benign { .. }) => {
                let dirs = [
                    "c:\\windows\\temp",
                    "c:\\users\\public\\downloads",
                    "/tmp",
                    "/var/opt/app",
                    "c:\\program files\\common",
                ];
                let base = dirs[rng.random_range(0..dirs.len())];
                format!("{base}\\{:02}", rng.random_range(0..30u32))
            }
            (EntityKind::OrgId | EntityKind::IncidentId | EntityKind::AlertId, _)
            | (EntityKind::IpRange | EntityKind::UrlDomain, _) => {
                unreachable!("not minted through pools")
            }
        }
    }

    fn draw_pooled(&mut self, kind: EntityKind, context: Context, pool_key: PoolKey) -> String {
        let mut pool = self
            .pools
            .remove(&pool_key)
            .unwrap_or_else(|| fresh_pool(pool_key));
        let drawn = if pool.keys.is_empty()
            || (pool.keys.len() < pool.cap && self.rng.random::<f64>() < pool.mint)
        {
            let fresh = self.mint_key(kind, context);
            pool.keys.push(fresh.clone());
            fresh
        } else {
            pool.keys[self.rng.random_range(0..pool.keys.len())].clone()
        };
        self.pools.insert(pool_key, pool);
        drawn
    }

    /// Draws an entity key for a kind in context. Email messages are
    /// always fresh; everything else pools so reuse and cross-org sharing
    /// emerge.
    fn draw_entity(&mut self, kind: EntityKind, context: Context) -> String {
        let key = if kind == EntityKind::EmailId {
            self.mint_key(kind, context)
        } else {
            let pool_key = match context {
                Context::Campaign { campaign } => PoolKey::Campaign(campaign, kind),
                Context::Benign { org } => {
                    if self.rng.random::<f64>() < global_share(kind) {
                        PoolKey::Global(kind)
                    } else {
                        PoolKey::Org(org, kind)
                    }
                }
            };
            self.draw_pooled(kind, context, pool_key)
        };
        self.plant(kind, &key, context);
        key
    }

    fn sample_alert_kind(&mut self) -> EntityKind {
        let total: f64 = self.alert_kind_weights.iter().map(|(_, w)| w).sum();
        let mut x = self.rng.random::<f64>() * total;
        for (kind, w) in &self.alert_kind_weights {
            x -= w;
            if x <= 0.0 {
                return *kind;
            }
        }
        self.alert_kind_weights.last().unwrap().0
    }

    /// Builds one evidence item, planting truth for the entity and any
    /// derived parents.
    fn build_evidence(&mut self, kind: EntityKind, context: Context) -> EvidenceItem {
        let key = self.draw_entity(kind, context);
        let mut ctx = EvidenceContext::default();
        match kind {
            EntityKind::EmailId => {
                let cluster = self.draw_entity(EntityKind::EmailCluster, context);
                ctx.email_clusters.push(cluster);
                if self.rng.random::<f64>() < self.config.extra_cluster_probability {
                    let extra = self.draw_entity(EntityKind::EmailCluster, context);
                    if !ctx.email_clusters.contains(&extra) {
                        ctx.email_clusters.push(extra);
                    }
                }
                if self.rng.random::<f64>() < self.sender_rate {
                    ctx.email_address = Some(self.draw_entity(EntityKind::EmailAddress, context));
                }
            }
            EntityKind::Sha1 => {
                if self.rng.random::<f64>() < self.dir_rate {
                    ctx.file_dir = Some(self.draw_entity(EntityKind::FileDir, context));
                }
            }
            EntityKind::Url => {
                if let Some(domain) = crate::telemetry::url_domain(&key) {
                    self.plant(EntityKind::UrlDomain, &domain, context);
                }
            }
            EntityKind::IpAddress => {
                if let Some(range) = crate::telemetry::ip_slash24(&key) {
                    self.plant(EntityKind::IpRange, &range, context);
                }
            }
            _ => {}
        }
        let context_present =
            ctx.file_dir.is_some() || ctx.email_address.is_some() || !ctx.email_clusters.is_empty();
        EvidenceItem {
            kind,
            key,
            context: context_present.then_some(ctx),
        }
    }

    fn generate(mut self) -> (Vec<TelemetryBatch>, PlantedTruth) {
        let start = Timestamp::parse_rfc3339(&self.config.start_time).expect("validated");
        let malicious_rate = self.config.effective_malicious_incident_rate();
        let mut batches = Vec::with_capacity(self.config.num_batches as usize);
        let mut incident_seq = 0u64;
        let mut alert_seq = 0u64;

        for b in 0..self.config.num_batches {
            let batch_start = start.plus_hours(b as f64 * self.config.batch_hours);
            let batch_end = batch_start.plus_hours(self.config.batch_hours);
            let mut records = Vec::new();

            for org in 0..self.config.num_orgs {
                let incidents = poisson(&mut self.rng, self.config.incidents_per_org_per_batch);
                for _ in 0..incidents {
                    incident_seq += 1;
                    let malicious = self.rng.random::<f64>() < malicious_rate;
                    let campaign = if malicious {
                        Some(self.rng.random_range(0..self.config.num_campaigns))
                    } else {
                        None
                    };
                    let incident_key = format!("inc-{org:04}-{incident_seq:07x}");
                    let alerts = 1 + poisson(
                        &mut self.rng,
                        (self.config.alerts_per_incident - 1.0).max(0.0),
                    );
                    for _ in 0..alerts {
                        alert_seq += 1;
                        let offset = self.rng.random::<f64>() * self.config.batch_hours;
                        let timestamp = batch_start.plus_hours(offset);
                        let entity_count = 1 + poisson(
                            &mut self.rng,
                            (self.config.entities_per_alert - 1.0).max(0.0),
                        );
                        let mut evidence = Vec::with_capacity(entity_count as usize);
                        for _ in 0..entity_count {
                            let kind = self.sample_alert_kind();
                            let context = match campaign {
                                Some(c) if self.rng.random::<f64>() >= self.config.victim_mix => {
                                    Context::Campaign { campaign: c }
                                }
                                _ => Context::Benign { org },
                            };
                            evidence.push(self.build_evidence(kind, context));
                        }
                        let graded = self.rng.random::<f64>() < self.config.grade_fraction;
                        let alert_grade = if !graded {
                            AlertGrade::Ungraded
                        } else if campaign.is_some() {
                            AlertGrade::TruePositive
                        } else if self.rng.random::<f64>() < 0.5 {
                            AlertGrade::FalsePositive
                        } else {
                            AlertGrade::BenignPositive
                        };
                        let disrupted = campaign.is_some()
                            && self.rng.random::<f64>() < self.config.disruption_rate;
                        records.push(TelemetryRecord {
                            timestamp,
                            org_key: format!("org-{org:04}"),
                            incident_key: incident_key.clone(),
                            alert_key: format!("al-{org:04}-{alert_seq:07x}"),
                            alert_disrupted: disrupted,
                            evidence,
                            alert_grade,
                        });
                    }
                }
            }
            records.sort_by(|a, b| {
                a.timestamp
                    .partial_cmp(&b.timestamp)
                    .unwrap()
                    .then_with(|| a.alert_key.cmp(&b.alert_key))
            });
            batches.push(TelemetryBatch {
                batch_start,
                batch_end,
                records,
            });
        }
        (batches, self.truth)
    }
}

/// Generates the full batch sequence and planted truth for a region.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<TelemetryBatch>, PlantedTruth), GenError> {
    Generator::new(config.clone()).map(Generator::generate)
}

/// Summary returned by [`write_region`].
#[derive(Debug, Clone, Serialize)]
pub struct RegionSummary {
    pub batches: usize,
    pub records: usize,
    pub entities_planted: usize,
    pub malicious_planted: usize,
    pub intel_revealed: usize,
}

/// Generates a region and writes `batch_NNN.jsonl` files, `truth.json`
/// and `intel.json` (the revealed fraction) into `out_dir`.
pub fn write_region(config: &GeneratorConfig, out_dir: &Path) -> Result<RegionSummary, GenError> {
    let mut cfg = config.clone();
    cfg.validate()?;
    let (batches, truth) = generate(&cfg)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| GenError::Io(out_dir.display().to_string(), e.to_string()))?;
    let mut records = 0usize;
    for (i, batch) in batches.iter().enumerate() {
        let path = out_dir.join(format!("batch_{i:03}.jsonl"));
        crate::telemetry::write_batch_jsonl(batch, &path)
            .map_err(|e| GenError::Io(path.display().to_string(), e.to_string()))?;
        records += batch.records.len();
    }
    truth.save(&out_dir.join("truth.json"))?;
    let intel = reveal_fraction(&truth, cfg.effective_reveal_fraction(), cfg.seed)?;
    crate::labels::save_intel(&intel, &out_dir.join("intel.json"))
        .map_err(|e| GenError::Io("intel.json".into(), e.to_string()))?;
    let malicious = truth
        .entities
        .values()
        .filter(|e| e.label == TruthLabel::Malicious)
        .count();
    Ok(RegionSummary {
        batches: batches.len(),
        records,
        entities_planted: truth.len(),
        malicious_planted: malicious,
        intel_revealed: intel.len(),
    })
}
