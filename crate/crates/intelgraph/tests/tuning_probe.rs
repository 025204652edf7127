// Temporary probe for generator tuning; prints region statistics.

use std::collections::BTreeMap;

use intelgraph::graph::{EdgePolicyTable, IntelGraph};
use intelgraph::labels::classify;
use intelgraph::synth::{generate, reveal_fraction, GeneratorConfig, TruthLabel};
use intelgraph::telemetry::{apply_batch, SignalLedger};

#[test]
#[ignore]
fn probe_default_region() {
    let mut config = GeneratorConfig::default();
    config.validate().unwrap();
    let (batches, truth) = generate(&config).unwrap();
    let records: usize = batches.iter().map(|b| b.records.len()).sum();
    println!("batches={} records={}", batches.len(), records);
    println!("planted entities={}", truth.len());
    let malicious = truth
        .entities
        .values()
        .filter(|e| e.label == TruthLabel::Malicious)
        .count();
    println!(
        "planted malicious={} ({:.4})",
        malicious,
        malicious as f64 / truth.len() as f64
    );

    let mut graph = IntelGraph::new(EdgePolicyTable::builtin());
    let mut ledger = SignalLedger::default();
    let mut cumulative: BTreeMap<String, u64> = BTreeMap::new();
    for batch in &batches {
        let report = apply_batch(&mut graph, batch, &mut ledger).unwrap();
        for (k, v) in report.edges_added_by_kind {
            *cumulative.entry(k).or_insert(0) += v;
        }
    }
    let stats = graph.stats();
    println!(
        "nodes={} edges={} lcc={} ({:.3}) orgs={} incidents={} alerts={} entities={}",
        stats.num_nodes,
        stats.num_edges,
        stats.lcc_size,
        stats.lcc_size as f64 / stats.num_nodes as f64,
        stats.num_orgs,
        stats.num_incidents,
        stats.num_alerts,
        stats.num_entities
    );
    let total_created: u64 = cumulative.values().sum();
    println!("--- cumulative created edge mix (vs mixture) ---");
    for (k, v) in &cumulative {
        let frac = *v as f64 / total_created as f64;
        let target = config.edge_kind_mixture.get(k).copied().unwrap_or(0.0);
        println!("{k:28} {frac:.4}  target {target:.4}  diff {:+.4}", frac - target);
    }
    println!("--- snapshot edge mix ---");
    for (k, v) in &stats.edge_distribution {
        println!("{k:28} {v:.4}");
    }

    let intel = reveal_fraction(&truth, 0.6, config.seed).unwrap();
    let mut unknown = 0u64;
    let mut benign = 0u64;
    let mut mal = 0u64;
    for node in graph.live_nodes() {
        if !node.kind.is_entity_layer() {
            continue;
        }
        let score = intel
            .get(&(node.kind, node.key.clone()))
            .copied()
            .unwrap_or(0.5);
        match classify(score).unwrap() {
            intelgraph::labels::Verdict::Unknown => unknown += 1,
            intelgraph::labels::Verdict::Benign => benign += 1,
            intelgraph::labels::Verdict::Malicious => mal += 1,
        }
    }
    let denom = (unknown + benign + mal) as f64;
    println!(
        "entity label fractions: unknown={:.4} benign={:.4} malicious={:.4}",
        unknown as f64 / denom,
        benign as f64 / denom,
        mal as f64 / denom
    );
}
