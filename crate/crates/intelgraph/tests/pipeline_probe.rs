// Temporary probe for pipeline tuning; prints end-to-end metrics.

use intelgraph::graph::{EdgePolicyTable, IntelGraph};
use intelgraph::labels::{initialize_labels, BootstrapWeights};
use intelgraph::pipeline::{run, RunConfig};
use intelgraph::propagation::{degree_normalize, propagate, PropagationConfig};
use intelgraph::synth::{generate, reveal_fraction, write_region, GeneratorConfig};
use intelgraph::telemetry::{apply_batch, SignalLedger};

#[test]
#[ignore]
fn probe_residual_shape() {
    let mut gen = GeneratorConfig::default();
    gen.validate().unwrap();
    let (batches, truth) = generate(&gen).unwrap();
    let mut graph = IntelGraph::new(EdgePolicyTable::builtin());
    let mut ledger = SignalLedger::default();
    for batch in &batches {
        apply_batch(&mut graph, batch, &mut ledger).unwrap();
    }
    let intel = reveal_fraction(&truth, 0.6, gen.seed).unwrap();
    // Mask everything revealed (no split) to see the best-case shape.
    let export = graph.to_sparse(graph.clock());
    let mut intel_nodes = std::collections::BTreeMap::new();
    for ((kind, key), score) in &intel {
        if let Some(node) = graph.node_by_key(*kind, key) {
            intel_nodes.insert(node.id, *score);
        }
    }
    let y0 = initialize_labels(
        &graph,
        &export.order,
        &intel_nodes,
        &std::collections::BTreeMap::new(),
        &BootstrapWeights::default(),
    )
    .unwrap();
    println!(
        "n={} masked={} ({:.3})",
        y0.len(),
        y0.masked_count(),
        y0.masked_count() as f64 / y0.len() as f64
    );
    let a_hat = degree_normalize(&export.matrix).unwrap();
    let cfg = PropagationConfig {
        max_iters: 300,
        tolerance: 1e-9,
    };
    let result = propagate(&a_hat, &y0, &cfg).unwrap();
    for (i, r) in result.residual_trace.iter().enumerate() {
        if i < 10 || i % 10 == 0 {
            println!("iter {:3} residual {:.6e}", i + 1, r);
        }
    }
    let t = &result.residual_trace;
    if t.len() > 20 {
        let late_ratio = t[t.len() - 1] / t[t.len() - 11];
        println!("late decay ratio over 10 iters: {late_ratio:.4}");
    }

    // Which rows are still moving late? Run 150 iterations, then one more,
    // and report the movers by kind.
    let warm = propagate(
        &a_hat,
        &y0,
        &PropagationConfig {
            max_iters: 150,
            tolerance: 1e-12,
        },
    )
    .unwrap();
    let warm2 = propagate(
        &a_hat,
        &warm.labels,
        &PropagationConfig {
            max_iters: 1,
            tolerance: 1e-12,
        },
    )
    .unwrap();
    let mut movers: Vec<(f64, usize)> = (0..y0.len())
        .map(|i| {
            let d = (warm2.labels.rows[i][1] - warm.labels.rows[i][1]).abs();
            (d, i)
        })
        .collect();
    movers.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut by_kind: std::collections::BTreeMap<&str, (f64, u64)> = Default::default();
    for (d, i) in &movers {
        let node = graph.node(y0.order[*i]).unwrap();
        let slot = by_kind.entry(node.kind.name()).or_insert((0.0, 0));
        slot.0 += d * d;
        slot.1 += 1;
    }
    println!("--- squared movement by kind after 150 iters ---");
    for (kind, (sq, n)) in &by_kind {
        println!("{kind:14} sum_sq={sq:.3e} n={n}");
    }
    println!("--- top movers ---");
    for (d, i) in movers.iter().take(15) {
        let node = graph.node(y0.order[*i]).unwrap();
        let masked_neighbors = graph
            .incident_edges(node.id)
            .filter(|e| {
                let other = if e.src == node.id { e.dst } else { e.src };
                let pos = export.index_of[&other] as usize;
                y0.mask[pos]
            })
            .count();
        println!(
            "Δ={d:.2e} {} {} deg={} masked_nbrs={} p={:.3}",
            node.kind.name(),
            node.key,
            graph.degree(node.id),
            masked_neighbors,
            warm.labels.rows[*i][1]
        );
    }
}

#[test]
#[ignore]
fn probe_default_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let tele = dir.path().join("telemetry");
    let mut gen = GeneratorConfig::default();
    gen.reveal_fraction = Some(0.6);
    let summary = write_region(&gen, &tele).unwrap();
    println!("{summary:?}");

    let config = RunConfig {
        telemetry_dir: tele.clone(),
        intel: tele.join("intel.json"),
        truth: Some(tele.join("truth.json")),
        output_dir: dir.path().join("run"),
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let outcome = run(&config).unwrap();
    println!("pipeline took {:?}", start.elapsed());
    let r = &outcome.report;
    println!(
        "graph: nodes={} edges={} lcc={}",
        r.graph.num_nodes, r.graph.num_edges, r.graph.lcc_size
    );
    println!(
        "propagation: iters={} converged={} final_residual={:.6}",
        r.propagation.iterations_used, r.propagation.converged, r.propagation.final_residual
    );
    println!(
        "calibration: t*={:.4} nll {:.4} -> {:.4} shift {:.5}",
        r.calibration.t_star,
        r.calibration.nll_before,
        r.calibration.nll_after,
        r.calibration.mean_abs_score_shift
    );
    println!(
        "split: {}/{}/{} present {}/{}/{}",
        r.split.train, r.split.validation, r.split.test,
        r.split.train_present, r.split.validation_present, r.split.test_present
    );
    println!(
        "metrics: f1_macro={:.4} precision={:.4} recall={:.4} pr_auc={:?} threshold={:.4}",
        r.metrics.f1_macro,
        r.metrics.precision_macro,
        r.metrics.recall_macro,
        r.metrics.pr_auc,
        r.metrics.best_threshold
    );
    println!("confusion: {:?}", r.metrics.confusion);
    for (kind, m) in &r.per_kind.per_kind {
        println!(
            "  {kind:14} support={} f1={:.4} auc={:?}",
            m.support, m.f1_macro, m.pr_auc
        );
    }
    println!("skipped kinds: {:?}", r.per_kind.skipped);
    println!("per-batch f1 trail:");
    for row in &outcome.batch_rows {
        if row.batch_index % 4 == 0 || row.batch_index == 23 {
            println!(
                "  batch {:02} nodes={} f1={:.4} auc={:?} iters={} t*={:.3}",
                row.batch_index, row.num_nodes, row.f1_macro, row.pr_auc,
                row.iterations_used, row.t_star
            );
        }
    }
}
