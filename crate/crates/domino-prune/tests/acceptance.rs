//! Acceptance suite: every release gate in one binary, one PASS/FAIL line
//! per criterion. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; criteria 6 and 7 train fixtures and run the full
//! campaign grid, which takes several minutes of CPU.

use std::collections::BTreeMap;
use std::time::Instant;

use domino_prune::dependency::{oracle::oracle_prune_set, DependencyGraph, FaultInjection, PrunedMask};
use domino_prune::domino::{score_all, DominoConfig, Variant};
use domino_prune::engine::{backward, evaluate_accuracy, train::train_sgd};
use domino_prune::fixtures;
use domino_prune::graph::{absorb_activations, ChannelRef, GroupMapping, NetworkGraph};
use domino_prune::model_io::synth::synth_dataset;
use domino_prune::pruner::{run_campaign, CampaignConfig};
use domino_prune::report::{
    headline, improvements, parse_trace, summarize, write_improvement_csv, write_summary_csv,
    write_trace,
};
use domino_prune::rng::Rng;
use domino_prune::saliency::{compute_raw, BaseMetric, MetricConfig, RawSaliencies, RawScore};
use domino_prune::tensor::Tensor;
use domino_prune::verify;

fn pass(criterion: usize, name: &str, detail: &str) {
    println!("criterion {criterion} ({name}): PASS — {detail}");
}

#[test]
fn criterion_1_prune_set_oracle_equivalence() {
    let started = Instant::now();
    let result = verify::check_prune_set_equivalence(200, FaultInjection::default());
    let elapsed = started.elapsed();
    assert!(
        result.passed,
        "criterion 1 (prune-set oracle equivalence): FAIL — {}",
        result.detail
    );
    assert!(
        elapsed.as_secs() < 30,
        "criterion 1: FAIL — took {elapsed:?}, bound is 30 s"
    );
    pass(1, "prune-set oracle equivalence", &format!("{} in {elapsed:.2?}", result.detail));
}

#[test]
fn criterion_2_coupling_micro_examples() {
    // (a) grouped coupling: g=2, m_out=4, m_in=2 pairs channels {0,2} and {1,3}
    let g = absorb_activations(&fixtures::grouped_micro(GroupMapping::Interleaved)).unwrap();
    let dep = DependencyGraph::build(&g).unwrap();
    let prev = g.layer_by_name("prev").unwrap().id;
    let grouped = g.layer_by_name("grouped").unwrap().id;
    assert_eq!(
        dep.coparents_closure(ChannelRef::output(prev, 0)).unwrap(),
        vec![ChannelRef::output(prev, 0), ChannelRef::output(prev, 2)],
        "criterion 2a: FAIL"
    );
    assert_eq!(
        dep.coparents_closure(ChannelRef::output(prev, 1)).unwrap(),
        vec![ChannelRef::output(prev, 1), ChannelRef::output(prev, 3)],
        "criterion 2a: FAIL"
    );
    assert_eq!(
        dep.siblings_closure(ChannelRef::output(prev, 0)).unwrap(),
        vec![ChannelRef::input_slot(grouped, 0)],
        "criterion 2a: FAIL (slot shared across groups counts once)"
    );

    // (b) linear networks: coparents are singletons, siblings equal succ
    let lin = absorb_activations(&fixtures::linear_toy(3)).unwrap();
    let ldep = DependencyGraph::build(&lin).unwrap();
    for c in ldep.weight_bearing_channels() {
        assert_eq!(ldep.coparents_closure(c).unwrap(), vec![c], "criterion 2b: FAIL");
        assert_eq!(
            ldep.siblings_closure(c).unwrap(),
            ldep.successors(c).unwrap(),
            "criterion 2b: FAIL"
        );
    }

    // (c) two joins sharing a spine couple all three producing convs
    let spine = absorb_activations(&fixtures::spine_toy(3)).unwrap();
    let sdep = DependencyGraph::build(&spine).unwrap();
    let stem = spine.layer_by_name("stem").unwrap().id;
    let conv1 = spine.layer_by_name("conv1").unwrap().id;
    let conv2 = spine.layer_by_name("conv2").unwrap().id;
    for i in 0..spine.out_channels(stem) {
        assert_eq!(
            sdep.coparents_closure(ChannelRef::output(stem, i)).unwrap(),
            vec![
                ChannelRef::output(stem, i),
                ChannelRef::output(conv1, i),
                ChannelRef::output(conv2, i)
            ],
            "criterion 2c: FAIL at index {i}"
        );
    }
    pass(2, "coupling micro-examples", "grouped pairs {0,2}/{1,3}, linear singletons, spine couples all three producers, exact");
}

#[test]
fn criterion_3_dead_parameter_invariant() {
    let graph = fixtures::resblock_toy(3);
    let spec = fixtures::synth_spec_for(&graph, Some(32));
    let (_, test) = synth_dataset(3, &spec).unwrap();
    let indices: Vec<usize> = (0..16).collect();
    let (batch, labels) = test.gather(&indices);
    let result = verify::check_zero_propagation(&graph, &batch, &labels);
    assert!(
        result.passed,
        "criterion 3 (dead-parameter invariant): FAIL — {}",
        result.detail
    );
    pass(3, "dead-parameter invariant", &result.detail);
}

#[test]
fn criterion_4_gradient_correctness() {
    let started = Instant::now();
    let result = verify::check_gradients(1e-3);
    let elapsed = started.elapsed();
    assert!(
        result.passed,
        "criterion 4 (gradient correctness): FAIL — {}",
        result.detail
    );
    assert!(
        elapsed.as_secs() < 60,
        "criterion 4: FAIL — took {elapsed:?}, bound is 60 s"
    );
    pass(4, "gradient correctness", &format!("{} in {elapsed:.2?}", result.detail));
}

/// Independent recomputation by explicit closure enumeration.
fn enumerate_score(
    dep: &DependencyGraph,
    raws: &RawSaliencies,
    c: ChannelRef,
    variant: Variant,
    averaged: bool,
) -> f64 {
    let mut raw = 0.0f64;
    let mut count = 0usize;
    let mut add = |s: &RawScore| {
        raw += s.raw;
        count += s.count;
    };
    match variant {
        Variant::Channel => add(&raws.outputs[&c]),
        Variant::DominoO => {
            for x in dep.coparents_closure(c).unwrap() {
                add(&raws.outputs[&x]);
            }
        }
        Variant::DominoIO => {
            for x in dep.coparents_closure(c).unwrap() {
                add(&raws.outputs[&x]);
            }
            for x in dep.siblings_closure(c).unwrap() {
                add(&raws.slots[&x]);
            }
        }
    }
    if averaged {
        raw / count as f64
    } else {
        raw
    }
}

#[test]
fn criterion_5_domino_arithmetic() {
    let mut rng = Rng::new(42);
    let fixtures_list = vec![
        absorb_activations(&fixtures::linear_toy(1)).unwrap(),
        absorb_activations(&fixtures::resblock_toy(2)).unwrap(),
        absorb_activations(&fixtures::spine_toy(3)).unwrap(),
        absorb_activations(&fixtures::grouped_toy(4, GroupMapping::Interleaved)).unwrap(),
        absorb_activations(&fixtures::grouped_toy(5, GroupMapping::Blocked)).unwrap(),
        absorb_activations(&fixtures::grouped_micro(GroupMapping::Interleaved)).unwrap(),
        absorb_activations(&fixtures::flatten_toy(6)).unwrap(),
    ];
    let mut scored = 0usize;
    for g in &fixtures_list {
        let dep = DependencyGraph::build(g).unwrap();
        let domino_prune::graph::Shape::Map { c, h, w } = g.out_shape(g.input_layer()) else {
            unreachable!()
        };
        let classes = g.out_shape(g.loss_layer()).elements();
        let n = 4usize;
        let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.range_f64(0.0, 1.0) as f32).collect();
        let batch = Tensor::new(vec![n, c, h, w], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let grads = backward(g, &batch, &labels).unwrap();
        for base in [BaseMetric::L1Weights, BaseMetric::TaylorWeights, BaseMetric::TaylorFmaps] {
            let raws = compute_raw(g, &dep, base, Some(&grads), &PrunedMask::new()).unwrap();
            for variant in [Variant::Channel, Variant::DominoO, Variant::DominoIO] {
                for averaged in [false, true] {
                    let cfg = DominoConfig::new(variant, MetricConfig::new(base, averaged));
                    let scores = score_all(&dep, &raws, &cfg).unwrap();
                    for (&ch, &score) in &scores.scores {
                        let reference = enumerate_score(&dep, &raws, ch, variant, averaged);
                        assert!(
                            (score - reference).abs() <= 1e-6 * reference.abs().max(1e-12),
                            "criterion 5: FAIL — {} {variant:?} avg={averaged} {ch:?}: {score} vs {reference}",
                            g.name
                        );
                        if variant != Variant::Channel {
                            for member in dep.coparents_closure(ch).unwrap() {
                                assert_eq!(
                                    scores.scores[&member].to_bits(),
                                    score.to_bits(),
                                    "criterion 5: FAIL — unequal scores inside one class"
                                );
                            }
                        }
                        scored += 1;
                    }
                }
            }
        }
        // prune-set equality doubles as closure sanity on these fixtures
        for seed in dep.weight_bearing_channels() {
            assert_eq!(
                dep.prune_set(seed).unwrap(),
                oracle_prune_set(g, seed).unwrap(),
                "criterion 5: FAIL — closure mismatch on {}",
                g.name
            );
        }
    }
    pass(5, "domino arithmetic", &format!("{scored} scores across 7 fixtures x 3 variants x 3 metrics x avg on/off, within 1e-6; class scores bit-equal"));
}

const EXPERIMENT_SEEDS: [u64; 4] = [1, 2, 3, 4];
const DATA_SEED: u64 = 7;

/// Train both toy fixtures for each run seed and run the campaign grid.
/// Returns trace CSVs keyed by file name.
fn run_protocol_experiment() -> BTreeMap<String, String> {
    let mut outputs = BTreeMap::new();
    type Build = fn(u64) -> NetworkGraph;
    let fixtures_list: [(&str, f64, Build); 2] = [
        ("resblock-toy", 0.60, fixtures::resblock_toy),
        ("grouped-toy", 0.95, |s| {
            fixtures::grouped_toy(s, GroupMapping::Interleaved)
        }),
    ];
    for (name, accuracy_floor, build) in fixtures_list {
        for &seed in &EXPERIMENT_SEEDS {
            let mut graph = build(seed);
            let spec = fixtures::synth_spec_for(&graph, None);
            let (train, test) = synth_dataset(DATA_SEED, &spec).unwrap();
            assert!(train.len() >= 2000 && test.len() >= 1000);
            train_sgd(&mut graph, &train, &fixtures::train_config_for(name, seed)).unwrap();
            let accuracy = evaluate_accuracy(&graph, &test).unwrap();
            assert!(
                accuracy >= accuracy_floor,
                "criterion 6: FAIL — {name} seed {seed} trained to {accuracy:.3} < {accuracy_floor}"
            );
            for variant in [Variant::Channel, Variant::DominoO, Variant::DominoIO] {
                for metric in ["l1", "l1-avg"] {
                    let cfg = CampaignConfig {
                        domino: DominoConfig::new(variant, MetricConfig::parse(metric).unwrap()),
                        stop_drop: 5.0,
                        eval_every: 1,
                        seed,
                        include_classifier: false,
                    };
                    let trace = run_campaign(graph.clone(), &train, &test, &cfg).unwrap();
                    outputs.insert(
                        format!("trace_{name}_{}_{metric}_{seed}.csv", variant.as_str()),
                        write_trace(&trace),
                    );
                }
            }
        }
    }
    outputs
}

#[test]
fn criterion_6_and_7_protocol_experiment() {
    let started = Instant::now();
    let outputs = run_protocol_experiment();

    // archive traces and summaries
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-traces");
    std::fs::create_dir_all(&dir).unwrap();
    for (file, text) in &outputs {
        std::fs::write(dir.join(file), text).unwrap();
    }
    let traces: Vec<_> = outputs.values().map(|t| parse_trace(t).unwrap()).collect();
    let summaries = summarize(&traces).unwrap();
    let imps = improvements(&summaries).unwrap();
    std::fs::write(dir.join("summary.csv"), write_summary_csv(&summaries)).unwrap();
    std::fs::write(dir.join("improvement.csv"), write_improvement_csv(&imps)).unwrap();

    // directional check on the residual fixture: domino-io with l1-avg may
    // not trail the channel baseline by more than 2 points
    let mean_of = |variant: &str, metric: &str| -> f64 {
        summaries
            .iter()
            .find(|s| s.model == "resblock-toy" && s.variant == variant && s.metric == metric)
            .unwrap_or_else(|| panic!("criterion 6: FAIL — missing condition {variant}/{metric}"))
            .mean
    };
    let io_avg = mean_of("domino-io", "l1-avg");
    let channel_avg = mean_of("channel", "l1-avg");
    assert!(
        io_avg >= channel_avg - 0.02,
        "criterion 6: FAIL — mean headline domino-io/l1-avg {:.4} trails channel/l1-avg {:.4} by more than 2 points",
        io_avg,
        channel_avg
    );
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 30 * 60,
        "criterion 6: FAIL — experiment took {elapsed:?}, bound is 30 min"
    );
    pass(
        6,
        "protocol-shape experiment",
        &format!(
            "48 campaigns over 2 fixtures x 3 variants x {{l1, l1-avg}} x 4 seeds in {elapsed:.1?}; resblock-toy mean headline domino-io/l1-avg {:.1}% vs channel/l1-avg {:.1}%; traces archived in {}",
            io_avg * 100.0,
            channel_avg * 100.0,
            dir.display()
        ),
    );

    // criterion 7: the same seeds reproduce every trace byte for byte
    let rerun = run_protocol_experiment();
    assert_eq!(
        outputs.len(),
        rerun.len(),
        "criterion 7: FAIL — rerun produced a different trace set"
    );
    for (file, text) in &outputs {
        assert!(
            rerun.get(file).map(|t| t == text).unwrap_or(false),
            "criterion 7: FAIL — {file} differs between runs"
        );
    }
    pass(
        7,
        "determinism",
        &format!("{} trace CSVs byte-identical across a full rerun", outputs.len()),
    );
}

#[test]
fn headline_statistic_matches_trace_definition() {
    // spot-check the headline definition against a constructed trace
    let records = vec![
        domino_prune::pruner::PruneRecord {
            iteration: 1,
            seed_layer: "a".into(),
            seed_channel: 0,
            set_size: 1,
            weights_removed_cum: 0.2,
            accuracy: 0.90,
        },
        domino_prune::pruner::PruneRecord {
            iteration: 2,
            seed_layer: "a".into(),
            seed_channel: 1,
            set_size: 1,
            weights_removed_cum: 0.4,
            accuracy: 0.84,
        },
    ];
    assert_eq!(headline(&records, 0.90, 5.0).unwrap(), 0.2);
}
