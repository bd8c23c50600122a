use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use domino_prune::dependency::{DependencyGraph, FaultInjection, PrunedMask};
use domino_prune::domino::{score_all, DominoConfig, Variant};
use domino_prune::engine::{backward, evaluate_accuracy, train::train_sgd};
use domino_prune::fixtures;
use domino_prune::graph::{absorb_activations, ChannelRef, GraphOptions, GroupMapping, NetworkGraph, Side};
use domino_prune::model_io::{self, DatasetHandle};
use domino_prune::pruner::{run_campaign, CampaignConfig};
use domino_prune::report::{
    improvements, parse_trace, summarize, write_improvement_csv, write_summary_csv, write_trace,
};
use domino_prune::rng::Rng;
use domino_prune::saliency::{compute_raw, vector_to_csv, MetricConfig};
use domino_prune::verify;

use crate::{DataArgs, ModelArgs};

pub type CmdResult = Result<(), String>;

fn load(model: &ModelArgs) -> Result<NetworkGraph, String> {
    let options = GraphOptions {
        default_mapping: GroupMapping::parse(&model.group_mapping)
            .ok_or_else(|| format!("unknown group mapping `{}`", model.group_mapping))?,
    };
    model_io::load_model(&model.model, &model.blob, &options).map_err(|e| e.to_string())
}

fn load_dataset(
    data: &DataArgs,
    graph: &NetworkGraph,
) -> Result<(DatasetHandle, DatasetHandle), String> {
    match data.dataset.as_str() {
        "cifar10" => {
            let dir = data
                .data_dir
                .as_deref()
                .ok_or("--data-dir is required for --dataset cifar10")?;
            let (train, test) = model_io::cifar::load_cifar10(dir).map_err(|e| e.to_string())?;
            Ok(match data.subset {
                Some(n) => (train.truncate(n), test.truncate(n)),
                None => (train, test),
            })
        }
        "synth" => {
            let spec = fixtures::synth_spec_for(graph, data.subset);
            model_io::synth::synth_dataset(data.data_seed, &spec).map_err(|e| e.to_string())
        }
        other => Err(format!("unknown dataset `{other}`")),
    }
}

fn channel_token(graph: &NetworkGraph, c: &ChannelRef) -> String {
    let side = match c.side {
        Side::Output => "out",
        Side::InputSlot => "in",
    };
    format!("{}:{}:{}", graph.layer(c.layer).name, side, c.index)
}

pub fn analyze(model: &ModelArgs) -> CmdResult {
    let graph = load(model)?;
    let absorbed = absorb_activations(&graph).map_err(|e| e.to_string())?;
    let dep = DependencyGraph::build(&absorbed).map_err(|e| e.to_string())?;
    let mut out = String::new();
    for class in dep.all_classes() {
        let list = |refs: &[ChannelRef]| -> String {
            refs.iter()
                .map(|r| format!("\"{}\"", channel_token(&absorbed, r)))
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            out,
            "{{\"seed\":\"{}\",\"coparents\":[{}],\"siblings\":[{}],\"slices\":{}}}",
            channel_token(&absorbed, &class.seed),
            list(&class.coparents),
            list(&class.siblings),
            class.weight_slices.len()
        )
        .unwrap();
    }
    print!("{out}");
    Ok(())
}

fn metric_config(metric: &str, avg: bool) -> Result<MetricConfig, String> {
    let mut m = MetricConfig::parse(metric).ok_or_else(|| format!("unknown metric `{metric}`"))?;
    if avg {
        m.averaged = true;
    }
    Ok(m)
}

pub fn saliency(
    model: &ModelArgs,
    data: &DataArgs,
    variant: &str,
    metric: &str,
    avg: bool,
) -> CmdResult {
    let graph = load(model)?;
    let absorbed = absorb_activations(&graph).map_err(|e| e.to_string())?;
    let dep = DependencyGraph::build(&absorbed).map_err(|e| e.to_string())?;
    let variant = Variant::parse(variant).ok_or_else(|| format!("unknown variant `{variant}`"))?;
    let metric = metric_config(metric, avg)?;
    let grads = if metric.base.needs_gradients() {
        let (train, _) = load_dataset(data, &absorbed)?;
        let want = metric.saliency_batch.min(train.len());
        let mut indices: Vec<usize> = (0..train.len()).collect();
        Rng::new(data.data_seed).shuffle(&mut indices);
        indices.truncate(want);
        indices.sort_unstable();
        let (batch, labels) = train.gather(&indices);
        Some(backward(&absorbed, &batch, &labels).map_err(|e| e.to_string())?)
    } else {
        None
    };
    let raws = compute_raw(
        &absorbed,
        &dep,
        metric.base,
        grads.as_ref(),
        &PrunedMask::new(),
    )
    .map_err(|e| e.to_string())?;
    let cfg = DominoConfig::new(variant, metric);
    let vector = score_all(&dep, &raws, &cfg).map_err(|e| e.to_string())?;
    print!("{}", vector_to_csv(&absorbed, &raws, &vector));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn prune(
    model: &ModelArgs,
    data: &DataArgs,
    variants: &str,
    metrics: &str,
    avg: bool,
    stop_drop: f64,
    seeds: &str,
    out: &Path,
    eval_every: usize,
    include_classifier: bool,
) -> CmdResult {
    let graph = load(model)?;
    let (train, test) = load_dataset(data, &graph)?;
    let variants: Vec<Variant> = variants
        .split(',')
        .map(|v| Variant::parse(v.trim()).ok_or_else(|| format!("unknown variant `{v}`")))
        .collect::<Result<_, _>>()?;
    let metrics: Vec<MetricConfig> = metrics
        .split(',')
        .map(|m| metric_config(m.trim(), avg))
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| format!("bad seed `{s}`")))
        .collect::<Result<_, _>>()?;
    if eval_every == 0 {
        return Err("--eval-every must be at least 1".into());
    }
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;

    let mut written: Vec<PathBuf> = Vec::new();
    let mut run = || -> CmdResult {
        for variant in &variants {
            for metric in &metrics {
                for &seed in &seeds {
                    let cfg = CampaignConfig {
                        domino: DominoConfig::new(*variant, metric.clone()),
                        stop_drop,
                        eval_every,
                        seed,
                        include_classifier,
                    };
                    let trace = run_campaign(graph.clone(), &train, &test, &cfg)
                        .map_err(|e| e.to_string())?;
                    let path = out.join(format!(
                        "trace_{}_{}_{}_{}.csv",
                        trace.meta.model,
                        variant.as_str(),
                        metric.name(),
                        seed
                    ));
                    std::fs::write(&path, write_trace(&trace)).map_err(|e| e.to_string())?;
                    written.push(path.clone());
                    let last = trace.records.last();
                    println!(
                        "{} {} seed {}: initial {:.4}, {} iterations, final accuracy {:.4}, removed {:.2}%",
                        variant.as_str(),
                        metric.name(),
                        seed,
                        trace.meta.initial_accuracy,
                        trace.records.len(),
                        last.map_or(trace.meta.initial_accuracy, |r| r.accuracy),
                        last.map_or(0.0, |r| r.weights_removed_cum * 100.0)
                    );
                }
            }
        }
        Ok(())
    };
    if let Err(e) = run() {
        for path in &written {
            let _ = std::fs::remove_file(path);
        }
        return Err(e);
    }
    Ok(())
}

pub fn report(traces_dir: &Path, out: Option<&Path>) -> CmdResult {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(traces_dir)
        .map_err(|e| format!("{}: {e}", traces_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(format!("no trace CSVs in {}", traces_dir.display()));
    }
    let mut traces = Vec::new();
    for path in &entries {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        traces.push(
            parse_trace(&text).map_err(|e| format!("{}: {e}", path.display()))?,
        );
    }
    let summaries = summarize(&traces).map_err(|e| e.to_string())?;
    let imps = improvements(&summaries).map_err(|e| e.to_string())?;
    let summary_csv = write_summary_csv(&summaries);
    let improvement_csv = write_improvement_csv(&imps);
    print!("{summary_csv}");
    println!();
    print!("{improvement_csv}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("summary.csv"), &summary_csv).map_err(|e| e.to_string())?;
        std::fs::write(dir.join("improvement.csv"), &improvement_csv)
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn verify(graphs: usize, inject_fault: Option<&str>) -> ExitCode {
    let faults = FaultInjection {
        wrong_group_slot: matches!(inject_fault, Some("wrong-group-slot")),
    };
    let mut results = Vec::new();
    results.push(verify::check_prune_set_equivalence(graphs, faults));
    results.push(verify::check_gradients(1e-3));
    {
        let graph = fixtures::resblock_toy(3);
        let spec = fixtures::synth_spec_for(&graph, Some(16));
        match model_io::synth::synth_dataset(3, &spec) {
            Ok((_, test)) => {
                let indices: Vec<usize> = (0..8).collect();
                let (batch, labels) = test.gather(&indices);
                results.push(verify::check_zero_propagation(&graph, &batch, &labels));
            }
            Err(e) => results.push(verify::CheckResult {
                name: "zero-propagation".into(),
                passed: false,
                detail: e.to_string(),
            }),
        }
    }
    let mut all_pass = true;
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        all_pass &= r.passed;
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

pub fn make_fixture(name: &str, seed: u64, train: bool, data_seed: u64, out: &Path) -> CmdResult {
    let mut graph = match name {
        "tiny-linear" => fixtures::tiny_linear(),
        "linear-toy" => fixtures::linear_toy(seed),
        "resblock-toy" => fixtures::resblock_toy(seed),
        "spine-toy" => fixtures::spine_toy(seed),
        "grouped-toy" => fixtures::grouped_toy(seed, GroupMapping::Interleaved),
        "grouped-micro" => fixtures::grouped_micro(GroupMapping::Interleaved),
        "flatten-toy" => fixtures::flatten_toy(seed),
        other => return Err(format!("unknown fixture `{other}`")),
    };
    if train {
        let spec = fixtures::synth_spec_for(&graph, None);
        let (train_set, test_set) =
            model_io::synth::synth_dataset(data_seed, &spec).map_err(|e| e.to_string())?;
        let cfg = fixtures::train_config_for(name, seed);
        let loss = train_sgd(&mut graph, &train_set, &cfg).map_err(|e| e.to_string())?;
        let acc = evaluate_accuracy(&graph, &test_set).map_err(|e| e.to_string())?;
        println!("trained {name}: final epoch loss {loss:.4}, test accuracy {acc:.4}");
    }
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let manifest = out.join(format!("{name}.manifest"));
    let blob = out.join(format!("{name}.blob"));
    model_io::save_model(&graph, &manifest, &blob).map_err(|e| e.to_string())?;
    println!("wrote {} and {}", manifest.display(), blob.display());
    Ok(())
}
