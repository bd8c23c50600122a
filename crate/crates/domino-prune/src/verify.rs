//! Self-checks: prune-set oracle equivalence on random graphs,
//! finite-difference gradient validation, and the dead-parameter
//! (zero-propagation) invariant. Used by the `verify` CLI command and the
//! acceptance suite.

use crate::dependency::{oracle::oracle_prune_set, DependencyGraph, FaultInjection};
use crate::engine::{backward, forward};
use crate::fixtures;
use crate::graph::{absorb_activations, GroupMapping, NetworkGraph};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, detail: String) -> CheckResult {
        CheckResult {
            name: name.into(),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> CheckResult {
        CheckResult {
            name: name.into(),
            passed: false,
            detail,
        }
    }
}

/// Compare the union-find prune sets against the fixpoint oracle for every
/// seed channel of `count` seeded random graphs.
pub fn check_prune_set_equivalence(count: usize, faults: FaultInjection) -> CheckResult {
    let name = "prune-set-oracle-equivalence";
    let mut seeds_checked = 0usize;
    for i in 0..count {
        let graph = match absorb_activations(&fixtures::random_graph(1000 + i as u64)) {
            Ok(g) => g,
            Err(e) => return CheckResult::fail(name, format!("graph {i}: {e}")),
        };
        let dep = match DependencyGraph::build_with_faults(&graph, faults) {
            Ok(d) => d,
            Err(e) => return CheckResult::fail(name, format!("graph {i}: {e}")),
        };
        for seed in dep.weight_bearing_channels() {
            let fast = match dep.prune_set(seed) {
                Ok(s) => s,
                Err(e) => return CheckResult::fail(name, format!("graph {i} {seed:?}: {e}")),
            };
            let slow = match oracle_prune_set(&graph, seed) {
                Ok(s) => s,
                Err(e) => return CheckResult::fail(name, format!("graph {i} {seed:?}: {e}")),
            };
            if fast != slow {
                return CheckResult::fail(
                    name,
                    format!("graph {i} ({}) seed {seed:?}: fast and oracle prune sets differ", graph.name),
                );
            }
            seeds_checked += 1;
        }
    }
    CheckResult::pass(
        name,
        format!("{count} graphs, {seeds_checked} seed channels, exact set equality"),
    )
}

/// Straight-line f64 forward pass, independent of the engine: naive loops,
/// one sample at a time, every intermediate held in 64-bit. Serves as the
/// noise-free loss evaluator for finite differencing and as a second
/// opinion on the engine's forward values.
pub mod reference {
    use crate::graph::{GroupMapping, LayerOp, NetworkGraph, PostOpKind};
    use crate::tensor::Tensor;

    #[derive(Clone)]
    struct Value {
        c: usize,
        h: usize,
        w: usize,
        data: Vec<f64>,
    }

    fn params(graph: &NetworkGraph, name: &str) -> Vec<f64> {
        graph
            .store()
            .get(name)
            .expect("validated ref")
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    fn conv(
        x: &Value,
        weight: &[f64],
        bias: Option<&[f64]>,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        mapping: GroupMapping,
    ) -> Value {
        let m_in = x.c / groups;
        let oh = (x.h + 2 * pad - kernel) / stride + 1;
        let ow = (x.w + 2 * pad - kernel) / stride + 1;
        let out_per_group = out_c / groups;
        let mut out = vec![0.0f64; out_c * oh * ow];
        for o in 0..out_c {
            let group = o / out_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for slot in 0..m_in {
                        let ci = mapping.channel_of(group, slot, m_in, groups);
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= x.w as isize {
                                    continue;
                                }
                                let wv =
                                    weight[((o * m_in + slot) * kernel + ky) * kernel + kx];
                                acc += wv
                                    * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Value {
            c: out_c,
            h: oh,
            w: ow,
            data: out,
        }
    }

    fn pool(x: &Value, kernel: usize, stride: usize, pad: usize, max: bool) -> Value {
        let oh = (x.h + 2 * pad - kernel) / stride + 1;
        let ow = (x.w + 2 * pad - kernel) / stride + 1;
        let mut out = vec![0.0f64; x.c * oh * ow];
        for c in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut acc = 0.0f64;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let v = x.data[(c * x.h + iy as usize) * x.w + ix as usize];
                            acc += v;
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[(c * oh + oy) * ow + ox] = if max {
                        best
                    } else {
                        acc / (kernel * kernel) as f64
                    };
                }
            }
        }
        Value {
            c: x.c,
            h: oh,
            w: ow,
            data: out,
        }
    }

    fn apply_post(graph: &NetworkGraph, kind: &PostOpKind, x: Value) -> Value {
        match kind {
            PostOpKind::ReLU => Value {
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                ..x
            },
            PostOpKind::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => {
                let (g, b) = (params(graph, gamma), params(graph, beta));
                let (m, v) = (params(graph, mean), params(graph, var));
                let plane = x.h * x.w;
                let mut data = x.data.clone();
                for c in 0..x.c {
                    let inv = 1.0 / ((v[c] + crate::engine::BN_EPS as f64).sqrt());
                    for p in 0..plane {
                        data[c * plane + p] = (x.data[c * plane + p] - m[c]) * inv * g[c] + b[c];
                    }
                }
                Value { data, ..x }
            }
            PostOpKind::Bias { bias } => {
                let b = params(graph, bias);
                let plane = x.h * x.w;
                let mut data = x.data.clone();
                for c in 0..x.c {
                    for p in 0..plane {
                        data[c * plane + p] += b[c];
                    }
                }
                Value { data, ..x }
            }
            PostOpKind::MaxPool {
                kernel,
                stride,
                pad,
            } => pool(&x, *kernel, *stride, *pad, true),
            PostOpKind::AvgPool {
                kernel,
                stride,
                pad,
            } => pool(&x, *kernel, *stride, *pad, false),
            PostOpKind::GlobalAvgPool => {
                let plane = (x.h * x.w) as f64;
                let data = (0..x.c)
                    .map(|c| {
                        x.data[c * x.h * x.w..(c + 1) * x.h * x.w].iter().sum::<f64>() / plane
                    })
                    .collect();
                Value {
                    c: x.c,
                    h: 1,
                    w: 1,
                    data,
                }
            }
        }
    }

    /// Mean cross-entropy of `graph` over the batch, all math in f64.
    pub fn loss_f64(graph: &NetworkGraph, batch: &Tensor, labels: &[usize]) -> f64 {
        let n = labels.len();
        let per = batch.len() / n;
        let mut total = 0.0f64;
        for (item, &label) in labels.iter().enumerate() {
            let mut values: Vec<Option<Value>> = vec![None; graph.layers().len()];
            for &id in graph.topo() {
                let node = graph.layer(id);
                let input = |i: usize| -> &Value {
                    values[graph.preds(id)[i].0].as_ref().expect("topo order")
                };
                let mut v = match &node.op {
                    LayerOp::Input {
                        channels,
                        height,
                        width,
                    } => Value {
                        c: *channels,
                        h: *height,
                        w: *width,
                        data: batch.data()[item * per..(item + 1) * per]
                            .iter()
                            .map(|&v| v as f64)
                            .collect(),
                    },
                    LayerOp::Conv2D {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        groups,
                        mapping,
                        weight,
                        bias,
                        ..
                    } => conv(
                        input(0),
                        &params(graph, weight),
                        bias.as_ref().map(|b| params(graph, b)).as_deref(),
                        *out_channels,
                        *kernel,
                        *stride,
                        *pad,
                        *groups,
                        *mapping,
                    ),
                    LayerOp::FullyConnected {
                        in_features,
                        out_features,
                        weight,
                        bias,
                    } => {
                        let x = input(0);
                        let w = params(graph, weight);
                        let b = bias.as_ref().map(|b| params(graph, b));
                        let data = (0..*out_features)
                            .map(|o| {
                                let mut acc = b.as_ref().map_or(0.0, |b| b[o]);
                                for f in 0..*in_features {
                                    acc += w[o * in_features + f] * x.data[f];
                                }
                                acc
                            })
                            .collect();
                        Value {
                            c: *out_features,
                            h: 1,
                            w: 1,
                            data,
                        }
                    }
                    LayerOp::EltwiseAdd => {
                        let mut acc = input(0).clone();
                        for i in 1..graph.preds(id).len() {
                            for (a, &b) in acc.data.iter_mut().zip(&input(i).data) {
                                *a += b;
                            }
                        }
                        acc
                    }
                    LayerOp::ReLU => {
                        let x = input(0);
                        Value {
                            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                            ..x.clone()
                        }
                    }
                    LayerOp::BatchNorm {
                        gamma,
                        beta,
                        mean,
                        var,
                        ..
                    } => apply_post(
                        graph,
                        &PostOpKind::BatchNorm {
                            gamma: gamma.clone(),
                            beta: beta.clone(),
                            mean: mean.clone(),
                            var: var.clone(),
                        },
                        input(0).clone(),
                    ),
                    LayerOp::Bias { bias, .. } => apply_post(
                        graph,
                        &PostOpKind::Bias { bias: bias.clone() },
                        input(0).clone(),
                    ),
                    LayerOp::MaxPool {
                        kernel,
                        stride,
                        pad,
                    } => pool(input(0), *kernel, *stride, *pad, true),
                    LayerOp::AvgPool {
                        kernel,
                        stride,
                        pad,
                    } => pool(input(0), *kernel, *stride, *pad, false),
                    LayerOp::GlobalAvgPool => {
                        apply_post(graph, &PostOpKind::GlobalAvgPool, input(0).clone())
                    }
                    LayerOp::Flatten => {
                        let x = input(0);
                        Value {
                            c: x.c * x.h * x.w,
                            h: 1,
                            w: 1,
                            data: x.data.clone(),
                        }
                    }
                    LayerOp::SoftmaxLoss => {
                        let logits = &input(0).data;
                        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
                        total += denom.ln() + max - logits[label];
                        input(0).clone()
                    }
                };
                for post in &node.post_ops {
                    v = apply_post(graph, &post.kind, v);
                }
                values[id.0] = Some(v);
            }
        }
        total / n as f64
    }

}

/// Maximum relative error between backward gradients and central finite
/// differences over every trainable parameter of `graph`.
///
/// Differences use the independent f64 reference forward, so the only FD
/// error sources are the O(h^2) truncation term and the f32 rounding of
/// the perturbed parameter itself (the effective step is recomputed from
/// the rounded values). Gradients below `noise_floor` in both views count
/// as matching.
pub fn finite_difference_max_error(
    graph: &mut NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
    noise_floor: f64,
) -> Result<f64, crate::engine::EngineError> {
    let analytic = backward(graph, batch, labels)?;
    let names = crate::engine::train::trainable_tensors(graph);
    let mut worst = 0.0f64;
    for name in names {
        let len = graph.store().get(&name).unwrap().len();
        for i in 0..len {
            let an = analytic.grads_w.get(&name).map_or(0.0, |g| g.data()[i] as f64);
            let mut fd_at = |step: f64| -> f64 {
                let original = graph.store().get(&name).unwrap().data()[i];
                let plus = (original as f64 + step) as f32;
                let minus = (original as f64 - step) as f32;
                let h_eff = (plus as f64 - minus as f64) / 2.0;
                graph.store_mut().get_mut(&name).unwrap().data_mut()[i] = plus;
                let loss_plus = reference::loss_f64(graph, batch, labels);
                graph.store_mut().get_mut(&name).unwrap().data_mut()[i] = minus;
                let loss_minus = reference::loss_f64(graph, batch, labels);
                graph.store_mut().get_mut(&name).unwrap().data_mut()[i] = original;
                (loss_plus - loss_minus) / (2.0 * h_eff)
            };
            let rel_of = |fd: f64, an: f64| -> Option<f64> {
                let scale = fd.abs().max(an.abs());
                (scale >= noise_floor).then(|| (fd - an).abs() / scale)
            };
            let Some(mut rel) = rel_of(fd_at(h), an) else {
                continue;
            };
            if rel > 1e-4 {
                // a ReLU/max kink inside the step interval biases the
                // difference; a genuine gradient error persists when the
                // step shrinks, a kink artifact collapses
                if let Some(refined) = rel_of(fd_at(h / 16.0), an) {
                    rel = rel.min(refined);
                }
            }
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Small nets (each under 1000 parameters) collectively covering plain and
/// grouped convolution, FC, batch norm, bias, max/avg/global pooling,
/// flatten and join nodes.
pub fn gradient_check_nets() -> Vec<NetworkGraph> {
    use fixtures::FixtureBuilder;
    let mut nets = Vec::new();

    // conv + relu + gap + fc
    let mut b = FixtureBuilder::new("fd-conv", 21);
    b.input("input", 2, 5, 5);
    b.conv("conv1", "input", 2, 4, 3, 1, 1, GroupMapping::Interleaved, true);
    b.relu("relu1", "conv1");
    b.gap("gap", "relu1");
    b.fc("fc", "gap", 4, 3, true);
    b.loss("loss", "fc");
    nets.push(b.build());

    // grouped conv (g=2) + batch norm
    let mut b = FixtureBuilder::new("fd-grouped", 22);
    b.input("input", 4, 4, 4);
    b.conv("conv1", "input", 4, 4, 3, 1, 2, GroupMapping::Interleaved, true);
    b.batchnorm_random("bn1", "conv1", 4);
    b.relu("relu1", "bn1");
    b.gap("gap", "relu1");
    b.fc("fc", "gap", 4, 2, true);
    b.loss("loss", "fc");
    nets.push(b.build());

    // max pool + flatten into FC
    let mut b = FixtureBuilder::new("fd-maxpool", 23);
    b.input("input", 1, 6, 6);
    b.conv("conv1", "input", 1, 3, 3, 1, 1, GroupMapping::Interleaved, true);
    b.maxpool("pool", "conv1", 2, 2);
    b.flatten("flat", "pool");
    b.fc("fc", "flat", 3 * 3 * 3, 3, true);
    b.loss("loss", "fc");
    nets.push(b.build());

    // residual join + avg pool
    let mut b = FixtureBuilder::new("fd-residual", 24);
    b.input("input", 2, 4, 4);
    b.conv("conv1", "input", 2, 3, 3, 1, 1, GroupMapping::Interleaved, true);
    b.conv("conv2", "conv1", 3, 3, 3, 1, 1, GroupMapping::Interleaved, true);
    b.add("join", &["conv1", "conv2"]);
    b.avgpool("pool", "join", 2, 2);
    b.gap("gap", "pool");
    b.fc("fc", "gap", 3, 2, true);
    b.loss("loss", "fc");
    nets.push(b.build());

    // blocked grouped conv + bias op
    let mut b = FixtureBuilder::new("fd-blocked", 25);
    b.input("input", 4, 4, 4);
    b.conv("conv1", "input", 4, 8, 1, 0, 4, GroupMapping::Blocked, false);
    b.bias_op("bias1", "conv1", 8);
    b.relu("relu1", "bias1");
    b.gap("gap", "relu1");
    b.fc("fc", "gap", 8, 3, true);
    b.loss("loss", "fc");
    nets.push(b.build());

    nets
}

/// Run finite-difference validation over [`gradient_check_nets`].
pub fn check_gradients(tolerance: f64) -> CheckResult {
    let name = "finite-difference-gradients";
    let mut worst_overall = 0.0f64;
    for (i, mut graph) in gradient_check_nets().into_iter().enumerate() {
        let params: usize = crate::engine::train::trainable_tensors(&graph)
            .iter()
            .map(|n| graph.store().get(n).unwrap().len())
            .sum();
        if params > 1000 {
            return CheckResult::fail(name, format!("net {i} has {params} > 1000 params"));
        }
        let mut rng = Rng::new(500 + i as u64);
        let shape = {
            let crate::graph::Shape::Map { c, h, w } = graph.out_shape(graph.input_layer()) else {
                unreachable!()
            };
            (c, h, w)
        };
        let n = 4usize;
        let data: Vec<f32> = (0..n * shape.0 * shape.1 * shape.2)
            .map(|_| rng.range_f64(0.0, 1.0) as f32)
            .collect();
        let batch = Tensor::new(vec![n, shape.0, shape.1, shape.2], data).unwrap();
        let classes = graph.out_shape(graph.loss_layer()).elements();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        match finite_difference_max_error(&mut graph, &batch, &labels, 1e-3, 3e-4) {
            Ok(err) => {
                if err > tolerance {
                    return CheckResult::fail(
                        name,
                        format!("net {} max relative error {err:.2e} > {tolerance:.0e}", graph.name),
                    );
                }
                worst_overall = worst_overall.max(err);
            }
            Err(e) => return CheckResult::fail(name, format!("net {i}: {e}")),
        }
    }
    CheckResult::pass(
        name,
        format!("5 nets, max relative error {worst_overall:.2e} <= {tolerance:.0e}"),
    )
}

/// Dead-parameter invariant on a fixture: after pruning any seed's set, the
/// pruned maps are exactly zero and randomizing every pruned slice leaves
/// the logits bit-identical.
pub fn check_zero_propagation(graph: &NetworkGraph, batch: &Tensor, labels: &[usize]) -> CheckResult {
    let name = "zero-propagation";
    let absorbed = match absorb_activations(graph) {
        Ok(g) => g,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    let dep = match DependencyGraph::build(&absorbed) {
        Ok(d) => d,
        Err(e) => return CheckResult::fail(name, e.to_string()),
    };
    let guard = crate::pruner::never_prune_guard(&absorbed);
    let logits_layer = absorbed.preds(absorbed.loss_layer())[0];
    let mut rng = Rng::new(77);
    let mut checked = 0usize;
    for seed in dep.weight_bearing_channels() {
        if guard.contains(&seed.layer) {
            continue;
        }
        let mut pruned = absorbed.clone();
        let set = dep.prune_set(seed).unwrap();
        for slice in &set.weight_slices {
            let (tensor_name, ranges) = dep.slice_elements(slice);
            let tensor_name = tensor_name.to_string();
            let t = pruned.store_mut().get_mut(&tensor_name).unwrap();
            for r in ranges {
                t.data_mut()[r].fill(0.0);
            }
        }
        for p in &set.bias_params {
            pruned.store_mut().zero_element(&p.tensor, p.index);
        }

        let base = match forward(&pruned, batch, labels) {
            Ok(r) => r,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        // pruned output maps exactly zero
        for c in &set.coparents {
            let act = &base.activations[c.layer.0];
            let per = act.len() / batch.shape()[0];
            let pixels = per / absorbed.out_channels(c.layer);
            for item in 0..batch.shape()[0] {
                let map = &act.data()[item * per + c.index * pixels..][..pixels];
                if map.iter().any(|&v| v != 0.0) {
                    return CheckResult::fail(
                        name,
                        format!("seed {seed:?}: pruned map {c:?} is not exactly zero"),
                    );
                }
            }
        }
        // randomize every pruned slice; logits must not move a bit
        let mut fuzzed = pruned.clone();
        for slice in &set.weight_slices {
            let (tensor_name, ranges) = dep.slice_elements(slice);
            let tensor_name = tensor_name.to_string();
            let t = fuzzed.store_mut().get_mut(&tensor_name).unwrap();
            for r in ranges {
                for v in &mut t.data_mut()[r] {
                    *v = rng.range_f64(-2.0, 2.0) as f32;
                }
            }
        }
        let fuzzed_result = match forward(&fuzzed, batch, labels) {
            Ok(r) => r,
            Err(e) => return CheckResult::fail(name, e.to_string()),
        };
        let a = base.activations[logits_layer.0].data();
        let b = fuzzed_result.activations[logits_layer.0].data();
        if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return CheckResult::fail(
                name,
                format!("seed {seed:?}: randomized dead slices changed the logits"),
            );
        }
        checked += 1;
    }
    CheckResult::pass(
        name,
        format!("{checked} seed channels, dead slices bit-inert"),
    )
}
