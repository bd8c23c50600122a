//! Desk-scale fixture networks: toy graphs exercising joins, splits,
//! grouped convolutions and conv-to-FC transitions, plus a seeded random
//! graph generator for equivalence testing. Fixture weights are seeded
//! He-normal draws; trained variants are produced by the SGD trainer.

use crate::engine::train::TrainConfig;
use crate::graph::{build_graph, GraphOptions, GroupMapping, NetworkGraph, Shape};
use crate::model_io::manifest::{Manifest, ManifestLayer};
use crate::model_io::SynthSpec;
use crate::rng::Rng;
use crate::store::TensorStore;
use crate::tensor::Tensor;

/// Synthetic dataset dimensioned for a graph: image dims from the input
/// layer, class count from the logits. `subset` overrides the training
/// size (test size follows at half).
pub fn synth_spec_for(graph: &NetworkGraph, subset: Option<usize>) -> SynthSpec {
    let Shape::Map { c, h, w } = graph.out_shape(graph.input_layer()) else {
        unreachable!("input layers produce maps")
    };
    let classes = graph.out_shape(graph.loss_layer()).elements();
    SynthSpec {
        classes,
        channels: c,
        height: h,
        width: w,
        train: subset.unwrap_or(2000),
        test: subset.map_or(1000, |n| (n / 2).max(1)),
        noise: 0.18,
    }
}

/// Training recipe used when producing trained fixtures.
pub fn train_config_for(name: &str, seed: u64) -> TrainConfig {
    let (epochs, learning_rate) = match name {
        "resblock-toy" => (6, 0.04),
        "grouped-toy" => (16, 0.06),
        _ => (8, 0.04),
    };
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate,
        momentum: 0.9,
        seed,
    }
}

/// Incremental manifest + store assembly.
pub struct FixtureBuilder {
    model: String,
    layers: Vec<ManifestLayer>,
    store: TensorStore,
    rng: Rng,
}

impl FixtureBuilder {
    pub fn new(model: &str, seed: u64) -> FixtureBuilder {
        FixtureBuilder {
            model: model.to_string(),
            layers: Vec::new(),
            store: TensorStore::new(),
            rng: Rng::new(seed),
        }
    }

    fn he_tensor(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (self.rng.next_gaussian() * std) as f32)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn layer(&mut self, name: &str, kind: &str, from: &[&str]) -> ManifestLayer {
        ManifestLayer {
            name: name.to_string(),
            kind: kind.to_string(),
            from: from.iter().map(|s| s.to_string()).collect(),
            ..ManifestLayer::default()
        }
    }

    pub fn input(&mut self, name: &str, c: usize, h: usize, w: usize) {
        let mut l = self.layer(name, "Input", &[]);
        l.out = Some(c);
        l.height = Some(h);
        l.width = Some(w);
        self.layers.push(l);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        from: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        pad: usize,
        groups: usize,
        mapping: GroupMapping,
        bias: bool,
    ) {
        let m_in = in_c / groups;
        let w = self.he_tensor(vec![out_c, m_in, k, k], m_in * k * k);
        self.store.insert(format!("{name}.w"), w);
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(vec![out_c]));
        }
        let mut l = self.layer(name, "Conv2D", &[from]);
        l.in_ = Some(in_c);
        l.out = Some(out_c);
        l.kernel = Some(k);
        l.stride = Some(1);
        l.pad = Some(pad);
        l.groups = Some(groups);
        l.mapping = Some(mapping.as_str().to_string());
        l.weights = Some(format!("{name}.w"));
        if bias {
            l.bias = Some(format!("{name}.b"));
        }
        self.layers.push(l);
    }

    pub fn batchnorm(&mut self, name: &str, from: &str, ch: usize) {
        self.store.insert(
            format!("{name}.g"),
            Tensor::new(vec![ch], vec![1.0; ch]).unwrap(),
        );
        self.store.insert(format!("{name}.b"), Tensor::zeros(vec![ch]));
        self.store.insert(format!("{name}.m"), Tensor::zeros(vec![ch]));
        self.store.insert(
            format!("{name}.v"),
            Tensor::new(vec![ch], vec![1.0; ch]).unwrap(),
        );
        let mut l = self.layer(name, "BatchNorm", &[from]);
        l.channels = Some(ch);
        l.gamma = Some(format!("{name}.g"));
        l.beta = Some(format!("{name}.b"));
        l.mean = Some(format!("{name}.m"));
        l.var = Some(format!("{name}.v"));
        self.layers.push(l);
    }

    /// Batch norm with randomized affine/statistics, for gradient checks.
    pub fn batchnorm_random(&mut self, name: &str, from: &str, ch: usize) {
        let draw = |rng: &mut Rng, lo: f64, hi: f64| -> Vec<f32> {
            (0..ch).map(|_| rng.range_f64(lo, hi) as f32).collect()
        };
        let g = draw(&mut self.rng, 0.7, 1.3);
        let b = draw(&mut self.rng, -0.2, 0.2);
        let m = draw(&mut self.rng, -0.2, 0.2);
        let v = draw(&mut self.rng, 0.5, 1.5);
        self.store.insert(format!("{name}.g"), Tensor::new(vec![ch], g).unwrap());
        self.store.insert(format!("{name}.b"), Tensor::new(vec![ch], b).unwrap());
        self.store.insert(format!("{name}.m"), Tensor::new(vec![ch], m).unwrap());
        self.store.insert(format!("{name}.v"), Tensor::new(vec![ch], v).unwrap());
        let mut l = self.layer(name, "BatchNorm", &[from]);
        l.channels = Some(ch);
        l.gamma = Some(format!("{name}.g"));
        l.beta = Some(format!("{name}.b"));
        l.mean = Some(format!("{name}.m"));
        l.var = Some(format!("{name}.v"));
        self.layers.push(l);
    }

    pub fn bias_op(&mut self, name: &str, from: &str, ch: usize) {
        let b: Vec<f32> = (0..ch)
            .map(|_| (self.rng.next_gaussian() * 0.05) as f32)
            .collect();
        self.store.insert(format!("{name}.b"), Tensor::new(vec![ch], b).unwrap());
        let mut l = self.layer(name, "Bias", &[from]);
        l.channels = Some(ch);
        l.bias = Some(format!("{name}.b"));
        self.layers.push(l);
    }

    pub fn relu(&mut self, name: &str, from: &str) {
        let l = self.layer(name, "ReLU", &[from]);
        self.layers.push(l);
    }

    pub fn add(&mut self, name: &str, from: &[&str]) {
        let l = self.layer(name, "EltwiseAdd", from);
        self.layers.push(l);
    }

    pub fn maxpool(&mut self, name: &str, from: &str, k: usize, stride: usize) {
        let mut l = self.layer(name, "MaxPool", &[from]);
        l.kernel = Some(k);
        l.stride = Some(stride);
        l.pad = Some(0);
        self.layers.push(l);
    }

    pub fn avgpool(&mut self, name: &str, from: &str, k: usize, stride: usize) {
        let mut l = self.layer(name, "AvgPool", &[from]);
        l.kernel = Some(k);
        l.stride = Some(stride);
        l.pad = Some(0);
        self.layers.push(l);
    }

    pub fn gap(&mut self, name: &str, from: &str) {
        let l = self.layer(name, "GlobalAvgPool", &[from]);
        self.layers.push(l);
    }

    pub fn flatten(&mut self, name: &str, from: &str) {
        let l = self.layer(name, "Flatten", &[from]);
        self.layers.push(l);
    }

    pub fn fc(&mut self, name: &str, from: &str, in_f: usize, out_f: usize, bias: bool) {
        let w = self.he_tensor(vec![out_f, in_f], in_f);
        self.store.insert(format!("{name}.w"), w);
        if bias {
            self.store.insert(format!("{name}.b"), Tensor::zeros(vec![out_f]));
        }
        let mut l = self.layer(name, "FullyConnected", &[from]);
        l.in_ = Some(in_f);
        l.out = Some(out_f);
        l.weights = Some(format!("{name}.w"));
        if bias {
            l.bias = Some(format!("{name}.b"));
        }
        self.layers.push(l);
    }

    pub fn loss(&mut self, name: &str, from: &str) {
        let l = self.layer(name, "SoftmaxLoss", &[from]);
        self.layers.push(l);
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            model: self.model.clone(),
            layers: self.layers.clone(),
        }
    }

    pub fn build(self) -> NetworkGraph {
        let manifest = Manifest {
            model: self.model,
            layers: self.layers,
        };
        build_graph(&manifest, self.store, &GraphOptions::default())
            .expect("fixture definitions are valid")
    }
}

/// Channel count of the residual fixture's convolutions.
pub const RESBLOCK_CHANNELS: usize = 32;
/// Classes the trained fixtures separate.
pub const FIXTURE_CLASSES: usize = 4;

/// Minimal 3-node graph: Input -> Conv -> SoftmaxLoss.
pub fn tiny_linear() -> NetworkGraph {
    let mut b = FixtureBuilder::new("tiny-linear", 11);
    b.input("input", 3, 1, 1);
    b.conv("conv", "input", 3, 4, 1, 0, 1, GroupMapping::Interleaved, true);
    b.loss("loss", "conv");
    b.build()
}

/// Linear chain with two biased convolutions and a classifier:
/// input -> conv1 -> relu -> conv2 -> relu -> gap -> fc -> loss.
pub fn linear_toy(seed: u64) -> NetworkGraph {
    let mut b = FixtureBuilder::new("linear-toy", seed);
    b.input("input", 3, 6, 6);
    b.conv("conv1", "input", 3, 4, 3, 1, 1, GroupMapping::Interleaved, true);
    b.relu("relu1", "conv1");
    b.conv("conv2", "relu1", 4, 5, 3, 1, 1, GroupMapping::Interleaved, true);
    b.relu("relu2", "conv2");
    b.gap("gap", "relu2");
    b.fc("fc", "gap", 5, FIXTURE_CLASSES, true);
    b.loss("loss", "fc");
    b.build()
}

/// Two residual blocks, decoupled: each block's skip spans only its second
/// convolution, so coparent classes pair exactly two convolutions.
///
/// ```text
/// input -> convA(+bn,relu) -> convB(+bn) -\
///                 \------------------------ add1 (+relu)
/// add1 -> convC(+bn,relu) -> convD(+bn) -\
///                 \------------------------ add2 (+relu,gap)
/// add2 -> fc -> loss
/// ```
///
/// Absorbed form: 9 structural nodes, 2 joins, every ReLU/BN/pool folded.
pub fn resblock_toy(seed: u64) -> NetworkGraph {
    let c = RESBLOCK_CHANNELS;
    let mut b = FixtureBuilder::new("resblock-toy", seed);
    b.input("input", 3, 6, 6);
    b.conv("convA", "input", 3, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bnA", "convA", c);
    b.relu("reluA", "bnA");
    b.conv("convB", "reluA", c, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bnB", "convB", c);
    b.add("add1", &["reluA", "bnB"]);
    b.relu("reluAdd1", "add1");
    b.conv("convC", "reluAdd1", c, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bnC", "convC", c);
    b.relu("reluC", "bnC");
    b.conv("convD", "reluC", c, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bnD", "convD", c);
    b.add("add2", &["reluC", "bnD"]);
    b.relu("reluAdd2", "add2");
    b.gap("gap", "reluAdd2");
    b.fc("fc", "gap", c, FIXTURE_CLASSES, true);
    b.loss("loss", "fc");
    b.build()
}

/// Two chained residual blocks sharing one spine: every skip connects back
/// to the stem, so each channel index couples all three producing convs.
pub fn spine_toy(seed: u64) -> NetworkGraph {
    let c = 6;
    let mut b = FixtureBuilder::new("spine-toy", seed);
    b.input("input", 3, 6, 6);
    b.conv("stem", "input", 3, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bnS", "stem", c);
    b.relu("reluS", "bnS");
    b.conv("conv1", "reluS", c, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bn1", "conv1", c);
    b.add("add1", &["reluS", "bn1"]);
    b.relu("reluA1", "add1");
    b.conv("conv2", "reluA1", c, c, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bn2", "conv2", c);
    b.add("add2", &["reluA1", "bn2"]);
    b.relu("reluA2", "add2");
    b.gap("gap", "reluA2");
    b.fc("fc", "gap", c, 3, true);
    b.loss("loss", "fc");
    b.build()
}

/// Small net with a grouped convolution (g=2), pooling, and a classifier.
pub fn grouped_toy(seed: u64, mapping: GroupMapping) -> NetworkGraph {
    let mut b = FixtureBuilder::new("grouped-toy", seed);
    b.input("input", 3, 8, 8);
    b.conv("conv1", "input", 3, 8, 3, 1, 1, GroupMapping::Interleaved, false);
    b.batchnorm("bn1", "conv1", 8);
    b.relu("relu1", "bn1");
    b.maxpool("pool1", "relu1", 2, 2);
    b.conv("conv2", "pool1", 8, 8, 3, 1, 2, mapping, false);
    b.batchnorm("bn2", "conv2", 8);
    b.relu("relu2", "bn2");
    b.gap("gap", "relu2");
    b.fc("fc", "gap", 8, FIXTURE_CLASSES, true);
    b.loss("loss", "fc");
    b.build()
}

/// The grouped-coupling micro example: a 4-channel producer feeding a
/// grouped convolution with g=2 and 2 slots per group.
pub fn grouped_micro(mapping: GroupMapping) -> NetworkGraph {
    let mut b = FixtureBuilder::new("grouped-micro", 5);
    b.input("input", 2, 4, 4);
    b.conv("prev", "input", 2, 4, 1, 0, 1, GroupMapping::Interleaved, true);
    b.conv("grouped", "prev", 4, 4, 1, 0, 2, mapping, true);
    b.gap("gap", "grouped");
    b.fc("fc", "gap", 4, 2, true);
    b.loss("loss", "fc");
    b.build()
}

/// AlexNet-style tail: conv -> pool -> flatten -> fc -> fc, exercising the
/// conv-to-FC slot grouping.
pub fn flatten_toy(seed: u64) -> NetworkGraph {
    let mut b = FixtureBuilder::new("flatten-toy", seed);
    b.input("input", 2, 6, 6);
    b.conv("conv1", "input", 2, 4, 3, 1, 1, GroupMapping::Interleaved, true);
    b.relu("relu1", "conv1");
    b.maxpool("pool1", "relu1", 2, 2);
    b.flatten("flat", "pool1");
    b.fc("fc1", "flat", 4 * 3 * 3, 6, true);
    b.relu("relu2", "fc1");
    b.fc("fc2", "relu2", 6, 3, true);
    b.loss("loss", "fc2");
    b.build()
}

/// Seeded random graph for prune-set equivalence testing: 3-8 weight
/// layers, always at least one join, split, or grouped conv; random
/// activation chains between structural layers.
pub fn random_graph(seed: u64) -> NetworkGraph {
    let mut rng = Rng::new(seed);
    let mut b = FixtureBuilder::new("random-graph", seed.wrapping_mul(0x9e37) ^ 0xd1c3);
    let channel_choices = [2usize, 4, 6, 8];
    let mut channels = channel_choices[rng.below(channel_choices.len())];
    b.input("input", channels, 6, 6);
    let mut tip = String::from("input");
    let mut weight_layers = 1usize; // final fc
    let mut structural = 0usize;
    let mut counter = 0usize;
    let mut has_feature = false;
    let max_weight_layers = 3 + rng.below(6); // 3..=8

    let fresh = |prefix: &str, counter: &mut usize| -> String {
        *counter += 1;
        format!("{prefix}{counter}")
    };

    // optional activation chain after a structural layer
    fn chain(
        b: &mut FixtureBuilder,
        rng: &mut Rng,
        tip: &mut String,
        counter: &mut usize,
        ch: usize,
        allow_pool: bool,
    ) {
        if rng.below(2) == 0 {
            *counter += 1;
            let name = format!("bn{counter}");
            b.batchnorm_random(&name, tip, ch);
            *tip = name;
        }
        if rng.below(3) == 0 {
            *counter += 1;
            let name = format!("bias{counter}");
            b.bias_op(&name, tip, ch);
            *tip = name;
        }
        if rng.below(2) == 0 {
            *counter += 1;
            let name = format!("relu{counter}");
            b.relu(&name, tip);
            *tip = name;
        }
        if allow_pool && rng.below(4) == 0 {
            *counter += 1;
            let name = format!("pool{counter}");
            if rng.below(2) == 0 {
                b.maxpool(&name, tip, 2, 2);
            } else {
                b.avgpool(&name, tip, 2, 2);
            }
            *tip = name;
        }
    }

    while weight_layers < max_weight_layers && structural < 5 {
        let remaining = max_weight_layers - weight_layers;
        let kind = rng.below(4);
        match kind {
            // plain conv, maybe grouped
            0 => {
                let out = channel_choices[rng.below(channel_choices.len())];
                let groups_ok: Vec<usize> = [1usize, 2, 4]
                    .into_iter()
                    .filter(|g| channels.is_multiple_of(*g) && out.is_multiple_of(*g) && channels / g >= 1)
                    .collect();
                let g = groups_ok[rng.below(groups_ok.len())];
                let mapping = if rng.below(2) == 0 {
                    GroupMapping::Interleaved
                } else {
                    GroupMapping::Blocked
                };
                let name = fresh("conv", &mut counter);
                let k = if rng.below(2) == 0 { 1 } else { 3 };
                b.conv(&name, &tip, channels, out, k, k / 2, g, mapping, rng.below(2) == 0);
                tip = name;
                channels = out;
                weight_layers += 1;
                if g > 1 {
                    has_feature = true;
                }
                chain(&mut b, &mut rng, &mut tip, &mut counter, channels, false);
            }
            // residual: add(x, conv(x)) — a split and a join
            1 if remaining >= 1 => {
                let name = fresh("res", &mut counter);
                b.conv(&name, &tip, channels, channels, 3, 1, 1, GroupMapping::Interleaved, rng.below(2) == 0);
                let mut branch = name.clone();
                chain(&mut b, &mut rng, &mut branch, &mut counter, channels, false);
                let add = fresh("join", &mut counter);
                b.add(&add, &[&tip, &branch]);
                tip = add;
                weight_layers += 1;
                has_feature = true;
                chain(&mut b, &mut rng, &mut tip, &mut counter, channels, false);
            }
            // two-branch join: add(convL(x), convR(x))
            2 if remaining >= 2 => {
                let out = channel_choices[rng.below(channel_choices.len())];
                let left = fresh("brl", &mut counter);
                b.conv(&left, &tip, channels, out, 3, 1, 1, GroupMapping::Interleaved, rng.below(2) == 0);
                let mut ltip = left;
                chain(&mut b, &mut rng, &mut ltip, &mut counter, out, false);
                let right = fresh("brr", &mut counter);
                b.conv(&right, &tip, channels, out, 1, 0, 1, GroupMapping::Interleaved, rng.below(2) == 0);
                let mut rtip = right;
                chain(&mut b, &mut rng, &mut rtip, &mut counter, out, false);
                let add = fresh("join", &mut counter);
                b.add(&add, &[&ltip, &rtip]);
                tip = add;
                channels = out;
                weight_layers += 2;
                has_feature = true;
                chain(&mut b, &mut rng, &mut tip, &mut counter, channels, false);
            }
            // grouped conv, same channel count
            _ => {
                let groups_ok: Vec<usize> = [2usize, 4]
                    .into_iter()
                    .filter(|g| channels.is_multiple_of(*g) && channels / g >= 1)
                    .collect();
                if groups_ok.is_empty() {
                    continue;
                }
                let g = groups_ok[rng.below(groups_ok.len())];
                let mapping = if rng.below(2) == 0 {
                    GroupMapping::Interleaved
                } else {
                    GroupMapping::Blocked
                };
                let name = fresh("gconv", &mut counter);
                b.conv(&name, &tip, channels, channels, 1, 0, g, mapping, rng.below(2) == 0);
                tip = name;
                weight_layers += 1;
                has_feature = true;
                chain(&mut b, &mut rng, &mut tip, &mut counter, channels, false);
            }
        }
        structural += 1;
    }

    // guarantee at least one join/split/grouped structure
    if !has_feature {
        let name = fresh("res", &mut counter);
        b.conv(&name, &tip, channels, channels, 3, 1, 1, GroupMapping::Interleaved, true);
        let add = fresh("join", &mut counter);
        b.add(&add, &[&tip, &name]);
        tip = add;
    }

    b.gap("gap", &tip);
    b.fc("fc", "gap", channels, 3, true);
    b.loss("loss", "fc");
    b.build()
}
