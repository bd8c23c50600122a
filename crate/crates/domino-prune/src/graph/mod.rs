//! Network graph representation and validation.
//!
//! A [`NetworkGraph`] is a directed acyclic dataflow graph of layers over a
//! [`TensorStore`]. Graphs come in two forms: the raw form produced by
//! [`build_graph`] (activation layers are explicit nodes) and the absorbed
//! form produced by [`absorb_activations`],
//! where activation chains are folded into the producing structural layer
//! as replayable [`PostOp`]s. Both forms execute identically; dependency
//! analysis requires the absorbed form.

mod absorb;

pub use absorb::absorb_activations;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model_io::manifest::{Manifest, ManifestLayer};
use crate::store::TensorStore;

/// Index of a layer within its graph. Ordering follows declaration order,
/// which is the deterministic tie-break order used throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId(pub usize);

/// Which side of a weight-bearing layer a channel lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Output,
    InputSlot,
}

/// A single channel position: an output channel of a producing layer or an
/// input slot of a consuming layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelRef {
    pub layer: LayerId,
    pub side: Side,
    pub index: usize,
}

impl ChannelRef {
    pub fn output(layer: LayerId, index: usize) -> ChannelRef {
        ChannelRef {
            layer,
            side: Side::Output,
            index,
        }
    }

    pub fn input_slot(layer: LayerId, index: usize) -> ChannelRef {
        ChannelRef {
            layer,
            side: Side::InputSlot,
            index,
        }
    }
}

/// How producer channels are assigned to the per-group input slots of a
/// grouped convolution. `Interleaved` couples channels congruent modulo
/// `m_in` (channel j reads into slot `j % m_in`); `Blocked` couples
/// contiguous runs of `g` channels (slot `j / g`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupMapping {
    #[default]
    Interleaved,
    Blocked,
}

impl GroupMapping {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupMapping::Interleaved => "interleaved",
            GroupMapping::Blocked => "blocked",
        }
    }

    pub fn parse(s: &str) -> Option<GroupMapping> {
        match s {
            "interleaved" => Some(GroupMapping::Interleaved),
            "blocked" => Some(GroupMapping::Blocked),
            _ => None,
        }
    }

    /// Per-group slot read by producer channel `j`.
    pub fn slot_of(&self, j: usize, m_in: usize, groups: usize) -> usize {
        match self {
            GroupMapping::Interleaved => j % m_in,
            GroupMapping::Blocked => j / groups,
        }
    }

    /// Producer channel feeding slot `s` of group `a`.
    pub fn channel_of(&self, group: usize, slot: usize, m_in: usize, groups: usize) -> usize {
        match self {
            GroupMapping::Interleaved => group * m_in + slot,
            GroupMapping::Blocked => slot * groups + group,
        }
    }
}

/// Layer operation with its parameters. Tensor fields are names into the
/// graph's [`TensorStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        mapping: GroupMapping,
        weight: String,
        bias: Option<String>,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: Option<String>,
    },
    EltwiseAdd,
    ReLU,
    BatchNorm {
        channels: usize,
        gamma: String,
        beta: String,
        mean: String,
        var: String,
    },
    Bias {
        channels: usize,
        bias: String,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Flatten,
    SoftmaxLoss,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Input { .. } => "Input",
            LayerOp::Conv2D { .. } => "Conv2D",
            LayerOp::FullyConnected { .. } => "FullyConnected",
            LayerOp::EltwiseAdd => "EltwiseAdd",
            LayerOp::ReLU => "ReLU",
            LayerOp::BatchNorm { .. } => "BatchNorm",
            LayerOp::Bias { .. } => "Bias",
            LayerOp::MaxPool { .. } => "MaxPool",
            LayerOp::AvgPool { .. } => "AvgPool",
            LayerOp::GlobalAvgPool => "GlobalAvgPool",
            LayerOp::Flatten => "Flatten",
            LayerOp::SoftmaxLoss => "SoftmaxLoss",
        }
    }

    /// Structural layers survive absorption; the rest fold into post-ops.
    pub fn is_structural(&self) -> bool {
        matches!(
            self,
            LayerOp::Input { .. }
                | LayerOp::Conv2D { .. }
                | LayerOp::FullyConnected { .. }
                | LayerOp::EltwiseAdd
                | LayerOp::Flatten
                | LayerOp::SoftmaxLoss
        )
    }

    pub fn is_weight_bearing(&self) -> bool {
        matches!(
            self,
            LayerOp::Conv2D { .. } | LayerOp::FullyConnected { .. }
        )
    }
}

/// An activation/pool operation folded into its producer during absorption.
/// Replayed by the engine after the producer's own computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PostOp {
    /// Name of the original layer this op came from.
    pub name: String,
    pub kind: PostOpKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PostOpKind {
    ReLU,
    BatchNorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
    },
    Bias {
        bias: String,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
}

/// One parameter element to zero when a channel is pruned.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamRef {
    pub tensor: String,
    pub index: usize,
}

/// A layer node: operation, absorbed post-ops, and identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: LayerId,
    pub name: String,
    pub op: LayerOp,
    pub post_ops: Vec<PostOp>,
}

impl LayerNode {
    /// Per-channel parameters that must be zeroed when output channel `ch`
    /// of this layer is pruned: the layer's own bias element plus every
    /// per-channel parameter of absorbed BatchNorm/Bias post-ops.
    pub fn channel_params(&self, ch: usize) -> Vec<ParamRef> {
        let mut out = Vec::new();
        match &self.op {
            LayerOp::Conv2D { bias: Some(b), .. }
            | LayerOp::FullyConnected { bias: Some(b), .. } => out.push(ParamRef {
                tensor: b.clone(),
                index: ch,
            }),
            _ => {}
        }
        for post in &self.post_ops {
            match &post.kind {
                PostOpKind::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    for t in [gamma, beta, mean, var] {
                        out.push(ParamRef {
                            tensor: t.clone(),
                            index: ch,
                        });
                    }
                }
                PostOpKind::Bias { bias } => out.push(ParamRef {
                    tensor: bias.clone(),
                    index: ch,
                }),
                _ => {}
            }
        }
        out
    }
}

/// Shape of the value a layer exposes to its consumers (after post-ops).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Feature maps: channels x height x width.
    Map { c: usize, h: usize, w: usize },
    /// Flat features grouped by source channel: `features = slots * group`.
    Feat {
        features: usize,
        slots: usize,
        group: usize,
    },
}

impl Shape {
    /// Channel count visible to channel-level analysis.
    pub fn channels(&self) -> usize {
        match self {
            Shape::Map { c, .. } => *c,
            Shape::Feat { slots, .. } => *slots,
        }
    }

    /// Total scalar count per sample.
    pub fn elements(&self) -> usize {
        match self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Feat { features, .. } => *features,
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        match self {
            Shape::Map { h, w, .. } => (*h, *w),
            Shape::Feat { group, .. } => (*group, 1),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("cycle detected in layer graph")]
    CycleDetected,
    #[error("shape mismatch between `{layer_a}` and `{layer_b}`: {detail}")]
    ShapeMismatch {
        layer_a: String,
        layer_b: String,
        detail: String,
    },
    #[error("layer `{layer}` references missing tensor `{tensor}`")]
    DanglingTensorRef { layer: String, tensor: String },
    #[error("join `{join}` has mismatched inputs: {detail}")]
    JoinArityMismatch { join: String, detail: String },
    #[error("unsupported activation structure at `{layer}`: {detail}")]
    UnsupportedActivation { layer: String, detail: String },
    #[error("invalid layer `{layer}`: {detail}")]
    Invalid { layer: String, detail: String },
}

/// Defaults applied while building a graph from a manifest.
#[derive(Debug, Clone, Default)]
pub struct GraphOptions {
    /// Group-slot mapping for conv layers that do not set one explicitly.
    pub default_mapping: GroupMapping,
}

/// Validated dataflow graph over a tensor store.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub name: String,
    layers: Vec<LayerNode>,
    preds: Vec<Vec<LayerId>>,
    succs: Vec<Vec<LayerId>>,
    topo: Vec<LayerId>,
    shapes: Vec<Shape>,
    store: TensorStore,
    absorbed: bool,
}

impl NetworkGraph {
    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &LayerNode {
        &self.layers[id.0]
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&LayerNode> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn preds(&self, id: LayerId) -> &[LayerId] {
        &self.preds[id.0]
    }

    pub fn succs(&self, id: LayerId) -> &[LayerId] {
        &self.succs[id.0]
    }

    /// Layer ids in topological order.
    pub fn topo(&self) -> &[LayerId] {
        &self.topo
    }

    /// Shape each consumer of `id` sees (post-ops applied).
    pub fn out_shape(&self, id: LayerId) -> Shape {
        self.shapes[id.0]
    }

    /// Shape of the (single) input of `id`. Panics on the input layer.
    pub fn in_shape(&self, id: LayerId) -> Shape {
        self.shapes[self.preds[id.0][0].0]
    }

    pub fn store(&self) -> &TensorStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut TensorStore {
        &mut self.store
    }

    pub fn is_absorbed(&self) -> bool {
        self.absorbed
    }

    pub fn input_layer(&self) -> LayerId {
        self.layers
            .iter()
            .find(|l| matches!(l.op, LayerOp::Input { .. }))
            .map(|l| l.id)
            .expect("validated graph has an input layer")
    }

    pub fn loss_layer(&self) -> LayerId {
        self.layers
            .iter()
            .find(|l| matches!(l.op, LayerOp::SoftmaxLoss))
            .map(|l| l.id)
            .expect("validated graph has a loss layer")
    }

    /// Number of input slots of a weight-bearing layer (per-group count for
    /// grouped convolutions, per-source-channel groups for FC).
    pub fn in_slots(&self, id: LayerId) -> usize {
        match &self.layer(id).op {
            LayerOp::Conv2D {
                in_channels,
                groups,
                ..
            } => in_channels / groups,
            LayerOp::FullyConnected { .. } => self.in_shape(id).channels(),
            _ => 0,
        }
    }

    /// Features per input slot (1 for conv; flatten group size for FC).
    pub fn slot_group(&self, id: LayerId) -> usize {
        match &self.layer(id).op {
            LayerOp::Conv2D { .. } => 1,
            LayerOp::FullyConnected { in_features, .. } => {
                in_features / self.in_shape(id).channels()
            }
            _ => 0,
        }
    }

    /// Output channel count on the producer side.
    pub fn out_channels(&self, id: LayerId) -> usize {
        self.out_shape(id).channels()
    }

    pub(crate) fn from_parts(
        name: String,
        layers: Vec<LayerNode>,
        preds: Vec<Vec<LayerId>>,
        store: TensorStore,
        absorbed: bool,
    ) -> Result<NetworkGraph, GraphError> {
        let n = layers.len();
        let mut succs = vec![Vec::new(); n];
        for (i, ps) in preds.iter().enumerate() {
            for p in ps {
                succs[p.0].push(LayerId(i));
            }
        }
        let topo = toposort(n, &preds)?;
        let mut g = NetworkGraph {
            name,
            layers,
            preds,
            succs,
            topo,
            shapes: Vec::new(),
            store,
            absorbed,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&mut self) -> Result<(), GraphError> {
        let mut inputs = 0usize;
        let mut losses = 0usize;
        let mut names = BTreeSet::new();
        for l in &self.layers {
            if !names.insert(l.name.clone()) {
                return Err(GraphError::Invalid {
                    layer: l.name.clone(),
                    detail: "duplicate layer name".into(),
                });
            }
            match l.op {
                LayerOp::Input { .. } => inputs += 1,
                LayerOp::SoftmaxLoss => losses += 1,
                _ => {}
            }
        }
        if inputs != 1 {
            return Err(GraphError::Invalid {
                layer: "<graph>".into(),
                detail: format!("expected exactly one Input layer, found {inputs}"),
            });
        }
        if losses != 1 {
            return Err(GraphError::Invalid {
                layer: "<graph>".into(),
                detail: format!("expected exactly one SoftmaxLoss layer, found {losses}"),
            });
        }

        // arity
        for l in &self.layers {
            let np = self.preds[l.id.0].len();
            let ns = self.succs[l.id.0].len();
            let ok = match l.op {
                LayerOp::Input { .. } => np == 0,
                LayerOp::EltwiseAdd => np >= 2,
                _ => np == 1,
            };
            if !ok {
                return Err(GraphError::Invalid {
                    layer: l.name.clone(),
                    detail: format!("{} layer with {np} predecessors", l.op.kind_name()),
                });
            }
            match l.op {
                LayerOp::SoftmaxLoss => {
                    if ns != 0 {
                        return Err(GraphError::Invalid {
                            layer: l.name.clone(),
                            detail: "SoftmaxLoss must be terminal".into(),
                        });
                    }
                }
                _ => {
                    if ns == 0 {
                        return Err(GraphError::Invalid {
                            layer: l.name.clone(),
                            detail: "layer output is never consumed".into(),
                        });
                    }
                }
            }
        }

        // parameter tensors
        for l in &self.layers {
            self.check_tensors(l)?;
        }

        // shape propagation in topological order
        let mut shapes: Vec<Option<Shape>> = vec![None; self.layers.len()];
        for &id in &self.topo.clone() {
            let shape = self.infer_shape(id, &shapes)?;
            shapes[id.0] = Some(shape);
        }
        self.shapes = shapes.into_iter().map(|s| s.unwrap()).collect();
        Ok(())
    }

    fn expect_tensor(&self, layer: &LayerNode, name: &str, shape: &[usize]) -> Result<(), GraphError> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| GraphError::DanglingTensorRef {
                layer: layer.name.clone(),
                tensor: name.to_string(),
            })?;
        if t.shape() != shape {
            return Err(GraphError::ShapeMismatch {
                layer_a: layer.name.clone(),
                layer_b: name.to_string(),
                detail: format!("expected tensor shape {:?}, found {:?}", shape, t.shape()),
            });
        }
        Ok(())
    }

    fn check_tensors(&self, l: &LayerNode) -> Result<(), GraphError> {
        match &l.op {
            LayerOp::Conv2D {
                in_channels,
                out_channels,
                kernel,
                groups,
                weight,
                bias,
                ..
            } => {
                if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                    return Err(GraphError::Invalid {
                        layer: l.name.clone(),
                        detail: format!(
                            "groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}"
                        ),
                    });
                }
                let m_in = in_channels / groups;
                self.expect_tensor(l, weight, &[*out_channels, m_in, *kernel, *kernel])?;
                if let Some(b) = bias {
                    self.expect_tensor(l, b, &[*out_channels])?;
                }
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                self.expect_tensor(l, weight, &[*out_features, *in_features])?;
                if let Some(b) = bias {
                    self.expect_tensor(l, b, &[*out_features])?;
                }
            }
            LayerOp::BatchNorm {
                channels,
                gamma,
                beta,
                mean,
                var,
            } => {
                for t in [gamma, beta, mean, var] {
                    self.expect_tensor(l, t, &[*channels])?;
                }
            }
            LayerOp::Bias { channels, bias } => {
                self.expect_tensor(l, bias, &[*channels])?;
            }
            _ => {}
        }
        // post-op tensors (absorbed graphs)
        for post in &l.post_ops {
            let c = self.post_input_channels(l);
            match &post.kind {
                PostOpKind::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    for t in [gamma, beta, mean, var] {
                        self.expect_tensor(l, t, &[c])?;
                    }
                }
                PostOpKind::Bias { bias } => self.expect_tensor(l, bias, &[c])?,
                _ => {}
            }
        }
        Ok(())
    }

    fn post_input_channels(&self, l: &LayerNode) -> usize {
        match &l.op {
            LayerOp::Input { channels, .. } => *channels,
            LayerOp::Conv2D { out_channels, .. } => *out_channels,
            LayerOp::FullyConnected { out_features, .. } => *out_features,
            // EltwiseAdd: same channel count as predecessors; resolved later
            // during shape inference, but per-channel params need a count now.
            LayerOp::EltwiseAdd => {
                let p = self.preds[l.id.0][0];
                self.post_input_channels(self.layer(p))
            }
            _ => 0,
        }
    }

    fn infer_shape(&self, id: LayerId, shapes: &[Option<Shape>]) -> Result<Shape, GraphError> {
        let l = self.layer(id);
        let pred_shape = |i: usize| -> Shape { shapes[self.preds[id.0][i].0].unwrap() };
        let pred_name = |i: usize| -> String { self.layer(self.preds[id.0][i]).name.clone() };
        let base = match &l.op {
            LayerOp::Input {
                channels,
                height,
                width,
            } => Shape::Map {
                c: *channels,
                h: *height,
                w: *width,
            },
            LayerOp::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                ..
            } => {
                let p = pred_shape(0);
                match p {
                    Shape::Map { c, h, w } => {
                        if c != *in_channels {
                            return Err(GraphError::ShapeMismatch {
                                layer_a: l.name.clone(),
                                layer_b: pred_name(0),
                                detail: format!(
                                    "conv expects {in_channels} input channels, producer has {c}"
                                ),
                            });
                        }
                        let oh = conv_out(h, *kernel, *stride, *pad).ok_or_else(|| {
                            GraphError::ShapeMismatch {
                                layer_a: l.name.clone(),
                                layer_b: pred_name(0),
                                detail: format!(
                                    "kernel {kernel} with stride {stride}, pad {pad} does not fit {h}x{w}"
                                ),
                            }
                        })?;
                        let ow = conv_out(w, *kernel, *stride, *pad).ok_or_else(|| {
                            GraphError::ShapeMismatch {
                                layer_a: l.name.clone(),
                                layer_b: pred_name(0),
                                detail: "kernel does not fit input width".into(),
                            }
                        })?;
                        Shape::Map {
                            c: *out_channels,
                            h: oh,
                            w: ow,
                        }
                    }
                    Shape::Feat { .. } => {
                        return Err(GraphError::ShapeMismatch {
                            layer_a: l.name.clone(),
                            layer_b: pred_name(0),
                            detail: "conv cannot consume flattened features".into(),
                        })
                    }
                }
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                let p = pred_shape(0);
                let (features, slots) = match p {
                    Shape::Map { c, h, w } => {
                        if h != 1 || w != 1 {
                            return Err(GraphError::ShapeMismatch {
                                layer_a: l.name.clone(),
                                layer_b: pred_name(0),
                                detail: format!(
                                    "fully-connected input must be flattened or 1x1, got {c}x{h}x{w}"
                                ),
                            });
                        }
                        (c, c)
                    }
                    Shape::Feat {
                        features, slots, ..
                    } => (features, slots),
                };
                if features != *in_features {
                    return Err(GraphError::ShapeMismatch {
                        layer_a: l.name.clone(),
                        layer_b: pred_name(0),
                        detail: format!(
                            "fully-connected expects {in_features} features, producer has {features}"
                        ),
                    });
                }
                if in_features % slots != 0 {
                    return Err(GraphError::ShapeMismatch {
                        layer_a: l.name.clone(),
                        layer_b: pred_name(0),
                        detail: format!("{in_features} features not divisible into {slots} slots"),
                    });
                }
                Shape::Feat {
                    features: *out_features,
                    slots: *out_features,
                    group: 1,
                }
            }
            LayerOp::EltwiseAdd => {
                let first = pred_shape(0);
                for i in 1..self.preds[id.0].len() {
                    let s = pred_shape(i);
                    if s.channels() != first.channels() {
                        return Err(GraphError::JoinArityMismatch {
                            join: l.name.clone(),
                            detail: format!(
                                "`{}` has {} channels, `{}` has {}",
                                pred_name(0),
                                first.channels(),
                                pred_name(i),
                                s.channels()
                            ),
                        });
                    }
                    if s != first {
                        return Err(GraphError::ShapeMismatch {
                            layer_a: pred_name(0),
                            layer_b: pred_name(i),
                            detail: "join inputs must have identical shapes".into(),
                        });
                    }
                }
                first
            }
            LayerOp::ReLU | LayerOp::SoftmaxLoss => pred_shape(0),
            LayerOp::BatchNorm { channels, .. } | LayerOp::Bias { channels, .. } => {
                let p = pred_shape(0);
                if p.channels() != *channels {
                    return Err(GraphError::ShapeMismatch {
                        layer_a: l.name.clone(),
                        layer_b: pred_name(0),
                        detail: format!(
                            "per-channel op over {channels} channels, producer has {}",
                            p.channels()
                        ),
                    });
                }
                p
            }
            LayerOp::MaxPool {
                kernel,
                stride,
                pad,
            }
            | LayerOp::AvgPool {
                kernel,
                stride,
                pad,
            } => match pred_shape(0) {
                Shape::Map { c, h, w } => {
                    let oh = conv_out(h, *kernel, *stride, *pad).ok_or_else(|| {
                        GraphError::ShapeMismatch {
                            layer_a: l.name.clone(),
                            layer_b: pred_name(0),
                            detail: "pool window does not fit input".into(),
                        }
                    })?;
                    let ow = conv_out(w, *kernel, *stride, *pad).ok_or_else(|| {
                        GraphError::ShapeMismatch {
                            layer_a: l.name.clone(),
                            layer_b: pred_name(0),
                            detail: "pool window does not fit input".into(),
                        }
                    })?;
                    Shape::Map { c, h: oh, w: ow }
                }
                Shape::Feat { .. } => {
                    return Err(GraphError::ShapeMismatch {
                        layer_a: l.name.clone(),
                        layer_b: pred_name(0),
                        detail: "pool cannot consume flattened features".into(),
                    })
                }
            },
            LayerOp::GlobalAvgPool => match pred_shape(0) {
                Shape::Map { c, .. } => Shape::Map { c, h: 1, w: 1 },
                Shape::Feat { .. } => {
                    return Err(GraphError::ShapeMismatch {
                        layer_a: l.name.clone(),
                        layer_b: pred_name(0),
                        detail: "global pool cannot consume flattened features".into(),
                    })
                }
            },
            LayerOp::Flatten => match pred_shape(0) {
                Shape::Map { c, h, w } => Shape::Feat {
                    features: c * h * w,
                    slots: c,
                    group: h * w,
                },
                f @ Shape::Feat { .. } => f,
            },
        };
        // replay post-op shape effects
        let mut shape = base;
        for post in &l.post_ops {
            shape = match (&post.kind, shape) {
                (PostOpKind::ReLU, s) => s,
                (PostOpKind::BatchNorm { .. }, s) | (PostOpKind::Bias { .. }, s) => s,
                (
                    PostOpKind::MaxPool {
                        kernel,
                        stride,
                        pad,
                    }
                    | PostOpKind::AvgPool {
                        kernel,
                        stride,
                        pad,
                    },
                    Shape::Map { c, h, w },
                ) => {
                    let oh = conv_out(h, *kernel, *stride, *pad).ok_or_else(|| {
                        GraphError::ShapeMismatch {
                            layer_a: l.name.clone(),
                            layer_b: post.name.clone(),
                            detail: "absorbed pool window does not fit".into(),
                        }
                    })?;
                    let ow = conv_out(w, *kernel, *stride, *pad).unwrap_or(oh);
                    Shape::Map { c, h: oh, w: ow }
                }
                (PostOpKind::GlobalAvgPool, Shape::Map { c, .. }) => Shape::Map { c, h: 1, w: 1 },
                (_, s @ Shape::Feat { .. }) => s,
            };
        }
        Ok(shape)
    }

    /// Flat index helper for a layer's conv/FC weight tensor.
    pub fn weight_name(&self, id: LayerId) -> Option<&str> {
        match &self.layer(id).op {
            LayerOp::Conv2D { weight, .. } | LayerOp::FullyConnected { weight, .. } => {
                Some(weight.as_str())
            }
            _ => None,
        }
    }
}

fn conv_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn toposort(n: usize, preds: &[Vec<LayerId>]) -> Result<Vec<LayerId>, GraphError> {
    let mut indegree = vec![0usize; n];
    for (i, ps) in preds.iter().enumerate() {
        indegree[i] = ps.len();
    }
    let mut succs = vec![Vec::new(); n];
    for (i, ps) in preds.iter().enumerate() {
        for p in ps {
            succs[p.0].push(i);
        }
    }
    // deterministic Kahn: lowest id first
    let mut ready: BTreeSet<usize> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| i)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        order.push(LayerId(i));
        for &s in &succs[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != n {
        return Err(GraphError::CycleDetected);
    }
    Ok(order)
}

/// Build and validate a graph from a parsed manifest and tensor store.
/// Fails atomically: on error nothing usable is returned.
pub fn build_graph(
    manifest: &Manifest,
    store: TensorStore,
    options: &GraphOptions,
) -> Result<NetworkGraph, GraphError> {
    let mut name_to_id: BTreeMap<&str, LayerId> = BTreeMap::new();
    for (i, layer) in manifest.layers.iter().enumerate() {
        if name_to_id.insert(&layer.name, LayerId(i)).is_some() {
            return Err(GraphError::Invalid {
                layer: layer.name.clone(),
                detail: "duplicate layer name".into(),
            });
        }
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut preds = Vec::with_capacity(manifest.layers.len());
    for (i, ml) in manifest.layers.iter().enumerate() {
        let op = manifest_op(ml, options)?;
        let mut ps = Vec::new();
        for from in &ml.from {
            let id = name_to_id
                .get(from.as_str())
                .ok_or_else(|| GraphError::Invalid {
                    layer: ml.name.clone(),
                    detail: format!("unknown predecessor `{from}`"),
                })?;
            ps.push(*id);
        }
        layers.push(LayerNode {
            id: LayerId(i),
            name: ml.name.clone(),
            op,
            post_ops: Vec::new(),
        });
        preds.push(ps);
    }
    NetworkGraph::from_parts(manifest.model.clone(), layers, preds, store, false)
}

fn manifest_op(ml: &ManifestLayer, options: &GraphOptions) -> Result<LayerOp, GraphError> {
    let invalid = |detail: String| GraphError::Invalid {
        layer: ml.name.clone(),
        detail,
    };
    let need = |field: &str, v: Option<usize>| {
        v.ok_or_else(|| invalid(format!("missing field `{field}` for kind {}", ml.kind)))
    };
    let need_ref = |field: &str, v: &Option<String>| {
        v.clone()
            .ok_or_else(|| invalid(format!("missing field `{field}` for kind {}", ml.kind)))
    };
    let positive = |field: &str, v: usize| {
        if v == 0 {
            Err(invalid(format!("field `{field}` must be positive")))
        } else {
            Ok(v)
        }
    };
    Ok(match ml.kind.as_str() {
        "Input" => LayerOp::Input {
            channels: positive("out", need("out", ml.out)?)?,
            height: positive("h", need("h", ml.height)?)?,
            width: positive("w", need("w", ml.width)?)?,
        },
        "Conv2D" => LayerOp::Conv2D {
            in_channels: positive("in", need("in", ml.in_)?)?,
            out_channels: positive("out", need("out", ml.out)?)?,
            kernel: positive("k", need("k", ml.kernel)?)?,
            stride: positive("stride", ml.stride.unwrap_or(1))?,
            pad: ml.pad.unwrap_or(0),
            groups: positive("groups", ml.groups.unwrap_or(1))?,
            mapping: match &ml.mapping {
                Some(m) => GroupMapping::parse(m)
                    .ok_or_else(|| invalid(format!("unknown group mapping `{m}`")))?,
                None => options.default_mapping,
            },
            weight: need_ref("weights", &ml.weights)?,
            bias: ml.bias.clone(),
        },
        "FullyConnected" => LayerOp::FullyConnected {
            in_features: positive("in", need("in", ml.in_)?)?,
            out_features: positive("out", need("out", ml.out)?)?,
            weight: need_ref("weights", &ml.weights)?,
            bias: ml.bias.clone(),
        },
        "EltwiseAdd" => LayerOp::EltwiseAdd,
        "ReLU" => LayerOp::ReLU,
        "BatchNorm" => LayerOp::BatchNorm {
            channels: positive("ch", need("ch", ml.channels)?)?,
            gamma: need_ref("gamma", &ml.gamma)?,
            beta: need_ref("beta", &ml.beta)?,
            mean: need_ref("mean", &ml.mean)?,
            var: need_ref("var", &ml.var)?,
        },
        "Bias" => LayerOp::Bias {
            channels: positive("ch", need("ch", ml.channels)?)?,
            bias: need_ref("bias", &ml.bias)?,
        },
        "MaxPool" => LayerOp::MaxPool {
            kernel: positive("k", need("k", ml.kernel)?)?,
            stride: positive("stride", ml.stride.unwrap_or(need("k", ml.kernel)?))?,
            pad: ml.pad.unwrap_or(0),
        },
        "AvgPool" => LayerOp::AvgPool {
            kernel: positive("k", need("k", ml.kernel)?)?,
            stride: positive("stride", ml.stride.unwrap_or(need("k", ml.kernel)?))?,
            pad: ml.pad.unwrap_or(0),
        },
        "GlobalAvgPool" => LayerOp::GlobalAvgPool,
        "Flatten" => LayerOp::Flatten,
        "SoftmaxLoss" => LayerOp::SoftmaxLoss,
        other => {
            return Err(GraphError::UnsupportedActivation {
                layer: ml.name.clone(),
                detail: format!("unknown layer kind `{other}` (concatenation and other kinds are not modeled)"),
            })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model_io::manifest::parse_manifest;
    use crate::tensor::Tensor;

    fn store_with(entries: &[(&str, Vec<usize>)]) -> TensorStore {
        let mut s = TensorStore::new();
        for (name, shape) in entries {
            let n = shape.iter().product();
            s.insert(*name, Tensor::new(shape.clone(), vec![0.1; n]).unwrap());
        }
        s
    }

    #[test]
    fn tiny_linear_builds_three_nodes_in_order() {
        let g = fixtures::tiny_linear();
        assert_eq!(g.layers().len(), 3);
        let names: Vec<&str> = g.topo().iter().map(|&id| g.layer(id).name.as_str()).collect();
        assert_eq!(names, vec!["input", "conv", "loss"]);
    }

    #[test]
    fn join_arity_mismatch_detected() {
        let text = "dpt-manifest v1\nmodel bad\n\
            layer input kind=Input out=3 h=4 w=4\n\
            layer a kind=Conv2D in=3 out=4 k=1 weights=a.w from=input\n\
            layer b kind=Conv2D in=3 out=8 k=1 weights=b.w from=input\n\
            layer j kind=EltwiseAdd from=a,b\n\
            layer gap kind=GlobalAvgPool from=j\n\
            layer fc kind=FullyConnected in=4 out=2 weights=fc.w from=gap\n\
            layer loss kind=SoftmaxLoss from=fc\n";
        let m = parse_manifest(text).unwrap();
        let store = store_with(&[
            ("a.w", vec![4, 3, 1, 1]),
            ("b.w", vec![8, 3, 1, 1]),
            ("fc.w", vec![2, 4]),
        ]);
        let err = build_graph(&m, store, &GraphOptions::default()).unwrap_err();
        assert!(matches!(err, GraphError::JoinArityMismatch { .. }), "{err:?}");
    }

    #[test]
    fn cycles_detected() {
        let text = "dpt-manifest v1\nmodel cyc\n\
            layer input kind=Input out=2 h=2 w=2\n\
            layer a kind=EltwiseAdd from=input,b\n\
            layer b kind=EltwiseAdd from=a,input\n\
            layer loss kind=SoftmaxLoss from=b\n";
        let m = parse_manifest(text).unwrap();
        let err = build_graph(&m, TensorStore::new(), &GraphOptions::default()).unwrap_err();
        assert_eq!(err, GraphError::CycleDetected);
    }

    #[test]
    fn dangling_tensor_ref_detected() {
        let text = "dpt-manifest v1\nmodel miss\n\
            layer input kind=Input out=3 h=1 w=1\n\
            layer conv kind=Conv2D in=3 out=4 k=1 weights=missing.w from=input\n\
            layer loss kind=SoftmaxLoss from=conv\n";
        let m = parse_manifest(text).unwrap();
        let err = build_graph(&m, TensorStore::new(), &GraphOptions::default()).unwrap_err();
        assert!(matches!(err, GraphError::DanglingTensorRef { tensor, .. } if tensor == "missing.w"));
    }

    #[test]
    fn unknown_kind_is_unsupported() {
        let text = "dpt-manifest v1\nmodel c\n\
            layer input kind=Input out=3 h=1 w=1\n\
            layer cat kind=Concat from=input\n\
            layer loss kind=SoftmaxLoss from=cat\n";
        let m = parse_manifest(text).unwrap();
        let err = build_graph(&m, TensorStore::new(), &GraphOptions::default()).unwrap_err();
        assert!(matches!(err, GraphError::UnsupportedActivation { .. }));
    }

    #[test]
    fn absorb_relu_between_convs_registers_nothing() {
        let g = fixtures::linear_toy(3);
        let a = absorb_activations(&g).unwrap();
        let conv1 = a.layer_by_name("conv1").unwrap();
        // relu absorbed, no per-channel parameters beyond conv's own bias
        assert_eq!(a.layers().len(), 5); // input conv1 conv2 fc loss
        assert_eq!(conv1.post_ops.len(), 1);
        assert!(matches!(conv1.post_ops[0].kind, PostOpKind::ReLU));
        // only the conv's own bias registers
        let params = conv1.channel_params(0);
        assert_eq!(params.len(), 1);
        assert_eq!(params[0].tensor, "conv1.b");
    }

    #[test]
    fn absorb_batchnorm_registers_four_params_per_channel() {
        let g = fixtures::resblock_toy(3);
        let a = absorb_activations(&g).unwrap();
        let conv_a = a.layer_by_name("convA").unwrap();
        let params = conv_a.channel_params(2);
        let tensors: Vec<&str> = params.iter().map(|p| p.tensor.as_str()).collect();
        assert_eq!(tensors, vec!["bnA.g", "bnA.b", "bnA.m", "bnA.v"]);
        assert!(params.iter().all(|p| p.index == 2));
    }

    #[test]
    fn absorb_resblock_keeps_joins_drops_relus() {
        let raw = fixtures::resblock_toy(3);
        assert_eq!(raw.layers().len(), 18);
        let a = absorb_activations(&raw).unwrap();
        assert_eq!(a.layers().len(), 9);
        let adds = a
            .layers()
            .iter()
            .filter(|l| matches!(l.op, LayerOp::EltwiseAdd))
            .count();
        assert_eq!(adds, 2);
        assert!(a.layers().iter().all(|l| !matches!(l.op, LayerOp::ReLU)));
        // channel counts of weight-bearing layers unchanged
        for name in ["convA", "convB", "convC", "convD", "fc"] {
            let r = raw.layer_by_name(name).unwrap();
            let b = a.layer_by_name(name).unwrap();
            assert_eq!(
                raw.out_channels(r.id),
                a.out_channels(b.id),
                "channel count of {name}"
            );
        }
    }

    #[test]
    fn absorb_is_idempotent() {
        let g = fixtures::resblock_toy(3);
        let once = absorb_activations(&g).unwrap();
        let twice = absorb_activations(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mixed_raw_and_activation_consumers_rejected() {
        // conv output read both directly (add) and through a relu
        let text = "dpt-manifest v1\nmodel tap\n\
            layer input kind=Input out=2 h=2 w=2\n\
            layer conv kind=Conv2D in=2 out=2 k=1 weights=c.w from=input\n\
            layer relu kind=ReLU from=conv\n\
            layer conv2 kind=Conv2D in=2 out=2 k=1 weights=c2.w from=relu\n\
            layer j kind=EltwiseAdd from=conv,conv2\n\
            layer gap kind=GlobalAvgPool from=j\n\
            layer fc kind=FullyConnected in=2 out=2 weights=f.w from=gap\n\
            layer loss kind=SoftmaxLoss from=fc\n";
        let m = parse_manifest(text).unwrap();
        let store = store_with(&[
            ("c.w", vec![2, 2, 1, 1]),
            ("c2.w", vec![2, 2, 1, 1]),
            ("f.w", vec![2, 2]),
        ]);
        let g = build_graph(&m, store, &GraphOptions::default()).unwrap();
        let err = absorb_activations(&g).unwrap_err();
        assert!(matches!(err, GraphError::UnsupportedActivation { .. }));
    }

    #[test]
    fn group_mapping_slot_arithmetic() {
        // interleaved: slot = j % m_in; blocked: slot = j / g
        let m_in = 2;
        let g = 2;
        let inter: Vec<usize> = (0..4)
            .map(|j| GroupMapping::Interleaved.slot_of(j, m_in, g))
            .collect();
        assert_eq!(inter, vec![0, 1, 0, 1]);
        let blocked: Vec<usize> = (0..4)
            .map(|j| GroupMapping::Blocked.slot_of(j, m_in, g))
            .collect();
        assert_eq!(blocked, vec![0, 0, 1, 1]);
        // channel_of inverts slot_of within each group
        for mapping in [GroupMapping::Interleaved, GroupMapping::Blocked] {
            for group in 0..g {
                for slot in 0..m_in {
                    let ch = mapping.channel_of(group, slot, m_in, g);
                    assert_eq!(mapping.slot_of(ch, m_in, g), slot);
                }
            }
        }
    }

    #[test]
    fn flatten_groups_fc_slots_per_source_channel() {
        let g = fixtures::flatten_toy(5);
        let a = absorb_activations(&g).unwrap();
        let fc1 = a.layer_by_name("fc1").unwrap();
        assert_eq!(a.in_slots(fc1.id), 4); // conv1 channels
        assert_eq!(a.slot_group(fc1.id), 9); // 3x3 pooled spatial
        let fc2 = a.layer_by_name("fc2").unwrap();
        assert_eq!(a.in_slots(fc2.id), 6);
        assert_eq!(a.slot_group(fc2.id), 1);
    }
}
