//! Activation absorption.
//!
//! Folds activation chains (ReLU, BatchNorm, Bias, pooling) into the
//! structural layer that produces their input, leaving a graph whose edges
//! connect only Input, Conv2D, FullyConnected, EltwiseAdd, Flatten and
//! SoftmaxLoss. Per-channel parameters of absorbed BatchNorm/Bias ops stay
//! attached to the producer's output channels (see
//! [`LayerNode::channel_params`]) so pruning can zero them along with the
//! producing weights. ReLU and pooling map zero inputs to zero outputs and
//! absorb without registration; BatchNorm and Bias only preserve zero once
//! their per-channel parameters are zeroed, which is exactly what the
//! registration records.

use super::{
    GraphError, LayerId, LayerNode, LayerOp, NetworkGraph, PostOp, PostOpKind,
};

fn as_post_op(node: &LayerNode) -> Option<PostOpKind> {
    match &node.op {
        LayerOp::ReLU => Some(PostOpKind::ReLU),
        LayerOp::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            ..
        } => Some(PostOpKind::BatchNorm {
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: mean.clone(),
            var: var.clone(),
        }),
        LayerOp::Bias { bias, .. } => Some(PostOpKind::Bias { bias: bias.clone() }),
        LayerOp::MaxPool {
            kernel,
            stride,
            pad,
        } => Some(PostOpKind::MaxPool {
            kernel: *kernel,
            stride: *stride,
            pad: *pad,
        }),
        LayerOp::AvgPool {
            kernel,
            stride,
            pad,
        } => Some(PostOpKind::AvgPool {
            kernel: *kernel,
            stride: *stride,
            pad: *pad,
        }),
        LayerOp::GlobalAvgPool => Some(PostOpKind::GlobalAvgPool),
        _ => None,
    }
}

/// Collapse activation chains into producer post-ops. Idempotent: applying
/// it to an already-absorbed graph returns an equal graph.
pub fn absorb_activations(graph: &NetworkGraph) -> Result<NetworkGraph, GraphError> {
    // Every activation node must sit on a linear chain: it may feed either
    // exactly one further activation node, or any number of structural
    // consumers. Mixed or branching taps would make the replayed dataflow
    // ambiguous.
    for l in graph.layers() {
        let absorbable: Vec<LayerId> = graph
            .succs(l.id)
            .iter()
            .copied()
            .filter(|s| !graph.layer(*s).op.is_structural())
            .collect();
        let structural = graph.succs(l.id).len() - absorbable.len();
        if absorbable.len() > 1 {
            return Err(GraphError::UnsupportedActivation {
                layer: l.name.clone(),
                detail: "output feeds more than one activation chain".into(),
            });
        }
        if absorbable.len() == 1 && structural > 0 {
            return Err(GraphError::UnsupportedActivation {
                layer: l.name.clone(),
                detail: "output is consumed both raw and through an activation".into(),
            });
        }
        if matches!(l.op, LayerOp::Flatten) && !absorbable.is_empty() {
            return Err(GraphError::UnsupportedActivation {
                layer: graph.layer(absorbable[0]).name.clone(),
                detail: "activations after flatten are not supported".into(),
            });
        }
    }

    // Walk up from a layer to the structural node producing its input.
    let resolve_up = |mut id: LayerId| -> LayerId {
        while !graph.layer(id).op.is_structural() {
            id = graph.preds(id)[0];
        }
        id
    };

    let structural: Vec<&LayerNode> = graph
        .layers()
        .iter()
        .filter(|l| l.op.is_structural())
        .collect();
    let mut new_id = std::collections::BTreeMap::new();
    for (i, l) in structural.iter().enumerate() {
        new_id.insert(l.id, LayerId(i));
    }

    let mut layers = Vec::with_capacity(structural.len());
    let mut preds = Vec::with_capacity(structural.len());
    for (i, l) in structural.iter().enumerate() {
        // follow the (unique) downstream activation chain
        let mut post_ops = l.post_ops.clone();
        let mut cursor = l.id;
        loop {
            let next = graph
                .succs(cursor)
                .iter()
                .copied()
                .find(|s| !graph.layer(*s).op.is_structural());
            match next {
                Some(a) => {
                    let node = graph.layer(a);
                    let kind = as_post_op(node).expect("non-structural kinds are absorbable");
                    post_ops.push(PostOp {
                        name: node.name.clone(),
                        kind,
                    });
                    cursor = a;
                }
                None => break,
            }
        }
        let ps: Vec<LayerId> = graph.preds(l.id).iter().map(|&p| new_id[&resolve_up(p)]).collect();
        layers.push(LayerNode {
            id: LayerId(i),
            name: l.name.clone(),
            op: l.op.clone(),
            post_ops,
        });
        preds.push(ps);
    }

    NetworkGraph::from_parts(
        graph.name.clone(),
        layers,
        preds,
        graph.store().clone(),
        true,
    )
}
