//! Reference prune-set computation by naive fixpoint iteration.
//!
//! Starts from a seed output channel and alternates two propagation rules
//! until nothing changes: a pruned output channel prunes every input slot it
//! reaches, and a pruned input slot prunes every output channel that feeds
//! it. This is deliberately independent of [`DependencyGraph`](super::DependencyGraph): it walks the
//! absorbed graph directly, resolves joins and flatten nodes on the fly, and
//! spells out the group-slot arithmetic inline, so disagreements between the
//! two paths surface real defects. Used by verification and tests only.

use std::collections::BTreeSet;

use crate::graph::{ChannelRef, GroupMapping, LayerId, LayerOp, NetworkGraph, Side};

use super::{DependencyError, PruneSet, SliceAxis, WeightSlice};

type Chan = (LayerId, usize);
type Slot = (LayerId, usize);

fn is_producer(graph: &NetworkGraph, id: LayerId) -> bool {
    matches!(
        graph.layer(id).op,
        LayerOp::Input { .. }
            | LayerOp::Conv2D { .. }
            | LayerOp::FullyConnected { .. }
            | LayerOp::EltwiseAdd
    )
}

/// Slot index of layer `l` read by channel `j` of its producer space.
fn slot_for_channel(graph: &NetworkGraph, l: LayerId, j: usize) -> usize {
    match &graph.layer(l).op {
        LayerOp::Conv2D {
            in_channels,
            groups,
            mapping,
            ..
        } => {
            let m_in = in_channels / groups;
            match mapping {
                GroupMapping::Interleaved => j % m_in,
                GroupMapping::Blocked => j / groups,
            }
        }
        LayerOp::FullyConnected { .. } => j,
        _ => unreachable!("only weight-bearing layers have slots"),
    }
}

/// Producer-space channels of layer `l` that read slot `s`.
fn channels_for_slot(graph: &NetworkGraph, l: LayerId, s: usize) -> Vec<usize> {
    match &graph.layer(l).op {
        LayerOp::Conv2D {
            in_channels,
            groups,
            mapping,
            ..
        } => {
            let m_in = in_channels / groups;
            (0..*groups)
                .map(|a| match mapping {
                    GroupMapping::Interleaved => a * m_in + s,
                    GroupMapping::Blocked => s * groups + a,
                })
                .collect()
        }
        LayerOp::FullyConnected { .. } => vec![s],
        _ => unreachable!(),
    }
}

/// All producer channels whose map contributes to channel `ch` of `id`'s
/// output, including `id` itself and transparent adds along the way.
fn expand_up(graph: &NetworkGraph, id: LayerId, ch: usize, out: &mut BTreeSet<Chan>) {
    match &graph.layer(id).op {
        LayerOp::Input { .. } | LayerOp::Conv2D { .. } | LayerOp::FullyConnected { .. } => {
            out.insert((id, ch));
        }
        LayerOp::EltwiseAdd => {
            if out.insert((id, ch)) {
                for &p in graph.preds(id) {
                    expand_up(graph, p, ch, out);
                }
            }
        }
        LayerOp::Flatten => expand_up(graph, graph.preds(id)[0], ch, out),
        _ => unreachable!("absorbed graph"),
    }
}

/// All slots reading the map of producer channel `(id, ch)`, walking down
/// through adds and flatten.
fn slots_below(graph: &NetworkGraph, id: LayerId, ch: usize, out: &mut BTreeSet<Slot>) {
    for &s in graph.succs(id) {
        match &graph.layer(s).op {
            LayerOp::Conv2D { .. } | LayerOp::FullyConnected { .. } => {
                out.insert((s, slot_for_channel(graph, s, ch)));
            }
            LayerOp::EltwiseAdd | LayerOp::Flatten => slots_below(graph, s, ch, out),
            LayerOp::SoftmaxLoss => {}
            _ => unreachable!("absorbed graph"),
        }
    }
}

/// Compute the prune set for `seed` by fixpoint iteration of the
/// zero-propagation predicate. Same contract as
/// [`DependencyGraph::prune_set`](super::DependencyGraph::prune_set).
pub fn oracle_prune_set(
    graph: &NetworkGraph,
    seed: ChannelRef,
) -> Result<PruneSet, DependencyError> {
    if !graph.is_absorbed() {
        return Err(DependencyError::NotAbsorbed);
    }
    if seed.side != Side::Output
        || !graph.layer(seed.layer).op.is_weight_bearing()
        || seed.index >= graph.out_channels(seed.layer)
    {
        return Err(DependencyError::BadSeed(seed));
    }

    let mut marked_out: BTreeSet<Chan> = BTreeSet::new();
    let mut marked_slot: BTreeSet<Slot> = BTreeSet::new();
    marked_out.insert((seed.layer, seed.index));

    loop {
        let before = (marked_out.len(), marked_slot.len());

        // pruned output channel -> its downstream slots are pruned
        let mut new_slots = BTreeSet::new();
        for &(l, c) in &marked_out {
            slots_below(graph, l, c, &mut new_slots);
        }
        marked_slot.extend(new_slots);

        // pruned slot -> every channel feeding it is pruned
        let mut new_out = BTreeSet::new();
        for &(l, s) in &marked_slot {
            let pred = graph.preds(l)[0];
            for ch in channels_for_slot(graph, l, s) {
                expand_up(graph, pred, ch, &mut new_out);
            }
        }
        marked_out.extend(new_out);

        if (marked_out.len(), marked_slot.len()) == before {
            break;
        }
    }

    // assemble, mirroring the public PruneSet conventions
    let coparents: Vec<ChannelRef> = marked_out
        .iter()
        .filter(|&&(l, _)| graph.layer(l).op.is_weight_bearing())
        .map(|&(l, c)| ChannelRef::output(l, c))
        .collect();
    let siblings: Vec<ChannelRef> = marked_slot
        .iter()
        .map(|&(l, s)| ChannelRef::input_slot(l, s))
        .collect();

    let mut weight_slices: Vec<WeightSlice> = coparents
        .iter()
        .map(|c| WeightSlice {
            layer: c.layer,
            axis: SliceAxis::Output,
            index: c.index,
        })
        .chain(siblings.iter().map(|s| WeightSlice {
            layer: s.layer,
            axis: SliceAxis::Input,
            index: s.index,
        }))
        .collect();
    weight_slices.sort();

    let mut bias_params = Vec::new();
    for &(l, c) in marked_out.iter().filter(|&&(l, _)| is_producer(graph, l)) {
        bias_params.extend(graph.layer(l).channel_params(c));
    }
    bias_params.sort();
    bias_params.dedup();

    Ok(PruneSet {
        seed,
        coparents,
        siblings,
        weight_slices,
        bias_params,
    })
}
