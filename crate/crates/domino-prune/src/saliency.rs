//! Per-channel base saliency metrics.
//!
//! Three bases: L1 norm of weights, first-order Taylor on weights
//! (`|sum w * dL/dw|` over the slice), and first-order Taylor on feature
//! maps (`|sum a * dL/da|` over the map, divided by batch size). Each score
//! comes with the element count of its slice so `-avg` scaling can divide a
//! combined raw sum by the combined count rather than averaging averages.
//!
//! Output-side slices select weight rows `W[i, ..]` (producer channels);
//! input-side slices select columns `W[:, j, ..]` across all groups, or the
//! per-source-channel column group of a fully-connected layer.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dependency::{DependencyGraph, PrunedMask};
use crate::engine::BatchResult;
use crate::graph::{ChannelRef, LayerOp, NetworkGraph, Shape, Side};

#[derive(Debug, Error, PartialEq)]
pub enum SaliencyError {
    #[error("channel {0:?} is pruned")]
    PrunedChannel(ChannelRef),
    #[error("metric requires gradients, none were provided")]
    MissingGradients,
    #[error("metric requires stored activations, none were provided")]
    MissingActivations,
    #[error("cannot average over zero elements")]
    ZeroCount,
    #[error("{0:?} does not reference a weight-bearing layer")]
    NotWeightBearing(ChannelRef),
    #[error("closure member {0:?} has no raw saliency")]
    IncompleteClosure(ChannelRef),
}

/// Base saliency metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMetric {
    L1Weights,
    TaylorWeights,
    TaylorFmaps,
}

impl BaseMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaseMetric::L1Weights => "l1",
            BaseMetric::TaylorWeights => "taylor-w",
            BaseMetric::TaylorFmaps => "taylor-f",
        }
    }

    pub fn parse(s: &str) -> Option<BaseMetric> {
        match s {
            "l1" => Some(BaseMetric::L1Weights),
            "taylor-w" => Some(BaseMetric::TaylorWeights),
            "taylor-f" => Some(BaseMetric::TaylorFmaps),
            _ => None,
        }
    }

    pub fn needs_gradients(&self) -> bool {
        !matches!(self, BaseMetric::L1Weights)
    }
}

/// Base metric plus averaging flag and saliency-batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub base: BaseMetric,
    pub averaged: bool,
    /// Samples drawn (once per campaign) for gradient-based metrics.
    pub saliency_batch: usize,
}

impl MetricConfig {
    pub fn new(base: BaseMetric, averaged: bool) -> MetricConfig {
        MetricConfig {
            base,
            averaged,
            saliency_batch: 256,
        }
    }

    /// Stable CLI string: `l1`, `l1-avg`, `taylor-w`, ...
    pub fn name(&self) -> String {
        if self.averaged {
            format!("{}-avg", self.base.as_str())
        } else {
            self.base.as_str().to_string()
        }
    }

    pub fn parse(s: &str) -> Option<MetricConfig> {
        let (base, averaged) = match s.strip_suffix("-avg") {
            Some(prefix) => (prefix, true),
            None => (s, false),
        };
        Some(MetricConfig::new(BaseMetric::parse(base)?, averaged))
    }
}

/// Raw (unaveraged) saliency and the element count of its slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawScore {
    pub raw: f64,
    pub count: usize,
}

/// Raw saliencies for output channels and input slots.
#[derive(Debug, Clone, Default)]
pub struct RawSaliencies {
    pub outputs: BTreeMap<ChannelRef, RawScore>,
    pub slots: BTreeMap<ChannelRef, RawScore>,
}

/// Final per-output-channel scores under some metric configuration.
#[derive(Debug, Clone, Default)]
pub struct SaliencyVector {
    pub scores: BTreeMap<ChannelRef, f64>,
    pub counts: BTreeMap<ChannelRef, usize>,
}

/// Flat element ranges of the slice a `ChannelRef` selects in its layer's
/// weight tensor, with the slice's element count.
fn slice_ranges(
    graph: &NetworkGraph,
    r: ChannelRef,
) -> Result<(String, Vec<std::ops::Range<usize>>, usize), SaliencyError> {
    match &graph.layer(r.layer).op {
        LayerOp::Conv2D {
            in_channels,
            out_channels,
            kernel,
            groups,
            weight,
            ..
        } => {
            let m_in = in_channels / groups;
            let kk = kernel * kernel;
            match r.side {
                Side::Output => {
                    let row = m_in * kk;
                    Ok((
                        weight.clone(),
                        vec![r.index * row..(r.index + 1) * row],
                        row,
                    ))
                }
                Side::InputSlot => {
                    let row = m_in * kk;
                    let ranges = (0..*out_channels)
                        .map(|o| o * row + r.index * kk..o * row + (r.index + 1) * kk)
                        .collect();
                    Ok((weight.clone(), ranges, out_channels * kk))
                }
            }
        }
        LayerOp::FullyConnected {
            in_features,
            out_features,
            weight,
            ..
        } => {
            let gs = graph.slot_group(r.layer);
            match r.side {
                Side::Output => Ok((
                    weight.clone(),
                    vec![r.index * in_features..(r.index + 1) * in_features],
                    *in_features,
                )),
                Side::InputSlot => {
                    let ranges = (0..*out_features)
                        .map(|o| {
                            o * in_features + r.index * gs..o * in_features + (r.index + 1) * gs
                        })
                        .collect();
                    Ok((weight.clone(), ranges, out_features * gs))
                }
            }
        }
        _ => Err(SaliencyError::NotWeightBearing(r)),
    }
}

/// L1 norm of the selected weight slice.
pub fn saliency_l1(graph: &NetworkGraph, r: ChannelRef) -> Result<RawScore, SaliencyError> {
    let (weight, ranges, count) = slice_ranges(graph, r)?;
    let data = graph.store().get(&weight).expect("validated ref").data();
    let mut raw = 0.0f64;
    for range in ranges {
        for &w in &data[range] {
            raw += w.abs() as f64;
        }
    }
    Ok(RawScore { raw, count })
}

/// First-order Taylor on weights: `|sum w * dL/dw|` over the slice.
pub fn saliency_taylor_weights(
    graph: &NetworkGraph,
    grads: &BatchResult,
    r: ChannelRef,
) -> Result<RawScore, SaliencyError> {
    let (weight, ranges, count) = slice_ranges(graph, r)?;
    let data = graph.store().get(&weight).expect("validated ref").data();
    let g = grads
        .grads_w
        .get(&weight)
        .ok_or(SaliencyError::MissingGradients)?
        .data();
    let mut acc = 0.0f64;
    for range in ranges {
        for i in range {
            acc += data[i] as f64 * g[i] as f64;
        }
    }
    Ok(RawScore {
        raw: acc.abs(),
        count,
    })
}

/// First-order Taylor on feature maps: `|sum a * dL/da| / batch`.
///
/// Output side scores the producer's (post-op) output map; input-slot side
/// scores the consumer's input map through that consumer only, covering all
/// producer channels that feed the slot for grouped layers.
pub fn saliency_taylor_fmaps(
    graph: &NetworkGraph,
    result: &BatchResult,
    r: ChannelRef,
) -> Result<RawScore, SaliencyError> {
    if result.activations.is_empty() {
        return Err(SaliencyError::MissingActivations);
    }
    if result.grads_a.is_empty() {
        return Err(SaliencyError::MissingGradients);
    }
    if !graph.layer(r.layer).op.is_weight_bearing() {
        return Err(SaliencyError::NotWeightBearing(r));
    }
    match r.side {
        Side::Output => {
            let act = &result.activations[r.layer.0];
            let grad = &result.grads_a[r.layer.0];
            let n = act.shape()[0];
            let per = act.len() / n;
            let shape = graph.out_shape(r.layer);
            let (pixels, offset) = match shape {
                Shape::Map { h, w, .. } => (h * w, r.index * h * w),
                Shape::Feat { group, .. } => (group, r.index * group),
            };
            let mut acc = 0.0f64;
            for item in 0..n {
                let base = item * per + offset;
                for p in 0..pixels {
                    acc += act.data()[base + p] as f64 * grad.data()[base + p] as f64;
                }
            }
            Ok(RawScore {
                raw: acc.abs() / n as f64,
                count: pixels,
            })
        }
        Side::InputSlot => {
            let pred = graph.preds(r.layer)[0];
            let act = &result.activations[pred.0];
            let grad = result.grads_x[r.layer.0]
                .as_ref()
                .ok_or(SaliencyError::MissingGradients)?;
            let n = act.shape()[0];
            let per = act.len() / n;
            // channels of the consumer's input space reading this slot
            let (channels, pixels): (Vec<usize>, usize) = match &graph.layer(r.layer).op {
                LayerOp::Conv2D {
                    in_channels,
                    groups,
                    mapping,
                    ..
                } => {
                    let m_in = in_channels / groups;
                    let (h, w) = graph.in_shape(r.layer).spatial();
                    (
                        (0..*groups)
                            .map(|a| mapping.channel_of(a, r.index, m_in, *groups))
                            .collect(),
                        h * w,
                    )
                }
                LayerOp::FullyConnected { .. } => {
                    (vec![r.index], graph.slot_group(r.layer))
                }
                _ => unreachable!("weight-bearing checked above"),
            };
            let mut acc = 0.0f64;
            for item in 0..n {
                for &c in &channels {
                    let base = item * per + c * pixels;
                    for p in 0..pixels {
                        acc += act.data()[base + p] as f64 * grad.data()[base + p] as f64;
                    }
                }
            }
            Ok(RawScore {
                raw: acc.abs() / n as f64,
                count: pixels * channels.len(),
            })
        }
    }
}

/// `raw / count` when averaging is on, `raw` otherwise. Combined slices
/// must divide the summed raw by the summed count, not average averages.
pub fn apply_averaging(raw: f64, count: usize, averaged: bool) -> Result<f64, SaliencyError> {
    if count == 0 {
        return Err(SaliencyError::ZeroCount);
    }
    Ok(if averaged { raw / count as f64 } else { raw })
}

/// Raw saliencies for every unpruned output channel and input slot.
pub fn compute_raw(
    graph: &NetworkGraph,
    dep: &DependencyGraph,
    base: BaseMetric,
    grads: Option<&BatchResult>,
    mask: &PrunedMask,
) -> Result<RawSaliencies, SaliencyError> {
    let score = |r: ChannelRef| -> Result<RawScore, SaliencyError> {
        match base {
            BaseMetric::L1Weights => saliency_l1(graph, r),
            BaseMetric::TaylorWeights => {
                saliency_taylor_weights(graph, grads.ok_or(SaliencyError::MissingGradients)?, r)
            }
            BaseMetric::TaylorFmaps => {
                saliency_taylor_fmaps(graph, grads.ok_or(SaliencyError::MissingGradients)?, r)
            }
        }
    };
    let mut out = RawSaliencies::default();
    for r in dep.weight_bearing_channels() {
        if mask.output_pruned(r.layer, r.index) {
            continue;
        }
        out.outputs.insert(r, score(r)?);
    }
    for r in dep.all_slots() {
        if mask.slot_pruned(r.layer, r.index) {
            continue;
        }
        out.slots.insert(r, score(r)?);
    }
    Ok(out)
}

/// Dump a saliency vector as CSV: `layer,channel,raw,count,score`.
pub fn vector_to_csv(
    graph: &NetworkGraph,
    raws: &RawSaliencies,
    vector: &SaliencyVector,
) -> String {
    let mut out = String::from("layer,channel,raw,count,score\n");
    for (r, score) in &vector.scores {
        let raw = raws.outputs.get(r).map_or(f64::NAN, |s| s.raw);
        let count = vector.counts.get(r).copied().unwrap_or(0);
        out.push_str(&format!(
            "{},{},{:.9e},{},{:.9e}\n",
            graph.layer(r.layer).name,
            r.index,
            raw,
            count,
            score
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averaging_rules() {
        assert_eq!(apply_averaging(3.0, 4, true).unwrap(), 0.75);
        assert_eq!(apply_averaging(3.0, 4, false).unwrap(), 3.0);
        assert_eq!(apply_averaging(1.0, 0, true), Err(SaliencyError::ZeroCount));
        // combining slices: (3.0 + 1.0) / (4 + 4), not the mean of 0.75 and 0.25
        let combined = apply_averaging(3.0 + 1.0, 8, true).unwrap();
        assert_eq!(combined, 0.5);
    }

    #[test]
    fn metric_names_round_trip() {
        for name in ["l1", "l1-avg", "taylor-w", "taylor-f-avg"] {
            let m = MetricConfig::parse(name).unwrap();
            assert_eq!(m.name(), name);
        }
        assert!(MetricConfig::parse("l2").is_none());
    }
}

#[cfg(test)]
mod metric_tests {
    use super::*;
    use crate::dependency::{DependencyGraph, PrunedMask};
    use crate::engine::{backward, BatchResult};
    use crate::fixtures::FixtureBuilder;
    use crate::graph::{absorb_activations, GroupMapping, NetworkGraph};
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    /// input(1x4x4) -> conv(1->2, k2) -> gap -> fc -> loss
    fn small_conv_net() -> NetworkGraph {
        let mut b = FixtureBuilder::new("sal", 3);
        b.input("input", 1, 4, 4);
        b.conv("conv", "input", 1, 2, 2, 0, 1, GroupMapping::Interleaved, false);
        b.gap("gap", "conv");
        b.fc("fc", "gap", 2, 2, true);
        b.loss("loss", "fc");
        b.build()
    }

    #[test]
    fn l1_of_known_weights() {
        let mut g = small_conv_net();
        g.store_mut()
            .get_mut("conv.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.5, -0.5, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let conv = g.layer_by_name("conv").unwrap().id;
        let s = saliency_l1(&g, ChannelRef::output(conv, 0)).unwrap();
        assert_eq!(s.raw, 3.0);
        assert_eq!(s.count, 4);
        let zero = saliency_l1(&g, ChannelRef::output(conv, 1)).unwrap();
        assert_eq!(zero.raw, 0.0);
    }

    #[test]
    fn l1_matches_naive_sum_on_random_conv() {
        let mut rng = Rng::new(5);
        let mut b = FixtureBuilder::new("l1rand", 6);
        b.input("input", 3, 5, 5);
        b.conv("conv", "input", 3, 4, 3, 1, 1, GroupMapping::Interleaved, false);
        b.gap("gap", "conv");
        b.fc("fc", "gap", 4, 2, true);
        b.loss("loss", "fc");
        let mut g = b.build();
        for v in g.store_mut().get_mut("conv.w").unwrap().data_mut() {
            *v = rng.range_f64(-1.0, 1.0) as f32;
        }
        let conv = g.layer_by_name("conv").unwrap().id;
        let s = saliency_l1(&g, ChannelRef::output(conv, 2)).unwrap();
        let w = g.store().get("conv.w").unwrap().data();
        let mut naive = 0.0f64;
        for i in 2 * 27..3 * 27 {
            naive += w[i].abs() as f64;
        }
        assert!((s.raw - naive).abs() / naive <= 1e-6);
        assert_eq!(s.count, 27);
        // input-slot side: all filters' plane j
        let slot = saliency_l1(&g, ChannelRef::input_slot(conv, 1)).unwrap();
        let mut naive_slot = 0.0f64;
        for o in 0..4 {
            for i in 0..9 {
                naive_slot += w[o * 27 + 9 + i].abs() as f64;
            }
        }
        assert!((slot.raw - naive_slot).abs() / naive_slot <= 1e-6);
        assert_eq!(slot.count, 36);
    }

    #[test]
    fn taylor_weights_of_known_values() {
        // w = {1, 2}, g = {0.1, -0.2} -> |0.1 - 0.4| = 0.3
        let mut b = FixtureBuilder::new("tw", 3);
        b.input("input", 2, 2, 2);
        b.conv("conv", "input", 2, 1, 1, 0, 1, GroupMapping::Interleaved, false);
        b.gap("gap", "conv");
        b.fc("fc", "gap", 1, 2, true);
        b.loss("loss", "fc");
        let mut g = b.build();
        g.store_mut()
            .get_mut("conv.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 2.0]);
        let mut grads_w = BTreeMap::new();
        grads_w.insert(
            "conv.w".to_string(),
            Tensor::new(vec![1, 2, 1, 1], vec![0.1, -0.2]).unwrap(),
        );
        let fake = BatchResult {
            loss: 0.0,
            correct: 0,
            activations: Vec::new(),
            grads_w,
            grads_a: Vec::new(),
            grads_x: Vec::new(),
        };
        let conv = g.layer_by_name("conv").unwrap().id;
        let s = saliency_taylor_weights(&g, &fake, ChannelRef::output(conv, 0)).unwrap();
        assert!((s.raw - 0.3).abs() < 1e-6);
        assert_eq!(s.count, 2);
        // zero gradients -> 0
        let mut zero_grads = BTreeMap::new();
        zero_grads.insert("conv.w".to_string(), Tensor::zeros(vec![1, 2, 1, 1]));
        let zero = BatchResult {
            grads_w: zero_grads,
            ..fake
        };
        let s = saliency_taylor_weights(&g, &zero, ChannelRef::output(conv, 0)).unwrap();
        assert_eq!(s.raw, 0.0);
    }

    #[test]
    fn taylor_fmaps_of_known_values() {
        // a = g on a 2-pixel map, a = {1, 2}, batch 1 -> |1 + 4| = 5
        let g = absorb_activations(&{
            let mut b = FixtureBuilder::new("tf", 3);
            b.input("input", 1, 2, 1);
            b.conv("conv", "input", 1, 1, 1, 0, 1, GroupMapping::Interleaved, false);
            b.flatten("flat", "conv");
            b.fc("fc", "flat", 2, 2, true);
            b.loss("loss", "fc");
            b.build()
        })
        .unwrap();
        let conv = g.layer_by_name("conv").unwrap().id;
        let mut activations: Vec<Tensor> = g
            .layers()
            .iter()
            .map(|_| Tensor::zeros(vec![1, 1]))
            .collect();
        let mut grads_a = activations.clone();
        activations[conv.0] = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        grads_a[conv.0] = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let fake = BatchResult {
            loss: 0.0,
            correct: 0,
            activations,
            grads_w: BTreeMap::new(),
            grads_a,
            grads_x: vec![None; g.layers().len()],
        };
        let s = saliency_taylor_fmaps(&g, &fake, ChannelRef::output(conv, 0)).unwrap();
        assert!((s.raw - 5.0).abs() < 1e-6);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn relu_dead_channel_scores_zero_fmaps() {
        // negative weights + relu clamp the map to zero
        let mut b = FixtureBuilder::new("dead", 3);
        b.input("input", 1, 3, 3);
        b.conv("conv", "input", 1, 2, 1, 0, 1, GroupMapping::Interleaved, false);
        b.relu("relu", "conv");
        b.conv("conv2", "relu", 2, 2, 1, 0, 1, GroupMapping::Interleaved, false);
        b.gap("gap", "conv2");
        b.fc("fc", "gap", 2, 2, true);
        b.loss("loss", "fc");
        let mut g = b.build();
        g.store_mut()
            .get_mut("conv.w")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[-1.0, 0.5]);
        let g = absorb_activations(&g).unwrap();
        let mut rng = Rng::new(4);
        let data: Vec<f32> = (0..9).map(|_| rng.range_f64(0.1, 1.0) as f32).collect();
        let batch = Tensor::new(vec![1, 1, 3, 3], data).unwrap();
        let out = backward(&g, &batch, &[1]).unwrap();
        let conv = g.layer_by_name("conv").unwrap().id;
        let s = saliency_taylor_fmaps(&g, &out, ChannelRef::output(conv, 0)).unwrap();
        assert_eq!(s.raw, 0.0);
    }

    #[test]
    fn fmaps_match_naive_recomputation_on_random_net() {
        let g = absorb_activations(&crate::fixtures::grouped_toy(5, GroupMapping::Interleaved))
            .unwrap();
        let mut rng = Rng::new(17);
        let n = 3usize;
        let data: Vec<f32> = (0..n * 3 * 8 * 8).map(|_| rng.range_f64(0.0, 1.0) as f32).collect();
        let batch = Tensor::new(vec![n, 3, 8, 8], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let out = backward(&g, &batch, &labels).unwrap();
        let conv2 = g.layer_by_name("conv2").unwrap().id;
        // output side, channel 3
        let s = saliency_taylor_fmaps(&g, &out, ChannelRef::output(conv2, 3)).unwrap();
        let act = &out.activations[conv2.0];
        let grad = &out.grads_a[conv2.0];
        let per = act.len() / n;
        let pixels = per / 8;
        let mut naive = 0.0f64;
        for item in 0..n {
            for p in 0..pixels {
                let i = item * per + 3 * pixels + p;
                naive += act.data()[i] as f64 * grad.data()[i] as f64;
            }
        }
        let naive = naive.abs() / n as f64;
        assert!((s.raw - naive).abs() <= 1e-6 * naive.max(1.0));
        // input-slot side covers both grouped feeder channels
        let slot = saliency_taylor_fmaps(&g, &out, ChannelRef::input_slot(conv2, 1)).unwrap();
        let pred = g.preds(conv2)[0];
        let act = &out.activations[pred.0];
        let gx = out.grads_x[conv2.0].as_ref().unwrap();
        let per = act.len() / n;
        let pixels = 4 * 4;
        let mut naive_slot = 0.0f64;
        for item in 0..n {
            for &c in &[1usize, 5] {
                for p in 0..pixels {
                    let i = item * per + c * pixels + p;
                    naive_slot += act.data()[i] as f64 * gx.data()[i] as f64;
                }
            }
        }
        let naive_slot = naive_slot.abs() / n as f64;
        assert!((slot.raw - naive_slot).abs() <= 1e-6 * naive_slot.max(1.0));
        assert_eq!(slot.count, 2 * pixels);
    }

    #[test]
    fn l1_scale_covariance() {
        let mut g = small_conv_net();
        let conv = g.layer_by_name("conv").unwrap().id;
        let before0 = saliency_l1(&g, ChannelRef::output(conv, 0)).unwrap().raw;
        let before1 = saliency_l1(&g, ChannelRef::output(conv, 1)).unwrap().raw;
        for v in &mut g.store_mut().get_mut("conv.w").unwrap().data_mut()[0..4] {
            *v *= 3.0;
        }
        let after0 = saliency_l1(&g, ChannelRef::output(conv, 0)).unwrap().raw;
        let after1 = saliency_l1(&g, ChannelRef::output(conv, 1)).unwrap().raw;
        assert!((after0 - 3.0 * before0).abs() <= 1e-6 * before0.max(1e-12));
        assert_eq!(after1, before1);
    }

    #[test]
    fn compute_raw_skips_pruned_and_is_nonnegative() {
        let g = absorb_activations(&crate::fixtures::resblock_toy(5)).unwrap();
        let dep = DependencyGraph::build(&g).unwrap();
        let mut mask = PrunedMask::new();
        let conv_a = g.layer_by_name("convA").unwrap().id;
        let set = dep.prune_set(ChannelRef::output(conv_a, 0)).unwrap();
        mask.mark(&set);
        let raws = compute_raw(&g, &dep, BaseMetric::L1Weights, None, &mask).unwrap();
        assert!(!raws.outputs.contains_key(&ChannelRef::output(conv_a, 0)));
        assert!(raws.outputs.contains_key(&ChannelRef::output(conv_a, 1)));
        assert!(raws.outputs.values().all(|s| s.raw >= 0.0));
        assert!(raws.slots.values().all(|s| s.raw >= 0.0));
    }
}
