//! Combined channel scores over coparent/sibling closures.
//!
//! Three variants. `Channel` scores each output channel by its own base
//! saliency (the classic baseline; the selected channel's whole prune set
//! is still removed, so the set effectively inherits the lowest member
//! score). `DominoO` sums the base saliency of the full coparent closure.
//! `DominoIO` adds the input-side saliency of the sibling slots on top.
//! With `-avg`, the summed raw saliency is divided by the summed element
//! count of everything in the sum.

use thiserror::Error;

use crate::dependency::{DependencyGraph, PrunedMask};
use crate::graph::ChannelRef;
use crate::saliency::{apply_averaging, MetricConfig, RawSaliencies, SaliencyError, SaliencyVector};

#[derive(Debug, Error, PartialEq)]
pub enum DominoError {
    #[error("channel {0:?} is pruned")]
    PrunedChannel(ChannelRef),
    #[error("closure member {0:?} has no raw saliency")]
    IncompleteClosure(ChannelRef),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error("bad seed: {0}")]
    BadSeed(String),
}

/// Scoring variant, stable CLI strings `channel`, `domino-o`, `domino-io`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Channel,
    DominoO,
    DominoIO,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Channel => "channel",
            Variant::DominoO => "domino-o",
            Variant::DominoIO => "domino-io",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "channel" => Some(Variant::Channel),
            "domino-o" => Some(Variant::DominoO),
            "domino-io" => Some(Variant::DominoIO),
            _ => None,
        }
    }
}

/// A variant plus its base metric configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DominoConfig {
    pub variant: Variant,
    pub metric: MetricConfig,
}

impl DominoConfig {
    pub fn new(variant: Variant, metric: MetricConfig) -> DominoConfig {
        DominoConfig { variant, metric }
    }

    /// `domino-io/l1-avg` style condition name.
    pub fn condition(&self) -> String {
        format!("{}/{}", self.variant.as_str(), self.metric.name())
    }
}

fn summed(
    raws: &RawSaliencies,
    outputs: &[ChannelRef],
    slots: &[ChannelRef],
) -> Result<(f64, usize), DominoError> {
    let mut raw = 0.0f64;
    let mut count = 0usize;
    for r in outputs {
        let s = raws
            .outputs
            .get(r)
            .ok_or(DominoError::IncompleteClosure(*r))?;
        raw += s.raw;
        count += s.count;
    }
    for r in slots {
        let s = raws.slots.get(r).ok_or(DominoError::IncompleteClosure(*r))?;
        raw += s.raw;
        count += s.count;
    }
    Ok((raw, count))
}

/// Score one output channel under `cfg`.
pub fn score_channel(
    dep: &DependencyGraph,
    raws: &RawSaliencies,
    c: ChannelRef,
    cfg: &DominoConfig,
    mask: &PrunedMask,
) -> Result<f64, DominoError> {
    if mask.output_pruned(c.layer, c.index) {
        return Err(DominoError::PrunedChannel(c));
    }
    let (raw, count) = match cfg.variant {
        Variant::Channel => summed(raws, &[c], &[])?,
        Variant::DominoO => {
            let coparents = dep
                .coparents_closure(c)
                .map_err(|e| DominoError::BadSeed(e.to_string()))?;
            summed(raws, &coparents, &[])?
        }
        Variant::DominoIO => {
            let coparents = dep
                .coparents_closure(c)
                .map_err(|e| DominoError::BadSeed(e.to_string()))?;
            let siblings = dep
                .siblings_closure(c)
                .map_err(|e| DominoError::BadSeed(e.to_string()))?;
            summed(raws, &coparents, &siblings)?
        }
    };
    Ok(apply_averaging(raw, count, cfg.metric.averaged)?)
}

/// Score every output channel present in `raws` (pruned channels are
/// absent there by construction). Scores are computed once per coparent
/// class, so members of a class receive exactly equal values.
pub fn score_all(
    dep: &DependencyGraph,
    raws: &RawSaliencies,
    cfg: &DominoConfig,
) -> Result<SaliencyVector, DominoError> {
    let mut vector = SaliencyVector::default();
    match cfg.variant {
        Variant::Channel => {
            for (&c, s) in &raws.outputs {
                let score = apply_averaging(s.raw, s.count, cfg.metric.averaged)?;
                vector.scores.insert(c, score);
                vector.counts.insert(c, s.count);
            }
        }
        Variant::DominoO | Variant::DominoIO => {
            let mut done: std::collections::BTreeSet<ChannelRef> = Default::default();
            for &c in raws.outputs.keys() {
                if done.contains(&c) {
                    continue;
                }
                let coparents = dep
                    .coparents_closure(c)
                    .map_err(|e| DominoError::BadSeed(e.to_string()))?;
                let siblings = if cfg.variant == Variant::DominoIO {
                    dep.siblings_closure(c)
                        .map_err(|e| DominoError::BadSeed(e.to_string()))?
                } else {
                    Vec::new()
                };
                let (raw, count) = summed(raws, &coparents, &siblings)?;
                let score = apply_averaging(raw, count, cfg.metric.averaged)?;
                for member in coparents {
                    vector.scores.insert(member, score);
                    vector.counts.insert(member, count);
                    done.insert(member);
                }
            }
        }
    }
    Ok(vector)
}


#[cfg(test)]
mod score_tests {
    use super::*;
    use crate::dependency::DependencyGraph;
    use crate::engine::backward;
    use crate::fixtures;
    use crate::graph::{absorb_activations, ChannelRef, GroupMapping, NetworkGraph};
    use crate::rng::Rng;
    use crate::saliency::{compute_raw, BaseMetric, RawScore};
    use crate::tensor::Tensor;

    fn absorbed(g: NetworkGraph) -> NetworkGraph {
        absorb_activations(&g).unwrap()
    }

    /// Score recomputation by explicit closure enumeration, separate from
    /// `score_all`'s per-class path.
    fn enumerate_score(
        dep: &DependencyGraph,
        raws: &RawSaliencies,
        c: ChannelRef,
        cfg: &DominoConfig,
    ) -> f64 {
        let mut raw = 0.0f64;
        let mut count = 0usize;
        let mut add = |s: &RawScore| {
            raw += s.raw;
            count += s.count;
        };
        match cfg.variant {
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
        if cfg.metric.averaged {
            raw / count as f64
        } else {
            raw
        }
    }

    #[test]
    fn hand_worked_sums() {
        // coparents {A0, B0} with S = {1, 2}: domino-o = 3;
        // plus sibling slot S = 0.5: domino-io = 3.5
        let g = absorbed(fixtures::resblock_toy(3));
        let dep = DependencyGraph::build(&g).unwrap();
        let a0 = ChannelRef::output(g.layer_by_name("convA").unwrap().id, 0);
        let b0 = ChannelRef::output(g.layer_by_name("convB").unwrap().id, 0);
        let mut raws = RawSaliencies::default();
        for c in dep.weight_bearing_channels() {
            raws.outputs.insert(c, RawScore { raw: 0.0, count: 1 });
        }
        for s in dep.all_slots() {
            raws.slots.insert(s, RawScore { raw: 0.0, count: 1 });
        }
        raws.outputs.insert(a0, RawScore { raw: 1.0, count: 4 });
        raws.outputs.insert(b0, RawScore { raw: 2.0, count: 4 });
        for s in dep.siblings_closure(a0).unwrap() {
            raws.slots.insert(s, RawScore { raw: 0.25, count: 2 });
        }
        let mask = PrunedMask::new();
        let o = DominoConfig::new(Variant::DominoO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false));
        assert_eq!(score_channel(&dep, &raws, a0, &o, &mask).unwrap(), 3.0);
        // two sibling slots at 0.25 each
        let io = DominoConfig::new(Variant::DominoIO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false));
        assert_eq!(score_channel(&dep, &raws, a0, &io, &mask).unwrap(), 3.5);
        // averaged: (1 + 2 + 0.25 + 0.25) / (4 + 4 + 2 + 2)
        let io_avg = DominoConfig::new(Variant::DominoIO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, true));
        assert!((score_channel(&dep, &raws, a0, &io_avg, &mask).unwrap() - 3.5 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn linear_network_domino_equals_channel() {
        let g = absorbed(fixtures::linear_toy(7));
        let dep = DependencyGraph::build(&g).unwrap();
        let raws = compute_raw(&g, &dep, BaseMetric::L1Weights, None, &PrunedMask::new()).unwrap();
        let ch = DominoConfig::new(Variant::Channel, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false));
        let o = DominoConfig::new(Variant::DominoO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false));
        let sc = score_all(&dep, &raws, &ch).unwrap();
        let so = score_all(&dep, &raws, &o).unwrap();
        assert_eq!(sc.scores, so.scores);
    }

    #[test]
    fn equal_scores_within_class_and_oracle_match() {
        let mut rng = Rng::new(10);
        for (fixture, seed) in [
            (absorbed(fixtures::resblock_toy(11)), 0),
            (absorbed(fixtures::spine_toy(12)), 1),
            (absorbed(fixtures::grouped_toy(13, GroupMapping::Interleaved)), 2),
            (absorbed(fixtures::flatten_toy(14)), 3),
        ] {
            let g = fixture;
            let dep = DependencyGraph::build(&g).unwrap();
            let n = 4usize;
            let crate::graph::Shape::Map { c, h, w } = g.out_shape(g.input_layer()) else {
                unreachable!()
            };
            let classes = g.out_shape(g.loss_layer()).elements();
            let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.range_f64(0.0, 1.0) as f32).collect();
            let batch = Tensor::new(vec![n, c, h, w], data).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
            let grads = backward(&g, &batch, &labels).unwrap();
            for base in [BaseMetric::L1Weights, BaseMetric::TaylorWeights, BaseMetric::TaylorFmaps] {
                let raws =
                    compute_raw(&g, &dep, base, Some(&grads), &PrunedMask::new()).unwrap();
                for variant in [Variant::Channel, Variant::DominoO, Variant::DominoIO] {
                    for averaged in [false, true] {
                        let cfg = DominoConfig::new(
                            variant,
                            crate::saliency::MetricConfig::new(base, averaged),
                        );
                        let scores = score_all(&dep, &raws, &cfg).unwrap();
                        for (&ch, &score) in &scores.scores {
                            let reference = enumerate_score(&dep, &raws, ch, &cfg);
                            let tol = 1e-6 * reference.abs().max(1e-12);
                            assert!(
                                (score - reference).abs() <= tol,
                                "net {} seed {seed} {variant:?} avg={averaged} {ch:?}: {score} vs {reference}",
                                g.name
                            );
                            // members of one class score exactly equal
                            if variant != Variant::Channel {
                                for member in dep.coparents_closure(ch).unwrap() {
                                    assert_eq!(
                                        scores.scores[&member].to_bits(),
                                        score.to_bits(),
                                        "class member scores must be bit-equal"
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn io_dominates_o_without_averaging() {
        let g = absorbed(fixtures::spine_toy(21));
        let dep = DependencyGraph::build(&g).unwrap();
        let raws = compute_raw(&g, &dep, BaseMetric::L1Weights, None, &PrunedMask::new()).unwrap();
        let o = score_all(&dep, &raws, &DominoConfig::new(Variant::DominoO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false))).unwrap();
        let io = score_all(&dep, &raws, &DominoConfig::new(Variant::DominoIO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false))).unwrap();
        for (c, &so) in &o.scores {
            let sio = io.scores[c];
            assert!(sio >= so && so >= 0.0, "{c:?}: io {sio} < o {so}");
        }
    }

    #[test]
    fn incomplete_closure_detected() {
        let g = absorbed(fixtures::resblock_toy(31));
        let dep = DependencyGraph::build(&g).unwrap();
        let mut raws = compute_raw(&g, &dep, BaseMetric::L1Weights, None, &PrunedMask::new()).unwrap();
        let convb = g.layer_by_name("convB").unwrap().id;
        raws.outputs.remove(&ChannelRef::output(convb, 2));
        let cfg = DominoConfig::new(Variant::DominoO, crate::saliency::MetricConfig::new(BaseMetric::L1Weights, false));
        let err = score_all(&dep, &raws, &cfg).unwrap_err();
        assert!(matches!(err, DominoError::IncompleteClosure(_)));
    }
}
