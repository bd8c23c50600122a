//! Iterative no-retraining pruning campaigns.
//!
//! Each step scores every unpruned output channel, prunes the full prune
//! set of the lowest-scored one (zeroing weight slices and registered
//! biases in place), re-evaluates test accuracy, and appends a trace
//! record. The campaign stops when accuracy falls more than `stop_drop`
//! percentage points below its initial value, or when no prunable channel
//! remains. No retraining happens anywhere; saliencies are recomputed each
//! iteration from the current (partially zeroed) parameters.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::dependency::{DependencyError, DependencyGraph, PruneSet, PrunedMask};
use crate::domino::{score_all, DominoConfig, DominoError};
use crate::engine::{backward, evaluate_accuracy, BatchResult, EngineError};
use crate::graph::{absorb_activations, ChannelRef, GraphError, LayerId, LayerOp, NetworkGraph};
use crate::model_io::DatasetHandle;
use crate::rng::{Rng, RNG_NAME};
use crate::saliency::{compute_raw, SaliencyError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("prune set overlaps already-pruned channels")]
    OverlapWithPruned,
    #[error("nothing left to prune")]
    NothingLeftToPrune,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dependency(#[from] DependencyError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Domino(#[from] DominoError),
}

/// One campaign iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneRecord {
    pub iteration: usize,
    pub seed_layer: String,
    pub seed_channel: usize,
    /// Output channels pruned this step (the coparent class size).
    pub set_size: usize,
    /// Fraction of all convolution weights that are zero, recomputed from
    /// scratch after this step.
    pub weights_removed_cum: f64,
    pub accuracy: f64,
}

/// Campaign provenance written into every trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub model: String,
    pub rng: String,
    pub run_seed: u64,
    pub variant: String,
    pub metric: String,
    pub stop_drop: f64,
    pub initial_accuracy: f64,
    pub blob_checksum: String,
    pub excluded: Vec<String>,
}

/// Ordered campaign records plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneTrace {
    pub meta: TraceMeta,
    pub records: Vec<PruneRecord>,
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub domino: DominoConfig,
    /// Stop threshold in absolute percentage points of test accuracy.
    pub stop_drop: f64,
    /// Evaluate accuracy every N iterations (stop checks only happen on
    /// evaluated iterations; records in between carry the last value).
    pub eval_every: usize,
    pub seed: u64,
    pub include_classifier: bool,
}

impl CampaignConfig {
    pub fn new(domino: DominoConfig, seed: u64) -> CampaignConfig {
        CampaignConfig {
            domino,
            stop_drop: 5.0,
            eval_every: 1,
            seed,
            include_classifier: false,
        }
    }
}

/// Mutable campaign state over an absorbed graph.
#[derive(Debug)]
pub struct PruneState {
    pub graph: NetworkGraph,
    pub dep: DependencyGraph,
    pub mask: PrunedMask,
    pub excluded: BTreeSet<LayerId>,
    pub initial_accuracy: f64,
    pub records: Vec<PruneRecord>,
}

/// Layers whose output channels may not be chosen as prune seeds: the
/// classifier producing the logits (pruning a class logit is meaningless).
pub fn never_prune_guard(graph: &NetworkGraph) -> BTreeSet<LayerId> {
    let mut guard = BTreeSet::new();
    let mut cursor = graph.preds(graph.loss_layer())[0];
    while matches!(graph.layer(cursor).op, LayerOp::Flatten) {
        cursor = graph.preds(cursor)[0];
    }
    if graph.layer(cursor).op.is_weight_bearing() {
        guard.insert(cursor);
    }
    guard
}

fn conv_weight_names(graph: &NetworkGraph) -> BTreeSet<String> {
    graph
        .layers()
        .iter()
        .filter_map(|l| match &l.op {
            LayerOp::Conv2D { weight, .. } => Some(weight.clone()),
            _ => None,
        })
        .collect()
}

/// Fraction of convolution weights that are exactly zero.
pub fn weights_removed(graph: &NetworkGraph) -> f64 {
    let mut zeros = 0usize;
    let mut total = 0usize;
    for name in conv_weight_names(graph) {
        let t = graph.store().get(&name).expect("validated ref");
        total += t.len();
        zeros += t.iter().filter(|&&w| w == 0.0).count();
    }
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

impl PruneState {
    /// Absorb (if needed), analyze, and evaluate the starting accuracy.
    pub fn new(
        graph: NetworkGraph,
        test: &DatasetHandle,
        include_classifier: bool,
    ) -> Result<PruneState, PruneError> {
        let graph = if graph.is_absorbed() {
            graph
        } else {
            absorb_activations(&graph)?
        };
        let dep = DependencyGraph::build(&graph)?;
        let excluded = if include_classifier {
            BTreeSet::new()
        } else {
            never_prune_guard(&graph)
        };
        let initial_accuracy = evaluate_accuracy(&graph, test)?;
        Ok(PruneState {
            graph,
            dep,
            mask: PrunedMask::new(),
            excluded,
            initial_accuracy,
            records: Vec::new(),
        })
    }

    /// Zero every weight slice and registered parameter of `pset`.
    pub fn apply_prune(&mut self, pset: &PruneSet) -> Result<(), PruneError> {
        if self.mask.overlaps(pset) {
            return Err(PruneError::OverlapWithPruned);
        }
        for slice in &pset.weight_slices {
            let (name, ranges) = self.dep.slice_elements(slice);
            let name = name.to_string();
            let tensor = self
                .graph
                .store_mut()
                .get_mut(&name)
                .expect("validated ref");
            for range in ranges {
                tensor.data_mut()[range].fill(0.0);
            }
        }
        for param in &pset.bias_params {
            self.graph.store_mut().zero_element(&param.tensor, param.index);
        }
        self.mask.mark(pset);
        Ok(())
    }

    /// Score, select the argmin channel, prune its set, evaluate, record.
    pub fn prune_step(
        &mut self,
        test: &DatasetHandle,
        cfg: &CampaignConfig,
        saliency_batch: Option<&(Tensor, Vec<usize>)>,
    ) -> Result<PruneRecord, PruneError> {
        let grads: Option<BatchResult> = match saliency_batch {
            Some((batch, labels)) if cfg.domino.metric.base.needs_gradients() => {
                Some(backward(&self.graph, batch, labels)?)
            }
            _ => None,
        };
        let raws = compute_raw(
            &self.graph,
            &self.dep,
            cfg.domino.metric.base,
            grads.as_ref(),
            &self.mask,
        )?;
        let scores = score_all(&self.dep, &raws, &cfg.domino)?;

        // argmin over candidates; ties break on the lowest (layer, channel)
        let mut best: Option<(f64, ChannelRef)> = None;
        for (&c, &score) in &scores.scores {
            if self.excluded.contains(&c.layer) {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bc)) => {
                    score.total_cmp(&bs) == std::cmp::Ordering::Less
                        || (score.total_cmp(&bs) == std::cmp::Ordering::Equal && c < bc)
                }
            };
            if better {
                best = Some((score, c));
            }
        }
        let (_, seed) = best.ok_or(PruneError::NothingLeftToPrune)?;

        let pset = self.dep.prune_set_checked(seed, &self.mask)?;
        self.apply_prune(&pset)?;

        let iteration = self.records.len() + 1;
        let evaluate = cfg.eval_every <= 1 || (iteration - 1).is_multiple_of(cfg.eval_every);
        let accuracy = if evaluate {
            evaluate_accuracy(&self.graph, test)?
        } else {
            self.records
                .last()
                .map_or(self.initial_accuracy, |r| r.accuracy)
        };
        let record = PruneRecord {
            iteration,
            seed_layer: self.graph.layer(seed.layer).name.clone(),
            seed_channel: seed.index,
            set_size: pset.set_size(),
            weights_removed_cum: weights_removed(&self.graph),
            accuracy,
        };
        self.records.push(record.clone());
        Ok(record)
    }
}

/// Run a full campaign over a (clone of a) trained network.
pub fn run_campaign(
    graph: NetworkGraph,
    train: &DatasetHandle,
    test: &DatasetHandle,
    cfg: &CampaignConfig,
) -> Result<PruneTrace, PruneError> {
    let checksum = format!("fnv1a64:{:016x}", graph.store().checksum());
    let mut state = PruneState::new(graph, test, cfg.include_classifier)?;

    // gradient metrics use one fixed saliency batch for the whole campaign
    let saliency_batch = if cfg.domino.metric.base.needs_gradients() {
        let want = cfg.domino.metric.saliency_batch.min(train.len());
        let mut indices: Vec<usize> = (0..train.len()).collect();
        Rng::new(cfg.seed).shuffle(&mut indices);
        indices.truncate(want);
        indices.sort_unstable();
        Some(train.gather(&indices))
    } else {
        None
    };

    let stop_floor = state.initial_accuracy - cfg.stop_drop / 100.0;
    loop {
        let iteration = state.records.len() + 1;
        match state.prune_step(test, cfg, saliency_batch.as_ref()) {
            Ok(record) => {
                let evaluated = cfg.eval_every <= 1 || (iteration - 1) % cfg.eval_every == 0;
                if evaluated && record.accuracy < stop_floor {
                    break;
                }
            }
            Err(PruneError::NothingLeftToPrune) => break,
            Err(e) => return Err(e),
        }
    }

    let meta = TraceMeta {
        model: state.graph.name.clone(),
        rng: RNG_NAME.to_string(),
        run_seed: cfg.seed,
        variant: cfg.domino.variant.as_str().to_string(),
        metric: cfg.domino.metric.name(),
        stop_drop: cfg.stop_drop,
        initial_accuracy: state.initial_accuracy,
        blob_checksum: checksum,
        excluded: state
            .excluded
            .iter()
            .map(|id| state.graph.layer(*id).name.clone())
            .collect(),
    };
    Ok(PruneTrace {
        meta,
        records: state.records,
    })
}



#[cfg(test)]
mod argmin_tests {
    use super::*;
    use crate::domino::{DominoConfig, Variant};
    use crate::fixtures;
    use crate::model_io::synth::{synth_dataset, SynthSpec};
    use crate::saliency::{BaseMetric, MetricConfig};

    #[test]
    fn lowest_score_wins() {
        let mut graph = fixtures::linear_toy(4);
        // make conv2 channel 3 clearly the smallest L1 slice
        for name in ["conv1.w", "conv2.w", "fc.w"] {
            graph.store_mut().get_mut(name).unwrap().data_mut().fill(0.5);
        }
        let w2 = graph.store_mut().get_mut("conv2.w").unwrap();
        let row = 4 * 9;
        w2.data_mut()[3 * row..4 * row].fill(0.001);
        let spec = SynthSpec {
            classes: 4,
            height: 6,
            width: 6,
            train: 16,
            test: 16,
            ..SynthSpec::default()
        };
        let (_, test) = synth_dataset(2, &spec).unwrap();
        let mut state = PruneState::new(graph, &test, false).unwrap();
        let cfg = CampaignConfig::new(
            DominoConfig::new(Variant::Channel, MetricConfig::new(BaseMetric::L1Weights, false)),
            1,
        );
        let rec = state.prune_step(&test, &cfg, None).unwrap();
        assert_eq!(rec.seed_layer, "conv2");
        assert_eq!(rec.seed_channel, 3);
    }
}
