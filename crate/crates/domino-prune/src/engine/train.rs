//! Minibatch SGD with momentum, used to produce trained desk-scale fixture
//! networks. Training hyperparameters live with the fixtures, not in the
//! library contract; batch-norm runs in inference mode throughout (the
//! affine scale/shift train, running statistics stay fixed).

use std::collections::BTreeMap;

use crate::graph::{LayerOp, NetworkGraph, PostOpKind};
use crate::model_io::DatasetHandle;
use crate::rng::Rng;

use super::{backward, EngineError};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
        }
    }
}

/// Names of all trainable tensors: conv/FC weights and biases plus BN
/// affine parameters (standalone layers and absorbed post-ops alike).
pub fn trainable_tensors(graph: &NetworkGraph) -> Vec<String> {
    let mut names = Vec::new();
    for l in graph.layers() {
        match &l.op {
            LayerOp::Conv2D { weight, bias, .. }
            | LayerOp::FullyConnected { weight, bias, .. } => {
                names.push(weight.clone());
                if let Some(b) = bias {
                    names.push(b.clone());
                }
            }
            LayerOp::BatchNorm { gamma, beta, .. } => {
                names.push(gamma.clone());
                names.push(beta.clone());
            }
            LayerOp::Bias { bias, .. } => names.push(bias.clone()),
            _ => {}
        }
        for post in &l.post_ops {
            match &post.kind {
                PostOpKind::BatchNorm { gamma, beta, .. } => {
                    names.push(gamma.clone());
                    names.push(beta.clone());
                }
                PostOpKind::Bias { bias } => names.push(bias.clone()),
                _ => {}
            }
        }
    }
    names.sort();
    names.dedup();
    names
}

/// Train in place; returns the mean training loss of the final epoch.
pub fn train_sgd(
    graph: &mut NetworkGraph,
    data: &DatasetHandle,
    cfg: &TrainConfig,
) -> Result<f64, EngineError> {
    if data.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    let trainable = trainable_tensors(graph);
    let mut velocity: BTreeMap<String, Vec<f32>> = trainable
        .iter()
        .map(|n| (n.clone(), vec![0.0; graph.store().get(n).unwrap().len()]))
        .collect();
    let mut rng = Rng::new(cfg.seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut last_epoch_loss = 0.0;
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut indices);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch, labels) = data.gather(chunk);
            let result = backward(graph, &batch, &labels)?;
            epoch_loss += result.loss;
            batches += 1;
            for name in &trainable {
                let Some(grad) = result.grads_w.get(name) else {
                    continue;
                };
                let vel = velocity.get_mut(name).unwrap();
                let tensor = graph.store_mut().get_mut(name).unwrap();
                for ((w, v), &g) in tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad.data())
                {
                    *v = cfg.momentum * *v - cfg.learning_rate * g;
                    *w += *v;
                }
            }
        }
        last_epoch_loss = epoch_loss / batches.max(1) as f64;
    }
    Ok(last_epoch_loss)
}
