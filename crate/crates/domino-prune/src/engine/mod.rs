//! CPU execution engine: forward pass, exact reverse-mode gradients, and
//! accuracy evaluation over the supported layer kinds.
//!
//! Runs both raw graphs (activation layers as nodes) and absorbed graphs
//! (activations replayed as post-ops); both produce identical values since
//! the same kernels run in the same order. Batch items are processed in
//! parallel over disjoint output regions, so results are independent of the
//! worker count.

mod kernels;
pub mod train;

pub use kernels::BN_EPS;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{LayerId, LayerOp, NetworkGraph, PostOpKind, Shape};
use crate::model_io::DatasetHandle;
use crate::tensor::Tensor;

use kernels::{ConvShape, PoolShape};

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Outputs of a forward (and optionally backward) pass over one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Top-1 correct predictions.
    pub correct: usize,
    /// Final (post-op) output of every layer, indexed by layer id.
    pub activations: Vec<Tensor>,
    /// Loss gradient for every parameter tensor touched by backward.
    pub grads_w: BTreeMap<String, Tensor>,
    /// Loss gradient of each layer's final output. Empty in forward mode.
    pub grads_a: Vec<Tensor>,
    /// Loss gradient of each conv/FC layer's input, through that layer
    /// only (a split's producer sees the sum in `grads_a`, each consumer's
    /// own share here).
    pub grads_x: Vec<Option<Tensor>>,
}

fn conv_shape(op: &LayerOp, input: Shape, output: Shape) -> ConvShape {
    let LayerOp::Conv2D {
        kernel,
        stride,
        pad,
        groups,
        mapping,
        ..
    } = op
    else {
        unreachable!()
    };
    let Shape::Map { c: ic, h: ih, w: iw } = input else {
        unreachable!("validated conv input")
    };
    let Shape::Map { c: oc, h: oh, w: ow } = output else {
        unreachable!("validated conv output")
    };
    ConvShape {
        in_c: ic,
        in_h: ih,
        in_w: iw,
        out_c: oc,
        out_h: oh,
        out_w: ow,
        kernel: *kernel,
        stride: *stride,
        pad: *pad,
        groups: *groups,
        mapping: *mapping,
    }
}

fn pool_shape(kernel: usize, stride: usize, pad: usize, input: Shape, output: Shape) -> PoolShape {
    let Shape::Map { c, h: ih, w: iw } = input else {
        unreachable!("validated pool input")
    };
    let Shape::Map { h: oh, w: ow, .. } = output else {
        unreachable!("validated pool output")
    };
    PoolShape {
        c,
        in_h: ih,
        in_w: iw,
        out_h: oh,
        out_w: ow,
        kernel,
        stride,
        pad,
    }
}

/// Shape arithmetic local to execution: shapes of a layer's op output and
/// of every post-op output, ending at the graph-level `out_shape`.
fn stage_shapes(graph: &NetworkGraph, id: LayerId) -> Vec<Shape> {
    let node = graph.layer(id);
    let input = || graph.out_shape(graph.preds(id)[0]);
    let op_shape = match &node.op {
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
            out_channels,
            kernel,
            stride,
            pad,
            ..
        } => {
            let Shape::Map { h, w, .. } = input() else {
                unreachable!()
            };
            Shape::Map {
                c: *out_channels,
                h: (h + 2 * pad - kernel) / stride + 1,
                w: (w + 2 * pad - kernel) / stride + 1,
            }
        }
        LayerOp::FullyConnected { out_features, .. } => Shape::Feat {
            features: *out_features,
            slots: *out_features,
            group: 1,
        },
        LayerOp::EltwiseAdd | LayerOp::ReLU | LayerOp::SoftmaxLoss => input(),
        LayerOp::BatchNorm { .. } | LayerOp::Bias { .. } => input(),
        LayerOp::MaxPool {
            kernel,
            stride,
            pad,
        }
        | LayerOp::AvgPool {
            kernel,
            stride,
            pad,
        } => {
            let Shape::Map { c, h, w } = input() else {
                unreachable!()
            };
            Shape::Map {
                c,
                h: (h + 2 * pad - kernel) / stride + 1,
                w: (w + 2 * pad - kernel) / stride + 1,
            }
        }
        LayerOp::GlobalAvgPool => {
            let Shape::Map { c, .. } = input() else {
                unreachable!()
            };
            Shape::Map { c, h: 1, w: 1 }
        }
        LayerOp::Flatten => match input() {
            Shape::Map { c, h, w } => Shape::Feat {
                features: c * h * w,
                slots: c,
                group: h * w,
            },
            f => f,
        },
    };
    let mut shapes = vec![op_shape];
    for post in &node.post_ops {
        let prev = *shapes.last().unwrap();
        let next = match (&post.kind, prev) {
            (PostOpKind::MaxPool { kernel, stride, pad }, Shape::Map { c, h, w })
            | (PostOpKind::AvgPool { kernel, stride, pad }, Shape::Map { c, h, w }) => Shape::Map {
                c,
                h: (h + 2 * pad - kernel) / stride + 1,
                w: (w + 2 * pad - kernel) / stride + 1,
            },
            (PostOpKind::GlobalAvgPool, Shape::Map { c, .. }) => Shape::Map { c, h: 1, w: 1 },
            (_, s) => s,
        };
        shapes.push(next);
    }
    shapes
}

fn tensor_for(shape: Shape, n: usize) -> Tensor {
    match shape {
        Shape::Map { c, h, w } => Tensor::zeros(vec![n, c, h, w]),
        Shape::Feat { features, .. } => Tensor::zeros(vec![n, features]),
    }
}

struct Execution {
    /// Per layer: op output followed by each post-op output.
    stages: Vec<Vec<Tensor>>,
    loss: f64,
    correct: usize,
}

fn param<'a>(graph: &'a NetworkGraph, name: &str) -> &'a [f32] {
    graph
        .store()
        .get(name)
        .expect("validated tensor ref")
        .data()
}

fn run_post_op(
    graph: &NetworkGraph,
    kind: &PostOpKind,
    input: &Tensor,
    in_shape: Shape,
    out_shape: Shape,
    n: usize,
) -> Tensor {
    let mut out = tensor_for(out_shape, n);
    let (c, plane) = match in_shape {
        Shape::Map { c, h, w } => (c, h * w),
        Shape::Feat { features, .. } => (features, 1),
    };
    match kind {
        PostOpKind::ReLU => kernels::relu_forward(input.data(), out.data_mut()),
        PostOpKind::BatchNorm {
            gamma,
            beta,
            mean,
            var,
        } => kernels::batchnorm_forward(
            input.data(),
            param(graph, gamma),
            param(graph, beta),
            param(graph, mean),
            param(graph, var),
            out.data_mut(),
            c,
            plane,
        ),
        PostOpKind::Bias { bias } => {
            kernels::bias_forward(input.data(), param(graph, bias), out.data_mut(), c, plane)
        }
        PostOpKind::MaxPool { kernel, stride, pad } => {
            let s = pool_shape(*kernel, *stride, *pad, in_shape, out_shape);
            kernels::maxpool_forward(input.data(), out.data_mut(), n, &s);
        }
        PostOpKind::AvgPool { kernel, stride, pad } => {
            let s = pool_shape(*kernel, *stride, *pad, in_shape, out_shape);
            kernels::avgpool_forward(input.data(), out.data_mut(), n, &s);
        }
        PostOpKind::GlobalAvgPool => {
            let (h, w) = in_shape.spatial();
            kernels::global_avgpool_forward(input.data(), out.data_mut(), n, c, h * w);
        }
    }
    out
}

fn run_forward(
    graph: &NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
) -> Result<Execution, EngineError> {
    let n = labels.len();
    let bshape = batch.shape();
    if bshape.len() != 4 || bshape[0] != n {
        return Err(EngineError::ShapeMismatch(format!(
            "batch shape {:?} does not carry {n} labeled samples",
            bshape
        )));
    }
    let input_id = graph.input_layer();
    let LayerOp::Input {
        channels,
        height,
        width,
    } = graph.layer(input_id).op
    else {
        unreachable!()
    };
    if bshape[1..] != [channels, height, width] {
        return Err(EngineError::ShapeMismatch(format!(
            "batch shape {:?} does not match input {}x{}x{}",
            bshape, channels, height, width
        )));
    }

    let classes = graph.out_shape(graph.loss_layer()).elements();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(EngineError::ShapeMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }

    let mut stages: Vec<Vec<Tensor>> = vec![Vec::new(); graph.layers().len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for &id in graph.topo() {
        let node = graph.layer(id);
        let shapes = stage_shapes(graph, id);
        let final_of = |l: LayerId, st: &[Vec<Tensor>]| -> Tensor {
            st[l.0].last().expect("topological order").clone()
        };
        let op_out = match &node.op {
            LayerOp::Input { .. } => batch.clone(),
            LayerOp::Conv2D { weight, bias, .. } => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let s = conv_shape(&node.op, graph.in_shape(id), shapes[0]);
                let mut out = tensor_for(shapes[0], n);
                kernels::conv2d_forward(
                    x.data(),
                    param(graph, weight),
                    bias.as_deref().map(|b| param(graph, b)),
                    out.data_mut(),
                    n,
                    &s,
                );
                out
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let mut out = tensor_for(shapes[0], n);
                kernels::fc_forward(
                    x.data(),
                    param(graph, weight),
                    bias.as_deref().map(|b| param(graph, b)),
                    out.data_mut(),
                    n,
                    *in_features,
                    *out_features,
                );
                out
            }
            LayerOp::EltwiseAdd => {
                let mut out = final_of(graph.preds(id)[0], &stages);
                for &p in &graph.preds(id)[1..] {
                    let rhs = &stages[p.0].last().unwrap();
                    for (o, &v) in out.data_mut().iter_mut().zip(rhs.data()) {
                        *o += v;
                    }
                }
                out
            }
            LayerOp::ReLU => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let mut out = tensor_for(shapes[0], n);
                kernels::relu_forward(x.data(), out.data_mut());
                out
            }
            LayerOp::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let in_shape = graph.in_shape(id);
                let (c, plane) = match in_shape {
                    Shape::Map { c, h, w } => (c, h * w),
                    Shape::Feat { features, .. } => (features, 1),
                };
                let mut out = tensor_for(shapes[0], n);
                kernels::batchnorm_forward(
                    x.data(),
                    param(graph, gamma),
                    param(graph, beta),
                    param(graph, mean),
                    param(graph, var),
                    out.data_mut(),
                    c,
                    plane,
                );
                out
            }
            LayerOp::Bias { bias, .. } => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let in_shape = graph.in_shape(id);
                let (c, plane) = match in_shape {
                    Shape::Map { c, h, w } => (c, h * w),
                    Shape::Feat { features, .. } => (features, 1),
                };
                let mut out = tensor_for(shapes[0], n);
                kernels::bias_forward(x.data(), param(graph, bias), out.data_mut(), c, plane);
                out
            }
            LayerOp::MaxPool { kernel, stride, pad } => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let s = pool_shape(*kernel, *stride, *pad, graph.in_shape(id), shapes[0]);
                let mut out = tensor_for(shapes[0], n);
                kernels::maxpool_forward(x.data(), out.data_mut(), n, &s);
                out
            }
            LayerOp::AvgPool { kernel, stride, pad } => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let s = pool_shape(*kernel, *stride, *pad, graph.in_shape(id), shapes[0]);
                let mut out = tensor_for(shapes[0], n);
                kernels::avgpool_forward(x.data(), out.data_mut(), n, &s);
                out
            }
            LayerOp::GlobalAvgPool => {
                let x = &stages[graph.preds(id)[0].0].last().unwrap();
                let in_shape = graph.in_shape(id);
                let Shape::Map { c, h, w } = in_shape else {
                    unreachable!()
                };
                let mut out = tensor_for(shapes[0], n);
                kernels::global_avgpool_forward(x.data(), out.data_mut(), n, c, h * w);
                out
            }
            LayerOp::Flatten => {
                let x = final_of(graph.preds(id)[0], &stages);
                let features = graph.out_shape(id).elements();
                x.reshaped(vec![n, features]).expect("flatten preserves count")
            }
            LayerOp::SoftmaxLoss => {
                let x = final_of(graph.preds(id)[0], &stages);
                let logits = x
                    .reshaped(vec![n, classes])
                    .map_err(|_| EngineError::ShapeMismatch("loss input".into()))?;
                let (l, c) = kernels::softmax_loss(logits.data(), labels, classes, None);
                loss = l;
                correct = c;
                logits
            }
        };
        let mut layer_stages = vec![op_out];
        for (i, post) in node.post_ops.iter().enumerate() {
            let out = run_post_op(
                graph,
                &post.kind,
                layer_stages.last().unwrap(),
                shapes[i],
                shapes[i + 1],
                n,
            );
            layer_stages.push(out);
        }
        stages[id.0] = layer_stages;
    }
    Ok(Execution {
        stages,
        loss,
        correct,
    })
}

/// Forward pass: activations, loss and correct count.
pub fn forward(
    graph: &NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
) -> Result<BatchResult, EngineError> {
    let exec = run_forward(graph, batch, labels)?;
    Ok(BatchResult {
        loss: exec.loss,
        correct: exec.correct,
        activations: exec
            .stages
            .into_iter()
            .map(|mut st| st.pop().expect("every layer computed"))
            .collect(),
        grads_w: BTreeMap::new(),
        grads_a: Vec::new(),
        grads_x: Vec::new(),
    })
}

fn add_assign(acc: &mut Tensor, rhs: &Tensor) {
    debug_assert_eq!(acc.len(), rhs.len());
    for (a, &b) in acc.data_mut().iter_mut().zip(rhs.data()) {
        *a += b;
    }
}

fn grad_entry<'a>(
    grads_w: &'a mut BTreeMap<String, Tensor>,
    graph: &NetworkGraph,
    name: &str,
) -> &'a mut Tensor {
    grads_w
        .entry(name.to_string())
        .or_insert_with(|| Tensor::zeros(graph.store().get(name).unwrap().shape().to_vec()))
}

/// Forward plus exact reverse-mode gradients of the mean cross-entropy with
/// respect to every weight, bias, BN affine parameter and activation.
pub fn backward(
    graph: &NetworkGraph,
    batch: &Tensor,
    labels: &[usize],
) -> Result<BatchResult, EngineError> {
    let exec = run_forward(graph, batch, labels)?;
    let n = labels.len();
    let classes = graph.out_shape(graph.loss_layer()).elements();

    let mut grads_w: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut grads_a: Vec<Tensor> = graph
        .layers()
        .iter()
        .map(|l| Tensor::zeros(exec.stages[l.id.0].last().unwrap().shape().to_vec()))
        .collect();
    let mut grads_x: Vec<Option<Tensor>> = vec![None; graph.layers().len()];

    // seed: gradient of loss w.r.t. logits
    {
        let loss_id = graph.loss_layer();
        let logits = exec.stages[loss_id.0].last().unwrap();
        let mut g = Tensor::zeros(logits.shape().to_vec());
        kernels::softmax_loss(logits.data(), labels, classes, Some(g.data_mut()));
        grads_a[loss_id.0] = g;
    }

    for &id in graph.topo().iter().rev() {
        let node = graph.layer(id);
        let shapes = stage_shapes(graph, id);
        // gradient of the layer's final output
        let mut g = grads_a[id.0].clone();
        // reverse the post-op chain
        for (i, post) in node.post_ops.iter().enumerate().rev() {
            let input = &exec.stages[id.0][i];
            let in_shape = shapes[i];
            let (c, plane) = match in_shape {
                Shape::Map { c, h, w } => (c, h * w),
                Shape::Feat { features, .. } => (features, 1),
            };
            let mut gi = Tensor::zeros(input.shape().to_vec());
            match &post.kind {
                PostOpKind::ReLU => {
                    kernels::relu_backward(input.data(), g.data(), gi.data_mut())
                }
                PostOpKind::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let mut gg = Tensor::zeros(vec![c]);
                    let mut gb = Tensor::zeros(vec![c]);
                    kernels::batchnorm_backward(
                        input.data(),
                        param(graph, gamma),
                        param(graph, mean),
                        param(graph, var),
                        g.data(),
                        gi.data_mut(),
                        gg.data_mut(),
                        gb.data_mut(),
                        c,
                        plane,
                    );
                    add_assign(grad_entry(&mut grads_w, graph, gamma), &gg);
                    add_assign(grad_entry(&mut grads_w, graph, beta), &gb);
                }
                PostOpKind::Bias { bias } => {
                    let mut gb = Tensor::zeros(vec![c]);
                    kernels::bias_backward(g.data(), gb.data_mut(), c, plane);
                    add_assign(grad_entry(&mut grads_w, graph, bias), &gb);
                    gi = g.clone();
                }
                PostOpKind::MaxPool { kernel, stride, pad } => {
                    let s = pool_shape(*kernel, *stride, *pad, in_shape, shapes[i + 1]);
                    kernels::maxpool_backward(input.data(), g.data(), gi.data_mut(), n, &s);
                }
                PostOpKind::AvgPool { kernel, stride, pad } => {
                    let s = pool_shape(*kernel, *stride, *pad, in_shape, shapes[i + 1]);
                    kernels::avgpool_backward(g.data(), gi.data_mut(), n, &s);
                }
                PostOpKind::GlobalAvgPool => {
                    let (h, w) = in_shape.spatial();
                    kernels::global_avgpool_backward(g.data(), gi.data_mut(), n, c, h * w);
                }
            }
            g = gi;
        }

        // reverse the op itself, pushing gradient to predecessors
        match &node.op {
            LayerOp::Input { .. } => {}
            LayerOp::Conv2D { weight, bias, .. } => {
                let pred = graph.preds(id)[0];
                let x = exec.stages[pred.0].last().unwrap();
                let s = conv_shape(&node.op, graph.in_shape(id), shapes[0]);
                let mut gw = Tensor::zeros(graph.store().get(weight).unwrap().shape().to_vec());
                let mut gb = bias
                    .as_ref()
                    .map(|b| Tensor::zeros(graph.store().get(b).unwrap().shape().to_vec()));
                kernels::conv2d_backward_weights(
                    x.data(),
                    g.data(),
                    gw.data_mut(),
                    gb.as_mut().map(|t| t.data_mut()),
                    n,
                    &s,
                );
                add_assign(grad_entry(&mut grads_w, graph, weight), &gw);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    add_assign(grad_entry(&mut grads_w, graph, b), &gb);
                }
                let mut gx = Tensor::zeros(x.shape().to_vec());
                kernels::conv2d_backward_input(param(graph, weight), g.data(), gx.data_mut(), n, &s);
                add_assign(&mut grads_a[pred.0], &gx);
                grads_x[id.0] = Some(gx);
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                let pred = graph.preds(id)[0];
                let x = exec.stages[pred.0].last().unwrap();
                let mut gw = Tensor::zeros(vec![*out_features, *in_features]);
                let mut gb = bias.as_ref().map(|_| Tensor::zeros(vec![*out_features]));
                kernels::fc_backward_weights(
                    x.data(),
                    g.data(),
                    gw.data_mut(),
                    gb.as_mut().map(|t| t.data_mut()),
                    n,
                    *in_features,
                    *out_features,
                );
                add_assign(grad_entry(&mut grads_w, graph, weight), &gw);
                if let (Some(b), Some(gb)) = (bias, gb) {
                    add_assign(grad_entry(&mut grads_w, graph, b), &gb);
                }
                let mut gx = Tensor::zeros(vec![n, *in_features]);
                kernels::fc_backward_input(
                    param(graph, weight),
                    g.data(),
                    gx.data_mut(),
                    n,
                    *in_features,
                    *out_features,
                );
                // reshape to predecessor's stored layout before accumulating
                let pred_shape = exec.stages[pred.0].last().unwrap().shape().to_vec();
                let gx = gx.reshaped(pred_shape).expect("same element count");
                add_assign(&mut grads_a[pred.0], &gx);
                grads_x[id.0] = Some(gx);
            }
            LayerOp::EltwiseAdd => {
                for &p in graph.preds(id) {
                    add_assign(&mut grads_a[p.0], &g);
                }
            }
            LayerOp::ReLU => {
                let pred = graph.preds(id)[0];
                let x = exec.stages[pred.0].last().unwrap();
                let mut gi = Tensor::zeros(x.shape().to_vec());
                kernels::relu_backward(x.data(), g.data(), gi.data_mut());
                add_assign(&mut grads_a[pred.0], &gi);
            }
            LayerOp::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let pred = graph.preds(id)[0];
                let x = exec.stages[pred.0].last().unwrap();
                let (c, plane) = match graph.in_shape(id) {
                    Shape::Map { c, h, w } => (c, h * w),
                    Shape::Feat { features, .. } => (features, 1),
                };
                let mut gi = Tensor::zeros(x.shape().to_vec());
                let mut gg = Tensor::zeros(vec![c]);
                let mut gb = Tensor::zeros(vec![c]);
                kernels::batchnorm_backward(
                    x.data(),
                    param(graph, gamma),
                    param(graph, mean),
                    param(graph, var),
                    g.data(),
                    gi.data_mut(),
                    gg.data_mut(),
                    gb.data_mut(),
                    c,
                    plane,
                );
                add_assign(grad_entry(&mut grads_w, graph, gamma), &gg);
                add_assign(grad_entry(&mut grads_w, graph, beta), &gb);
                add_assign(&mut grads_a[pred.0], &gi);
            }
            LayerOp::Bias { bias, .. } => {
                let pred = graph.preds(id)[0];
                let (c, plane) = match graph.in_shape(id) {
                    Shape::Map { c, h, w } => (c, h * w),
                    Shape::Feat { features, .. } => (features, 1),
                };
                let mut gb = Tensor::zeros(vec![c]);
                kernels::bias_backward(g.data(), gb.data_mut(), c, plane);
                add_assign(grad_entry(&mut grads_w, graph, bias), &gb);
                add_assign(&mut grads_a[pred.0], &g);
            }
            LayerOp::MaxPool { kernel, stride, pad } => {
                let pred = graph.preds(id)[0];
                let x = exec.stages[pred.0].last().unwrap();
                let s = pool_shape(*kernel, *stride, *pad, graph.in_shape(id), shapes[0]);
                let mut gi = Tensor::zeros(x.shape().to_vec());
                kernels::maxpool_backward(x.data(), g.data(), gi.data_mut(), n, &s);
                add_assign(&mut grads_a[pred.0], &gi);
            }
            LayerOp::AvgPool { kernel, stride, pad } => {
                let pred = graph.preds(id)[0];
                let s = pool_shape(*kernel, *stride, *pad, graph.in_shape(id), shapes[0]);
                let mut gi = Tensor::zeros(exec.stages[pred.0].last().unwrap().shape().to_vec());
                kernels::avgpool_backward(g.data(), gi.data_mut(), n, &s);
                add_assign(&mut grads_a[pred.0], &gi);
            }
            LayerOp::GlobalAvgPool => {
                let pred = graph.preds(id)[0];
                let Shape::Map { c, h, w } = graph.in_shape(id) else {
                    unreachable!()
                };
                let mut gi = Tensor::zeros(exec.stages[pred.0].last().unwrap().shape().to_vec());
                kernels::global_avgpool_backward(g.data(), gi.data_mut(), n, c, h * w);
                add_assign(&mut grads_a[pred.0], &gi);
            }
            LayerOp::Flatten => {
                let pred = graph.preds(id)[0];
                let pred_shape = exec.stages[pred.0].last().unwrap().shape().to_vec();
                let gi = g.clone().reshaped(pred_shape).expect("same element count");
                add_assign(&mut grads_a[pred.0], &gi);
            }
            LayerOp::SoftmaxLoss => {
                let pred = graph.preds(id)[0];
                let pred_shape = exec.stages[pred.0].last().unwrap().shape().to_vec();
                let gi = g.clone().reshaped(pred_shape).expect("same element count");
                add_assign(&mut grads_a[pred.0], &gi);
            }
        }
    }

    Ok(BatchResult {
        loss: exec.loss,
        correct: exec.correct,
        activations: exec
            .stages
            .into_iter()
            .map(|mut st| st.pop().expect("every layer computed"))
            .collect(),
        grads_w,
        grads_a,
        grads_x,
    })
}

/// Top-1 accuracy over a full dataset, streamed in fixed-size chunks.
pub fn evaluate_accuracy(graph: &NetworkGraph, dataset: &DatasetHandle) -> Result<f64, EngineError> {
    if dataset.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < dataset.len() {
        let take = CHUNK.min(dataset.len() - done);
        let indices: Vec<usize> = (done..done + take).collect();
        let (batch, labels) = dataset.gather(&indices);
        let result = forward(graph, &batch, &labels)?;
        correct += result.correct;
        done += take;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, FixtureBuilder};
    use crate::graph::{absorb_activations, GroupMapping};
    use crate::model_io::{DatasetHandle, Split};
    use crate::rng::Rng;

    fn identity_conv_net() -> NetworkGraph {
        // 1x1 conv over 3 channels with identity weights and zero bias
        let mut b = FixtureBuilder::new("identity", 1);
        b.input("input", 3, 2, 2);
        b.conv("conv", "input", 3, 3, 1, 0, 1, GroupMapping::Interleaved, true);
        b.gap("gap", "conv");
        b.fc("fc", "gap", 3, 2, true);
        b.loss("loss", "fc");
        let mut g = b.build();
        let w = g.store_mut().get_mut("conv.w").unwrap();
        w.data_mut().copy_from_slice(&[
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ]);
        g
    }

    fn random_batch(g: &NetworkGraph, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let Shape::Map { c, h, w } = g.out_shape(g.input_layer()) else {
            unreachable!()
        };
        let classes = g.out_shape(g.loss_layer()).elements();
        let data = (0..n * c * h * w)
            .map(|_| rng.range_f64(0.0, 1.0) as f32)
            .collect();
        let labels = (0..n).map(|_| rng.below(classes)).collect();
        (Tensor::new(vec![n, c, h, w], data).unwrap(), labels)
    }

    #[test]
    fn identity_conv_passes_input_through() {
        let g = identity_conv_net();
        let (batch, labels) = random_batch(&g, 3, 7);
        let out = forward(&g, &batch, &labels).unwrap();
        let conv = g.layer_by_name("conv").unwrap().id;
        assert_eq!(out.activations[conv.0].data(), batch.data());
    }

    #[test]
    fn zeroed_channel_produces_exactly_zero_map() {
        let mut g = identity_conv_net();
        // zero channel 1's row and bias
        let w = g.store_mut().get_mut("conv.w").unwrap();
        w.data_mut()[3..6].fill(0.0);
        let (batch, labels) = random_batch(&g, 2, 9);
        let out = forward(&g, &batch, &labels).unwrap();
        let conv = g.layer_by_name("conv").unwrap().id;
        let act = &out.activations[conv.0];
        for item in 0..2 {
            let map = &act.data()[item * 12 + 4..item * 12 + 8];
            assert!(map.iter().all(|&v| v == 0.0));
        }
    }

    /// Independent scalar reference: straight-line loops for a fixed
    /// conv(3x3, pad 1) -> relu -> grouped conv(g=2) -> gap -> fc -> CE net.
    fn naive_reference_loss(g: &NetworkGraph, batch: &Tensor, labels: &[usize]) -> f64 {
        let w1 = g.store().get("c1.w").unwrap().data();
        let b1 = g.store().get("c1.b").unwrap().data();
        let w2 = g.store().get("c2.w").unwrap().data();
        let wf = g.store().get("fc.w").unwrap().data();
        let bf = g.store().get("fc.b").unwrap().data();
        let (n, cin, h, w) = (batch.shape()[0], 2usize, 5usize, 5usize);
        let c1 = 4usize;
        let c2 = 4usize; // g=2: m_in = 2, two output channels per group
        let classes = 3usize;
        let mut loss = 0.0f64;
        for item in 0..n {
            let x = &batch.data()[item * cin * h * w..];
            // conv1: 3x3 pad 1
            let mut a1 = vec![0.0f64; c1 * h * w];
            for o in 0..c1 {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = b1[o] as f64;
                        for ci in 0..cin {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (iy, ix) = (y + ky, xx + kx);
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = w1[((o * cin + ci) * 3 + (ky + 1) as usize) * 3
                                        + (kx + 1) as usize];
                                    acc += wv as f64
                                        * x[(ci * h + iy as usize) * w + ix as usize] as f64;
                                }
                            }
                        }
                        a1[(o * h + y as usize) * w + xx as usize] = acc.max(0.0);
                    }
                }
            }
            // grouped 1x1 conv, g=2, interleaved: group a reads channels {2a, 2a+1}
            let mut a2 = vec![0.0f64; c2 * h * w];
            for o in 0..c2 {
                let group = o / 2;
                for p in 0..h * w {
                    let mut acc = 0.0f64;
                    for s in 0..2 {
                        let ci = group * 2 + s;
                        acc += w2[o * 2 + s] as f64 * a1[ci * h * w + p];
                    }
                    a2[o * h * w + p] = acc;
                }
            }
            // gap + fc
            let mut pooled = vec![0.0f64; c2];
            for (o, slot) in pooled.iter_mut().enumerate() {
                *slot = a2[o * h * w..(o + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            }
            let mut logits = vec![0.0f64; classes];
            for (k, logit) in logits.iter_mut().enumerate() {
                let mut acc = bf[k] as f64;
                for (o, &p) in pooled.iter().enumerate() {
                    acc += wf[k * c2 + o] as f64 * p;
                }
                *logit = acc;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
            loss += denom.ln() + max - logits[labels[item]];
        }
        loss / n as f64
    }

    fn naive_reference_net() -> NetworkGraph {
        let mut b = FixtureBuilder::new("naive-ref", 31);
        b.input("input", 2, 5, 5);
        b.conv("c1", "input", 2, 4, 3, 1, 1, GroupMapping::Interleaved, true);
        b.relu("r1", "c1");
        b.conv("c2", "r1", 4, 4, 1, 0, 2, GroupMapping::Interleaved, false);
        b.gap("gap", "c2");
        b.fc("fc", "gap", 4, 3, true);
        b.loss("loss", "fc");
        let mut g = b.build();
        // non-zero biases so they participate
        let mut rng = Rng::new(8);
        for name in ["c1.b", "fc.b"] {
            for v in g.store_mut().get_mut(name).unwrap().data_mut() {
                *v = rng.range_f64(-0.3, 0.3) as f32;
            }
        }
        g
    }

    #[test]
    fn loss_matches_naive_loop_reference() {
        let g = naive_reference_net();
        let (batch, labels) = random_batch(&g, 6, 13);
        let engine_loss = forward(&g, &batch, &labels).unwrap().loss;
        let reference = naive_reference_loss(&g, &batch, &labels);
        let rel = (engine_loss - reference).abs() / reference.abs().max(1e-12);
        assert!(rel < 1e-5, "engine {engine_loss} vs reference {reference} (rel {rel:.2e})");
    }

    #[test]
    fn zero_weight_network_has_analytic_softmax_gradient() {
        let mut g = fixtures::tiny_linear();
        for name in ["conv.w", "conv.b"] {
            g.store_mut().get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let (batch, labels) = random_batch(&g, 4, 3);
        let out = backward(&g, &batch, &labels).unwrap();
        // logits all zero -> softmax uniform -> grad = (1/K - onehot)/n
        let conv = g.layer_by_name("conv").unwrap().id;
        let grad = &out.grads_a[conv.0];
        let k = 4.0f64;
        let n = labels.len() as f64;
        for (item, &label) in labels.iter().enumerate() {
            for class in 0..4 {
                let expected = ((1.0 / k) - if class == label { 1.0 } else { 0.0 }) / n;
                let got = grad.data()[item * 4 + class] as f64;
                assert!((got - expected).abs() < 1e-7, "item {item} class {class}");
            }
        }
        assert!((out.loss - k.ln()).abs() < 1e-6);
    }

    #[test]
    fn add_routes_gradient_to_both_producers() {
        let mut b = FixtureBuilder::new("add-grad", 41);
        b.input("input", 2, 3, 3);
        b.conv("l", "input", 2, 3, 1, 0, 1, GroupMapping::Interleaved, true);
        b.conv("r", "input", 2, 3, 1, 0, 1, GroupMapping::Interleaved, true);
        b.add("join", &["l", "r"]);
        b.gap("gap", "join");
        b.fc("fc", "gap", 3, 2, true);
        b.loss("loss", "fc");
        let g = b.build();
        let (batch, labels) = random_batch(&g, 3, 5);
        let out = backward(&g, &batch, &labels).unwrap();
        let l = g.layer_by_name("l").unwrap().id;
        let r = g.layer_by_name("r").unwrap().id;
        let join = g.layer_by_name("join").unwrap().id;
        assert_eq!(out.grads_a[l.0].data(), out.grads_a[join.0].data());
        assert_eq!(out.grads_a[r.0].data(), out.grads_a[join.0].data());
    }

    #[test]
    fn raw_and_absorbed_graphs_agree_bit_for_bit() {
        for g in [
            fixtures::linear_toy(2),
            fixtures::resblock_toy(4),
            fixtures::grouped_toy(6, GroupMapping::Blocked),
            fixtures::flatten_toy(8),
        ] {
            let a = absorb_activations(&g).unwrap();
            let (batch, labels) = random_batch(&g, 4, 19);
            let raw = forward(&g, &batch, &labels).unwrap();
            let abs = forward(&a, &batch, &labels).unwrap();
            assert_eq!(raw.loss.to_bits(), abs.loss.to_bits(), "{}", g.name);
            assert_eq!(raw.correct, abs.correct);
            let logits_raw = &raw.activations[g.loss_layer().0];
            let logits_abs = &abs.activations[a.loss_layer().0];
            assert_eq!(logits_raw.data(), logits_abs.data());
        }
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let g = fixtures::resblock_toy(5);
        let (batch, labels) = random_batch(&g, 8, 23);
        let a = forward(&g, &batch, &labels).unwrap();
        let b = forward(&g, &batch, &labels).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (x, y) in a.activations.iter().zip(&b.activations) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn accuracy_on_handcrafted_net() {
        // identity conv + identity fc: logits equal channel means of input
        let mut b = FixtureBuilder::new("acc", 51);
        b.input("input", 3, 1, 1);
        b.conv("conv", "input", 3, 3, 1, 0, 1, GroupMapping::Interleaved, false);
        b.gap("gap", "conv");
        b.fc("fc", "gap", 3, 3, false);
        b.loss("loss", "fc");
        let mut g = b.build();
        g.store_mut().get_mut("conv.w").unwrap().data_mut().copy_from_slice(&[
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        g.store_mut().get_mut("fc.w").unwrap().data_mut().copy_from_slice(&[
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        // one-hot images whose hot channel is the label
        let mut data = vec![0.0f32; 3 * 3];
        for i in 0..3 {
            data[i * 3 + i] = 1.0;
        }
        let images = Tensor::new(vec![3, 3, 1, 1], data).unwrap();
        let good = DatasetHandle::new(images.clone(), vec![0, 1, 2], Split::Test, 3).unwrap();
        assert_eq!(evaluate_accuracy(&g, &good).unwrap(), 1.0);
        // adversarially permuted labels
        let bad = DatasetHandle::new(images, vec![1, 2, 0], Split::Test, 3).unwrap();
        assert_eq!(evaluate_accuracy(&g, &bad).unwrap(), 0.0);
    }

    #[test]
    fn empty_dataset_rejected() {
        let g = fixtures::tiny_linear();
        let images = Tensor::new(vec![0, 3, 1, 1], vec![]).unwrap();
        let empty = DatasetHandle::new(images, vec![], Split::Test, 4).unwrap();
        assert_eq!(evaluate_accuracy(&g, &empty), Err(EngineError::EmptyDataset));
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let g = fixtures::tiny_linear();
        let batch = Tensor::zeros(vec![2, 5, 1, 1]);
        assert!(matches!(
            forward(&g, &batch, &[0, 1]),
            Err(EngineError::ShapeMismatch(_))
        ));
    }
}
