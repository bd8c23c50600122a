//! Model manifest: a small line-based text format describing layers, their
//! parameters, tensor references and wiring.
//!
//! ```text
//! dpt-manifest v1
//! model resblock-toy
//! layer input kind=Input out=3 h=12 w=12
//! layer convA kind=Conv2D in=3 out=40 k=3 stride=1 pad=1 groups=1 weights=convA.w from=input
//! ```
//!
//! Names and tensor references are restricted to `[A-Za-z0-9_.-]`, keys to a
//! fixed set per kind. The canonical form written by
//! [`format_manifest`] lists layers in topological order with a fixed key
//! order, so save/load round-trips are byte-stable.

use crate::graph::{LayerOp, NetworkGraph};

use super::ModelIoError;

pub const MANIFEST_HEADER: &str = "dpt-manifest v1";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: String,
    pub in_: Option<usize>,
    pub out: Option<usize>,
    pub channels: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub groups: Option<usize>,
    pub mapping: Option<String>,
    pub weights: Option<String>,
    pub bias: Option<String>,
    pub gamma: Option<String>,
    pub beta: Option<String>,
    pub mean: Option<String>,
    pub var: Option<String>,
    pub from: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub model: String,
    pub layers: Vec<ManifestLayer>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'.' || b == b'-')
}

// Dimension cap: keeps every shape product derived from a manifest well
// inside usize range, so validation arithmetic cannot overflow on hostile
// input.
const MAX_COUNT: usize = 1 << 16;

fn parse_count(line: usize, key: &str, value: &str) -> Result<usize, ModelIoError> {
    let n: usize = value.parse().map_err(|_| ModelIoError::Parse {
        line,
        detail: format!("`{key}` expects a non-negative integer, got `{value}`"),
    })?;
    if n > MAX_COUNT {
        return Err(ModelIoError::Parse {
            line,
            detail: format!("`{key}={n}` is out of range"),
        });
    }
    Ok(n)
}

/// Parse manifest text. Never panics; malformed input yields
/// [`ModelIoError::Parse`] with the offending line number.
pub fn parse_manifest(text: &str) -> Result<Manifest, ModelIoError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.trim_start().starts_with('#') => continue,
            Some((n, l)) => break (n, l.trim()),
            None => {
                return Err(ModelIoError::Parse {
                    line: 0,
                    detail: "empty manifest".into(),
                })
            }
        }
    };
    if header.1 != MANIFEST_HEADER {
        return Err(ModelIoError::Parse {
            line: header.0 + 1,
            detail: format!("expected `{MANIFEST_HEADER}` header"),
        });
    }

    let mut model = None;
    let mut layers: Vec<ManifestLayer> = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("model") => {
                let name = tokens.next().ok_or(ModelIoError::Parse {
                    line: line_no,
                    detail: "missing model name".into(),
                })?;
                if !is_ident(name) || tokens.next().is_some() {
                    return Err(ModelIoError::Parse {
                        line: line_no,
                        detail: "malformed model line".into(),
                    });
                }
                if model.replace(name.to_string()).is_some() {
                    return Err(ModelIoError::Parse {
                        line: line_no,
                        detail: "duplicate model line".into(),
                    });
                }
            }
            Some("layer") => {
                let name = tokens.next().ok_or(ModelIoError::Parse {
                    line: line_no,
                    detail: "missing layer name".into(),
                })?;
                if !is_ident(name) {
                    return Err(ModelIoError::Parse {
                        line: line_no,
                        detail: format!("invalid layer name `{name}`"),
                    });
                }
                if layers.len() >= 4096 {
                    return Err(ModelIoError::Parse {
                        line: line_no,
                        detail: "too many layers".into(),
                    });
                }
                let mut layer = ManifestLayer {
                    name: name.to_string(),
                    ..ManifestLayer::default()
                };
                for token in tokens {
                    let (key, value) = token.split_once('=').ok_or(ModelIoError::Parse {
                        line: line_no,
                        detail: format!("expected key=value, got `{token}`"),
                    })?;
                    let dup = |prev: bool| {
                        if prev {
                            Err(ModelIoError::Parse {
                                line: line_no,
                                detail: format!("duplicate key `{key}`"),
                            })
                        } else {
                            Ok(())
                        }
                    };
                    let ident = |value: &str| {
                        if is_ident(value) {
                            Ok(value.to_string())
                        } else {
                            Err(ModelIoError::Parse {
                                line: line_no,
                                detail: format!("invalid identifier `{value}` for `{key}`"),
                            })
                        }
                    };
                    match key {
                        "kind" => {
                            dup(!layer.kind.is_empty())?;
                            layer.kind = ident(value)?;
                        }
                        "in" => {
                            dup(layer.in_.is_some())?;
                            layer.in_ = Some(parse_count(line_no, key, value)?);
                        }
                        "out" => {
                            dup(layer.out.is_some())?;
                            layer.out = Some(parse_count(line_no, key, value)?);
                        }
                        "ch" => {
                            dup(layer.channels.is_some())?;
                            layer.channels = Some(parse_count(line_no, key, value)?);
                        }
                        "h" => {
                            dup(layer.height.is_some())?;
                            layer.height = Some(parse_count(line_no, key, value)?);
                        }
                        "w" => {
                            dup(layer.width.is_some())?;
                            layer.width = Some(parse_count(line_no, key, value)?);
                        }
                        "k" => {
                            dup(layer.kernel.is_some())?;
                            layer.kernel = Some(parse_count(line_no, key, value)?);
                        }
                        "stride" => {
                            dup(layer.stride.is_some())?;
                            layer.stride = Some(parse_count(line_no, key, value)?);
                        }
                        "pad" => {
                            dup(layer.pad.is_some())?;
                            layer.pad = Some(parse_count(line_no, key, value)?);
                        }
                        "groups" => {
                            dup(layer.groups.is_some())?;
                            layer.groups = Some(parse_count(line_no, key, value)?);
                        }
                        "mapping" => {
                            dup(layer.mapping.is_some())?;
                            layer.mapping = Some(ident(value)?);
                        }
                        "weights" => {
                            dup(layer.weights.is_some())?;
                            layer.weights = Some(ident(value)?);
                        }
                        "bias" => {
                            dup(layer.bias.is_some())?;
                            layer.bias = Some(ident(value)?);
                        }
                        "gamma" => {
                            dup(layer.gamma.is_some())?;
                            layer.gamma = Some(ident(value)?);
                        }
                        "beta" => {
                            dup(layer.beta.is_some())?;
                            layer.beta = Some(ident(value)?);
                        }
                        "mean" => {
                            dup(layer.mean.is_some())?;
                            layer.mean = Some(ident(value)?);
                        }
                        "var" => {
                            dup(layer.var.is_some())?;
                            layer.var = Some(ident(value)?);
                        }
                        "from" => {
                            dup(!layer.from.is_empty())?;
                            for f in value.split(',') {
                                layer.from.push(ident(f)?);
                            }
                        }
                        other => {
                            return Err(ModelIoError::Parse {
                                line: line_no,
                                detail: format!("unknown key `{other}`"),
                            })
                        }
                    }
                }
                if layer.kind.is_empty() {
                    return Err(ModelIoError::Parse {
                        line: line_no,
                        detail: "layer is missing `kind`".into(),
                    });
                }
                layers.push(layer);
            }
            Some(other) => {
                return Err(ModelIoError::Parse {
                    line: line_no,
                    detail: format!("unknown directive `{other}`"),
                })
            }
            None => unreachable!("non-empty line has a token"),
        }
    }
    Ok(Manifest {
        model: model.unwrap_or_else(|| "unnamed".into()),
        layers,
    })
}

fn push_kv(out: &mut String, key: &str, value: &str) {
    out.push(' ');
    out.push_str(key);
    out.push('=');
    out.push_str(value);
}

/// Canonical text form: fixed key order, layers in the order given.
pub fn format_manifest(manifest: &Manifest) -> String {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    out.push_str("model ");
    out.push_str(&manifest.model);
    out.push('\n');
    for l in &manifest.layers {
        out.push_str("layer ");
        out.push_str(&l.name);
        push_kv(&mut out, "kind", &l.kind);
        if let Some(v) = l.in_ {
            push_kv(&mut out, "in", &v.to_string());
        }
        if let Some(v) = l.out {
            push_kv(&mut out, "out", &v.to_string());
        }
        if let Some(v) = l.channels {
            push_kv(&mut out, "ch", &v.to_string());
        }
        if let Some(v) = l.height {
            push_kv(&mut out, "h", &v.to_string());
        }
        if let Some(v) = l.width {
            push_kv(&mut out, "w", &v.to_string());
        }
        if let Some(v) = l.kernel {
            push_kv(&mut out, "k", &v.to_string());
        }
        if let Some(v) = l.stride {
            push_kv(&mut out, "stride", &v.to_string());
        }
        if let Some(v) = l.pad {
            push_kv(&mut out, "pad", &v.to_string());
        }
        if let Some(v) = l.groups {
            push_kv(&mut out, "groups", &v.to_string());
        }
        if let Some(v) = &l.mapping {
            push_kv(&mut out, "mapping", v);
        }
        if let Some(v) = &l.weights {
            push_kv(&mut out, "weights", v);
        }
        if let Some(v) = &l.bias {
            push_kv(&mut out, "bias", v);
        }
        if let Some(v) = &l.gamma {
            push_kv(&mut out, "gamma", v);
        }
        if let Some(v) = &l.beta {
            push_kv(&mut out, "beta", v);
        }
        if let Some(v) = &l.mean {
            push_kv(&mut out, "mean", v);
        }
        if let Some(v) = &l.var {
            push_kv(&mut out, "var", v);
        }
        if !l.from.is_empty() {
            push_kv(&mut out, "from", &l.from.join(","));
        }
        out.push('\n');
    }
    out
}

/// Convert a validated raw graph back into a manifest, layers in
/// topological order. Absorbed graphs cannot round-trip (their activation
/// layers were folded away).
pub fn graph_to_manifest(graph: &NetworkGraph) -> Manifest {
    let mut layers = Vec::new();
    for &id in graph.topo() {
        let node = graph.layer(id);
        let mut ml = ManifestLayer {
            name: node.name.clone(),
            kind: node.op.kind_name().to_string(),
            from: graph
                .preds(id)
                .iter()
                .map(|p| graph.layer(*p).name.clone())
                .collect(),
            ..ManifestLayer::default()
        };
        match &node.op {
            LayerOp::Input {
                channels,
                height,
                width,
            } => {
                ml.out = Some(*channels);
                ml.height = Some(*height);
                ml.width = Some(*width);
            }
            LayerOp::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                groups,
                mapping,
                weight,
                bias,
            } => {
                ml.in_ = Some(*in_channels);
                ml.out = Some(*out_channels);
                ml.kernel = Some(*kernel);
                ml.stride = Some(*stride);
                ml.pad = Some(*pad);
                ml.groups = Some(*groups);
                ml.mapping = Some(mapping.as_str().to_string());
                ml.weights = Some(weight.clone());
                ml.bias = bias.clone();
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                ml.in_ = Some(*in_features);
                ml.out = Some(*out_features);
                ml.weights = Some(weight.clone());
                ml.bias = bias.clone();
            }
            LayerOp::BatchNorm {
                channels,
                gamma,
                beta,
                mean,
                var,
            } => {
                ml.channels = Some(*channels);
                ml.gamma = Some(gamma.clone());
                ml.beta = Some(beta.clone());
                ml.mean = Some(mean.clone());
                ml.var = Some(var.clone());
            }
            LayerOp::Bias { channels, bias } => {
                ml.channels = Some(*channels);
                ml.bias = Some(bias.clone());
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
            } => {
                ml.kernel = Some(*kernel);
                ml.stride = Some(*stride);
                ml.pad = Some(*pad);
            }
            LayerOp::EltwiseAdd
            | LayerOp::ReLU
            | LayerOp::GlobalAvgPool
            | LayerOp::Flatten
            | LayerOp::SoftmaxLoss => {}
        }
        layers.push(ml);
    }
    Manifest {
        model: graph.name.clone(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal() {
        let text = "dpt-manifest v1\nmodel tiny\nlayer input kind=Input out=3 h=4 w=4\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.model, "tiny");
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.layers[0].out, Some(3));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# fixture\n\ndpt-manifest v1\nmodel t\n# wiring\nlayer a kind=Input out=1 h=1 w=1\n";
        assert!(parse_manifest(text).is_ok());
    }

    #[test]
    fn rejects_bad_header() {
        let err = parse_manifest("dpt-manifest v9\n").unwrap_err();
        assert!(matches!(err, ModelIoError::Parse { line: 1, .. }));
    }

    #[test]
    fn rejects_duplicate_key() {
        let text = "dpt-manifest v1\nlayer a kind=Input out=1 out=2 h=1 w=1\n";
        assert!(parse_manifest(text).is_err());
    }

    #[test]
    fn rejects_bad_identifier() {
        let text = "dpt-manifest v1\nlayer a kind=Input out=1 h=1 w=1 from=b/c\n";
        assert!(parse_manifest(text).is_err());
    }

    #[test]
    fn format_parse_round_trip() {
        let text = "dpt-manifest v1\nmodel t\nlayer input kind=Input out=2 h=3 w=3\nlayer conv kind=Conv2D in=2 out=4 k=1 stride=1 pad=0 groups=1 mapping=interleaved weights=c.w from=input\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(format_manifest(&m), text);
    }
}
