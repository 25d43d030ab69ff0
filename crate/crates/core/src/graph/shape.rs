//! Static shape inference.
//!
//! Conventions shared by both executors: floor division for windowed ops,
//! padding defaults to 0, `Dense` and `Flatten` collapse all trailing extents,
//! `Concat` joins along extent 1.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{LayerKind, LayerNode, Model, TensorSpec};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("shape mismatch at edge {from} -> {to}: {message}")]
    Mismatch {
        from: String,
        to: String,
        message: String,
    },
    #[error("merge arity mismatch at node {node}: {message}")]
    MergeArity { node: String, message: String },
    #[error("graph is not a DAG")]
    Cyclic,
}

/// Output spec of every node, keyed by node id.
pub fn infer_shapes(model: &Model) -> Result<BTreeMap<String, TensorSpec>, ShapeError> {
    let order = model.topo_order().ok_or(ShapeError::Cyclic)?;
    let mut out: BTreeMap<String, TensorSpec> = BTreeMap::new();
    for id in &order {
        let node = &model.nodes[id];
        let preds = model.preds(id);
        let (inputs, from): (Vec<TensorSpec>, String) = if preds.is_empty() {
            (vec![model.input_spec.clone()], "input".to_string())
        } else {
            (
                preds.iter().map(|p| out[*p].clone()).collect(),
                preds[0].to_string(),
            )
        };
        let spec = node_output(node, &inputs, &from)?;
        out.insert(id.clone(), spec);
    }
    Ok(out)
}

/// Input specs of every node in input order, given inferred outputs.
pub fn input_specs(
    model: &Model,
    shapes: &BTreeMap<String, TensorSpec>,
) -> BTreeMap<String, Vec<TensorSpec>> {
    model
        .nodes
        .keys()
        .map(|id| {
            let preds = model.preds(id);
            let v = if preds.is_empty() {
                vec![model.input_spec.clone()]
            } else {
                preds.iter().filter_map(|p| shapes.get(*p).cloned()).collect()
            };
            (id.clone(), v)
        })
        .collect()
}

/// Output extent of a windowed op, or `None` if the window does not fit.
pub fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn node_output(
    node: &LayerNode,
    inputs: &[TensorSpec],
    from: &str,
) -> Result<TensorSpec, ShapeError> {
    let mismatch = |message: String| ShapeError::Mismatch {
        from: from.to_string(),
        to: node.id.clone(),
        message,
    };
    if inputs.len() > 1 && !node.kind.is_merge() {
        return Err(ShapeError::MergeArity {
            node: node.id.clone(),
            message: format!("{} accepts one input, got {}", node.kind, inputs.len()),
        });
    }
    let x = &inputs[0];
    match node.kind {
        LayerKind::Conv2d => {
            if x.rank() != 4 {
                return Err(mismatch(format!("Conv2d expects rank 4, got {x}")));
            }
            let k = node.int("kernel_size");
            let s = node.int("stride");
            let p = node.int("padding");
            let oc = node.int("out_channels");
            let h = window_out(x.shape[2], k, s, p);
            let w = window_out(x.shape[3], k, s, p);
            match (h, w) {
                (Some(h), Some(w)) if oc >= 1 => Ok(x.with_shape(vec![x.shape[0], oc, h, w])),
                _ => Err(mismatch(format!(
                    "kernel {k} (stride {s}, padding {p}) does not fit input {x}"
                ))),
            }
        }
        LayerKind::MaxPool | LayerKind::AvgPool => {
            if x.rank() != 4 {
                return Err(mismatch(format!("{} expects rank 4, got {x}", node.kind)));
            }
            let k = node.int("kernel_size");
            let s = node.int("stride");
            match (window_out(x.shape[2], k, s, 0), window_out(x.shape[3], k, s, 0)) {
                (Some(h), Some(w)) => Ok(x.with_shape(vec![x.shape[0], x.shape[1], h, w])),
                _ => Err(mismatch(format!("pool window {k} (stride {s}) does not fit input {x}"))),
            }
        }
        LayerKind::Dense => {
            if x.rank() < 2 {
                return Err(mismatch(format!("Dense expects rank >= 2, got {x}")));
            }
            let units = node.int("units");
            if units == 0 {
                return Err(mismatch("Dense with zero units".into()));
            }
            Ok(x.with_shape(vec![x.shape[0], units]))
        }
        LayerKind::Flatten => {
            if x.rank() < 2 {
                return Err(mismatch(format!("Flatten expects rank >= 2, got {x}")));
            }
            Ok(x.with_shape(vec![x.shape[0], x.sample_numel()]))
        }
        LayerKind::BatchNorm => {
            if x.rank() != 2 && x.rank() != 4 {
                return Err(mismatch(format!("BatchNorm expects rank 2 or 4, got {x}")));
            }
            Ok(x.clone())
        }
        LayerKind::ReLU | LayerKind::Sigmoid | LayerKind::Identity => Ok(x.clone()),
        LayerKind::Add => {
            if let Some(bad) = inputs.iter().find(|s| *s != x) {
                return Err(ShapeError::MergeArity {
                    node: node.id.clone(),
                    message: format!("Add inputs disagree: {x} vs {bad}"),
                });
            }
            Ok(x.clone())
        }
        LayerKind::Concat => {
            if x.rank() < 2 {
                return Err(ShapeError::MergeArity {
                    node: node.id.clone(),
                    message: format!("Concat expects rank >= 2, got {x}"),
                });
            }
            let mut channels = 0;
            for s in inputs {
                let compatible = s.rank() == x.rank()
                    && s.dtype == x.dtype
                    && s.shape[0] == x.shape[0]
                    && s.shape[2..] == x.shape[2..];
                if !compatible {
                    return Err(ShapeError::MergeArity {
                        node: node.id.clone(),
                        message: format!("Concat inputs disagree off the channel axis: {x} vs {s}"),
                    });
                }
                channels += s.shape[1];
            }
            let mut shape = x.shape.clone();
            shape[1] = channels;
            Ok(x.with_shape(shape))
        }
    }
}
