//! Per-operator MAC estimators.

use serde::{Deserialize, Serialize};

use super::CostError;
use crate::graph::shape::{conv_kernel, matmul_dims};
use crate::graph::{Graph, NodeId, OpClass, Shape, TensorId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConfig {
    /// Charge `0.5 * output_size` for misc ops instead of zero.
    pub misc_half_cost: bool,
}

fn shape<'a>(g: &'a Graph, node: NodeId, t: TensorId) -> Result<&'a Shape, CostError> {
    g.tensor(t)
        .shape
        .as_ref()
        .filter(|s| s.is_fully_bounded())
        .ok_or_else(|| CostError::UnresolvedShape {
            node: g.node(node).name.clone(),
            tensor: g.tensor(t).name.clone(),
        })
}

fn bounds(s: &Shape) -> Vec<u64> {
    s.bounds().expect("checked bounded")
}

fn numel(s: &Shape) -> f64 {
    bounds(s).iter().map(|&d| d as f64).product()
}

fn missing(g: &Graph, id: NodeId, attr: &str) -> CostError {
    CostError::MissingAttr {
        node: g.node(id).name.clone(),
        attr: attr.to_string(),
    }
}

/// MACs for one node, using max bounds for symbolic dims.
pub fn node_flops(g: &Graph, id: NodeId, cfg: &FlopConfig) -> Result<f64, CostError> {
    let node = g.node(id);
    let out = |i: usize| -> Result<&Shape, CostError> {
        let t = *node
            .outputs
            .get(i)
            .ok_or_else(|| missing(g, id, "outputs"))?;
        shape(g, id, t)
    };
    let inputs = || -> Result<Vec<Shape>, CostError> {
        node.inputs
            .iter()
            .map(|&t| shape(g, id, t).cloned())
            .collect()
    };
    match node.class {
        OpClass::Conv => {
            let ins = inputs()?;
            let x = ins
                .first()
                .filter(|s| s.rank() == 4)
                .ok_or_else(|| missing(g, id, "input"))?;
            let y = out(0)?;
            if y.rank() != 4 {
                return Err(missing(g, id, "output"));
            }
            let (kh, kw) = conv_kernel(node, &ins).ok_or_else(|| missing(g, id, "kernel"))?;
            let (xd, yd) = (bounds(x), bounds(y));
            let groups = if node.op.starts_with("Depthwise") {
                xd[1]
            } else {
                node.attr_u64("groups").unwrap_or(1).max(1)
            };
            let c_in = (xd[1] / groups).max(1) as f64;
            Ok(2.0 * c_in * (yd[2] * yd[3]) as f64 * (kh * kw) as f64 * yd[1] as f64)
        }
        OpClass::MatMul => {
            let ins = inputs()?;
            let (batch, m, k, n) =
                matmul_dims(node, &ins).map_err(|e| CostError::Shape(e.to_string()))?;
            let b: f64 = batch
                .iter()
                .map(|d| d.bound().unwrap_or(1) as f64)
                .product();
            let m = m.bound().unwrap_or(1) as f64;
            let n = n.bound().unwrap_or(1) as f64;
            Ok(2.0 * b * m * n * k as f64)
        }
        OpClass::Elementwise => Ok(numel(out(0)?)),
        OpClass::Pooling => {
            let y = bounds(out(0)?);
            if y.len() != 4 {
                return Err(missing(g, id, "output"));
            }
            let (kh, kw) = if node.op.starts_with("Global") {
                let ins = inputs()?;
                let x = ins
                    .first()
                    .filter(|s| s.rank() == 4)
                    .ok_or_else(|| missing(g, id, "input"))?;
                let xd = bounds(x);
                (xd[2], xd[3])
            } else {
                node.attr_pair("kernel")
                    .ok_or_else(|| missing(g, id, "kernel"))?
            };
            Ok((y[2] * y[3] * kh * kw) as f64)
        }
        OpClass::Reduce => {
            let t = *node.inputs.first().ok_or_else(|| missing(g, id, "input"))?;
            Ok(numel(shape(g, id, t)?))
        }
        OpClass::Misc => {
            if cfg.misc_half_cost && !node.outputs.is_empty() {
                Ok(0.5 * numel(out(0)?))
            } else {
                Ok(0.0)
            }
        }
        OpClass::Delegate => node.attr_f64("macs").ok_or_else(|| missing(g, id, "macs")),
    }
}
