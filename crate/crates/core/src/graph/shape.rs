//! Static shape propagation.
//!
//! Shapes flow in topological order using one rule per operator class.
//! Declared output shapes are checked against the rule when one exists and
//! used as-is otherwise; an output with neither is an error. Symbolic dims
//! keep their name and carry an updated max bound through arithmetic.

use thiserror::Error;

use super::{Dim, Graph, GraphError, Node, OpClass, Shape};

#[derive(Debug, Error, PartialEq)]
pub enum ShapeError {
    #[error("graph input '{0}' must have a fully bounded shape")]
    UnboundedInput(String),
    #[error("tensor '{0}' consumed before its shape is known")]
    MissingInputShape(String),
    #[error("node '{node}': {detail}")]
    Mismatch { node: String, detail: String },
    #[error("node '{node}' ({op}): cannot infer shape of output '{tensor}' and none was declared")]
    Unresolved {
        node: String,
        op: String,
        tensor: String,
    },
    #[error("node '{node}': declared shape of '{tensor}' is not fully bounded")]
    UnboundedDeclared { node: String, tensor: String },
    #[error("node '{node}': missing or invalid attribute '{attr}'")]
    BadAttr { node: String, attr: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Returns a copy of `g` in which every tensor carries a bounded shape.
pub fn infer_shapes(g: &Graph) -> Result<Graph, ShapeError> {
    let mut out = g.clone();
    for &t in g.inputs() {
        let td = g.tensor(t);
        if !td.shape.as_ref().is_some_and(Shape::is_fully_bounded) {
            return Err(ShapeError::UnboundedInput(td.name.clone()));
        }
    }
    let adj = g.adjacency();
    for id in g.topo_order(&adj)? {
        let node = g.node(id);
        let mut inputs = Vec::with_capacity(node.inputs.len());
        for &t in &node.inputs {
            let td = out.tensor(t);
            match &td.shape {
                Some(s) if s.is_fully_bounded() => inputs.push(s.clone()),
                _ => return Err(ShapeError::MissingInputShape(td.name.clone())),
            }
        }
        let inferred = infer_node(node, &inputs)?;
        for (i, &t) in node.outputs.iter().enumerate() {
            let declared = out.tensor(t).shape.clone();
            let rule = inferred.as_ref().and_then(|v| v.get(i)).cloned();
            let resolved = match (declared, rule) {
                (Some(d), Some(r)) => {
                    if !same_extent(&d, &r) {
                        return Err(mismatch(
                            node,
                            format!(
                                "declared shape {d} of '{}' disagrees with inferred {r}",
                                out.tensor(t).name
                            ),
                        ));
                    }
                    d
                }
                (Some(d), None) => d,
                (None, Some(r)) => r,
                (None, None) => {
                    return Err(ShapeError::Unresolved {
                        node: node.name.clone(),
                        op: node.op.clone(),
                        tensor: out.tensor(t).name.clone(),
                    })
                }
            };
            if !resolved.is_fully_bounded() {
                return Err(ShapeError::UnboundedDeclared {
                    node: node.name.clone(),
                    tensor: out.tensor(t).name.clone(),
                });
            }
            out.set_shape(t, resolved);
        }
    }
    for t in 0..out.tensors().len() {
        let td = &out.tensors()[t];
        if td.shape.is_none() {
            return Err(ShapeError::MissingInputShape(td.name.clone()));
        }
    }
    Ok(out)
}

fn same_extent(a: &Shape, b: &Shape) -> bool {
    a.rank() == b.rank()
        && a.dims()
            .iter()
            .zip(b.dims())
            .all(|(x, y)| x.bound() == y.bound())
}

fn mismatch(node: &Node, detail: String) -> ShapeError {
    ShapeError::Mismatch {
        node: node.name.clone(),
        detail,
    }
}

fn bad_attr(node: &Node, attr: &str) -> ShapeError {
    ShapeError::BadAttr {
        node: node.name.clone(),
        attr: attr.to_string(),
    }
}

fn bound(d: &Dim) -> u64 {
    d.bound()
        .expect("input shapes are bounded before rules run")
}

fn normalize_axis(node: &Node, axis: i64, rank: usize) -> Result<usize, ShapeError> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if (0..r).contains(&a) {
        Ok(a as usize)
    } else {
        Err(mismatch(
            node,
            format!("axis {axis} out of range for rank {rank}"),
        ))
    }
}

fn require_rank(node: &Node, s: &Shape, rank: usize) -> Result<(), ShapeError> {
    if s.rank() == rank {
        Ok(())
    } else {
        Err(mismatch(
            node,
            format!("expected rank-{rank} input, got {s}"),
        ))
    }
}

fn first_input<'a>(node: &Node, inputs: &'a [Shape]) -> Result<&'a Shape, ShapeError> {
    inputs
        .first()
        .ok_or_else(|| mismatch(node, "operator needs at least one input".into()))
}

#[derive(Clone, Copy)]
enum Padding {
    Same,
    Valid,
    Explicit(u64),
}

fn padding(node: &Node) -> Result<Padding, ShapeError> {
    if let Some(p) = node.attrs.get("padding") {
        return match p.as_str() {
            Some(s) if s.eq_ignore_ascii_case("same") => Ok(Padding::Same),
            Some(s) if s.eq_ignore_ascii_case("valid") => Ok(Padding::Valid),
            _ => Err(bad_attr(node, "padding")),
        };
    }
    match node.attrs.get("pads") {
        Some(v) => v
            .as_u64()
            .map(Padding::Explicit)
            .ok_or_else(|| bad_attr(node, "pads")),
        None => Ok(Padding::Valid),
    }
}

fn spatial(
    node: &Node,
    d: &Dim,
    kernel: u64,
    stride: u64,
    pad: Padding,
) -> Result<Dim, ShapeError> {
    if stride == 0 || kernel == 0 {
        return Err(bad_attr(
            node,
            if stride == 0 { "strides" } else { "kernel" },
        ));
    }
    let v = bound(d);
    let padded = match pad {
        Padding::Same => return Ok(d.map_bound(|v| v.div_ceil(stride)).expect("bounded")),
        Padding::Valid => v,
        Padding::Explicit(p) => v + 2 * p,
    };
    if padded < kernel {
        return Err(mismatch(
            node,
            format!("extent {v} smaller than kernel {kernel}"),
        ));
    }
    let extra = padded - v;
    Ok(d.map_bound(|v| (v + extra - kernel) / stride + 1)
        .expect("bounded"))
}

/// Kernel extent from attrs, falling back to an OIHW weight input.
pub(crate) fn conv_kernel(node: &Node, inputs: &[Shape]) -> Option<(u64, u64)> {
    node.attr_pair("kernel")
        .or_else(|| node.attr_pair("kernel_shape"))
        .or_else(|| {
            let w = inputs.get(1)?;
            (w.rank() == 4).then(|| (bound(&w.dims()[2]), bound(&w.dims()[3])))
        })
}

fn infer_conv(node: &Node, inputs: &[Shape]) -> Result<Shape, ShapeError> {
    let x = first_input(node, inputs)?;
    require_rank(node, x, 4)?;
    let d = x.dims();
    let (kh, kw) = conv_kernel(node, inputs).ok_or_else(|| bad_attr(node, "kernel"))?;
    let depthwise = node.op.starts_with("Depthwise");
    let filters = node
        .attr_u64("filters")
        .or_else(|| node.attr_u64("out_channels"))
        .or_else(|| {
            let w = inputs.get(1)?;
            (!depthwise && w.rank() == 4).then(|| bound(&w.dims()[0]))
        });
    let channels = if depthwise {
        let mult = node.attr_u64("multiplier").unwrap_or(1);
        match filters {
            Some(f) => Dim::Fixed(f),
            None => d[1].map_bound(|c| c * mult).expect("bounded"),
        }
    } else {
        if let Some(w) = inputs.get(1).filter(|w| w.rank() == 4) {
            if bound(&w.dims()[1]) != bound(&d[1]) {
                return Err(mismatch(
                    node,
                    format!(
                        "weight expects {} input channels, input has {}",
                        w.dims()[1],
                        d[1]
                    ),
                ));
            }
        }
        Dim::Fixed(filters.ok_or_else(|| bad_attr(node, "filters"))?)
    };
    let (sh, sw) = node.attr_pair("strides").unwrap_or((1, 1));
    let pad = padding(node)?;
    Ok(Shape(vec![
        d[0].clone(),
        channels,
        spatial(node, &d[2], kh, sh, pad)?,
        spatial(node, &d[3], kw, sw, pad)?,
    ]))
}

fn infer_pool(node: &Node, inputs: &[Shape]) -> Result<Shape, ShapeError> {
    let x = first_input(node, inputs)?;
    require_rank(node, x, 4)?;
    let d = x.dims();
    if node.op.starts_with("Global") {
        return Ok(Shape(vec![
            d[0].clone(),
            d[1].clone(),
            Dim::Fixed(1),
            Dim::Fixed(1),
        ]));
    }
    let (kh, kw) = node
        .attr_pair("kernel")
        .ok_or_else(|| bad_attr(node, "kernel"))?;
    let (sh, sw) = node.attr_pair("strides").unwrap_or((kh, kw));
    let pad = padding(node)?;
    Ok(Shape(vec![
        d[0].clone(),
        d[1].clone(),
        spatial(node, &d[2], kh, sh, pad)?,
        spatial(node, &d[3], kw, sw, pad)?,
    ]))
}

/// `(M, K, N)` for a matmul-class node, with leading batch dims folded into M.
pub(crate) fn matmul_dims(
    node: &Node,
    inputs: &[Shape],
) -> Result<(Vec<Dim>, Dim, u64, Dim), ShapeError> {
    let a = first_input(node, inputs)?;
    if a.rank() < 1 {
        return Err(mismatch(node, "matmul input must have rank >= 1".into()));
    }
    let dense = matches!(node.op.as_str(), "FullyConnected" | "Dense") || inputs.len() < 2;
    if dense {
        let k = bound(a.dims().last().expect("rank >= 1"));
        let n = match node.attr_u64("units") {
            Some(u) => u,
            None => {
                let w = inputs.get(1).ok_or_else(|| bad_attr(node, "units"))?;
                if w.rank() != 2 || bound(&w.dims()[1]) != k {
                    return Err(mismatch(
                        node,
                        format!("weight {w} incompatible with input {a}"),
                    ));
                }
                bound(&w.dims()[0])
            }
        };
        let lead = a.dims()[..a.rank() - 1].to_vec();
        let m = lead.last().cloned().unwrap_or(Dim::Fixed(1));
        let batch = lead[..lead.len().saturating_sub(1)].to_vec();
        return Ok((batch, m, k, Dim::Fixed(n)));
    }
    let b = &inputs[1];
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch(
            node,
            format!("matmul operands must have rank >= 2, got {a} and {b}"),
        ));
    }
    let ta = node
        .attrs
        .get("transpose_a")
        .and_then(|v| v.as_bool())
        .unwrap_or(false);
    let tb = node
        .attrs
        .get("transpose_b")
        .and_then(|v| v.as_bool())
        .unwrap_or(false);
    let (ar, br) = (a.rank(), b.rank());
    let (m, ka) = if ta {
        (a.dims()[ar - 1].clone(), a.dims()[ar - 2].clone())
    } else {
        (a.dims()[ar - 2].clone(), a.dims()[ar - 1].clone())
    };
    let (kb, n) = if tb {
        (b.dims()[br - 1].clone(), b.dims()[br - 2].clone())
    } else {
        (b.dims()[br - 2].clone(), b.dims()[br - 1].clone())
    };
    if bound(&ka) != bound(&kb) {
        return Err(mismatch(
            node,
            format!("inner dimensions differ: {a} x {b}"),
        ));
    }
    let batch_a = &a.dims()[..ar - 2];
    let batch_b = &b.dims()[..br - 2];
    let batch = if batch_b.is_empty() {
        batch_a.to_vec()
    } else if batch_a.is_empty() {
        batch_b.to_vec()
    } else if batch_a.len() == batch_b.len()
        && batch_a
            .iter()
            .zip(batch_b)
            .all(|(x, y)| bound(x) == bound(y))
    {
        batch_a.to_vec()
    } else {
        return Err(mismatch(
            node,
            format!("batch dimensions differ: {a} x {b}"),
        ));
    };
    Ok((batch, m, bound(&ka), n))
}

fn infer_matmul(node: &Node, inputs: &[Shape]) -> Result<Shape, ShapeError> {
    let (mut dims, m, _k, n) = matmul_dims(node, inputs)?;
    dims.push(m);
    dims.push(n);
    Ok(Shape(dims))
}

fn broadcast(node: &Node, inputs: &[Shape]) -> Result<Shape, ShapeError> {
    let rank = inputs.iter().map(Shape::rank).max().unwrap_or(0);
    let mut dims = Vec::with_capacity(rank);
    for pos in 0..rank {
        let mut chosen: Option<&Dim> = None;
        let one = Dim::Fixed(1);
        for s in inputs {
            let offset = rank - s.rank();
            let d = if pos < offset {
                &one
            } else {
                &s.dims()[pos - offset]
            };
            chosen = match chosen {
                None => Some(d),
                Some(c) if bound(c) == 1 => Some(d),
                Some(c) if bound(d) == 1 => Some(c),
                Some(c) if bound(c) == bound(d) => Some(if c.is_symbolic() { c } else { d }),
                Some(_) => {
                    let shapes: Vec<String> = inputs.iter().map(|s| s.to_string()).collect();
                    return Err(mismatch(
                        node,
                        format!("cannot broadcast {}", shapes.join(" with ")),
                    ));
                }
            };
        }
        dims.push(chosen.cloned().unwrap_or(Dim::Fixed(1)));
    }
    Ok(Shape(dims))
}

fn infer_reduce(node: &Node, inputs: &[Shape]) -> Result<Shape, ShapeError> {
    let x = first_input(node, inputs)?;
    let axes: Vec<usize> = match node.attr_i64_list("axes") {
        Some(list) => list
            .into_iter()
            .map(|a| normalize_axis(node, a, x.rank()))
            .collect::<Result<_, _>>()?,
        None => (0..x.rank()).collect(),
    };
    let keep = node
        .attrs
        .get("keepdims")
        .and_then(|v| v.as_bool())
        .unwrap_or(true);
    let dims = x
        .dims()
        .iter()
        .enumerate()
        .filter_map(|(i, d)| match (axes.contains(&i), keep) {
            (false, _) => Some(d.clone()),
            (true, true) => Some(Dim::Fixed(1)),
            (true, false) => None,
        })
        .collect();
    Ok(Shape(dims))
}

fn infer_misc(node: &Node, inputs: &[Shape]) -> Result<Option<Vec<Shape>>, ShapeError> {
    let single = |s: Shape| Ok(Some(vec![s]));
    match node.op.as_str() {
        "Identity" | "Cast" => single(first_input(node, inputs)?.clone()),
        "Reshape" => {
            let Some(target) = node.attr_i64_list("shape") else {
                return Ok(None);
            };
            let numel = first_input(node, inputs)?.numel().expect("bounded");
            let known: i64 = target.iter().filter(|&&d| d != -1).product();
            let wildcards = target.iter().filter(|&&d| d == -1).count();
            if wildcards > 1 || known <= 0 || target.iter().any(|&d| d == 0 || d < -1) {
                return Err(bad_attr(node, "shape"));
            }
            let dims: Vec<u64> = target
                .iter()
                .map(|&d| {
                    if d == -1 {
                        numel / known as u64
                    } else {
                        d as u64
                    }
                })
                .collect();
            if dims.iter().product::<u64>() != numel {
                return Err(mismatch(
                    node,
                    format!("cannot reshape {numel} elements into {target:?}"),
                ));
            }
            single(Shape::fixed(&dims))
        }
        "Transpose" => {
            let x = first_input(node, inputs)?;
            let perm: Vec<usize> = match node.attr_i64_list("perm") {
                Some(p) => p
                    .into_iter()
                    .map(|a| normalize_axis(node, a, x.rank()))
                    .collect::<Result<_, _>>()?,
                None => (0..x.rank()).rev().collect(),
            };
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(bad_attr(node, "perm"));
            }
            single(Shape(perm.iter().map(|&p| x.dims()[p].clone()).collect()))
        }
        "Concat" => {
            let x = first_input(node, inputs)?;
            let axis = normalize_axis(
                node,
                node.attrs.get("axis").and_then(|v| v.as_i64()).unwrap_or(0),
                x.rank(),
            )?;
            let mut total = 0;
            for s in inputs {
                if s.rank() != x.rank()
                    || (0..x.rank())
                        .any(|i| i != axis && bound(&s.dims()[i]) != bound(&x.dims()[i]))
                {
                    return Err(mismatch(
                        node,
                        format!("concat operands {x} and {s} disagree off-axis"),
                    ));
                }
                total += bound(&s.dims()[axis]);
            }
            let mut dims = x.dims().to_vec();
            dims[axis] = Dim::Fixed(total);
            single(Shape(dims))
        }
        "Split" => {
            let x = first_input(node, inputs)?;
            let axis = normalize_axis(
                node,
                node.attrs.get("axis").and_then(|v| v.as_i64()).unwrap_or(0),
                x.rank(),
            )?;
            let extent = bound(&x.dims()[axis]);
            let parts = node.outputs.len() as u64;
            let sizes: Vec<u64> = match node.attr_i64_list("split") {
                Some(s) => s.into_iter().map(|v| v.max(0) as u64).collect(),
                None if parts > 0 && extent % parts == 0 => vec![extent / parts; parts as usize],
                None => return Err(bad_attr(node, "split")),
            };
            if sizes.len() as u64 != parts || sizes.iter().sum::<u64>() != extent {
                return Err(mismatch(
                    node,
                    format!("split sizes {sizes:?} do not cover extent {extent}"),
                ));
            }
            Ok(Some(
                sizes
                    .into_iter()
                    .map(|sz| {
                        let mut dims = x.dims().to_vec();
                        dims[axis] = Dim::Fixed(sz);
                        Shape(dims)
                    })
                    .collect(),
            ))
        }
        "Unsqueeze" => {
            let x = first_input(node, inputs)?;
            let axes = node
                .attr_i64_list("axes")
                .ok_or_else(|| bad_attr(node, "axes"))?;
            let rank = x.rank() + axes.len();
            let mut axes: Vec<usize> = axes
                .into_iter()
                .map(|a| normalize_axis(node, a, rank))
                .collect::<Result<_, _>>()?;
            axes.sort_unstable();
            let mut src = x.dims().iter();
            let dims = (0..rank)
                .map(|i| {
                    if axes.contains(&i) {
                        Dim::Fixed(1)
                    } else {
                        src.next().cloned().unwrap_or(Dim::Fixed(1))
                    }
                })
                .collect();
            single(Shape(dims))
        }
        "Squeeze" => {
            let x = first_input(node, inputs)?;
            let axes: Option<Vec<usize>> = match node.attr_i64_list("axes") {
                Some(list) => Some(
                    list.into_iter()
                        .map(|a| normalize_axis(node, a, x.rank()))
                        .collect::<Result<_, _>>()?,
                ),
                None => None,
            };
            let dims = x
                .dims()
                .iter()
                .enumerate()
                .filter(|(i, d)| match &axes {
                    Some(a) => !a.contains(i),
                    None => bound(d) != 1,
                })
                .map(|(_, d)| d.clone())
                .collect();
            single(Shape(dims))
        }
        "Gather" => {
            if inputs.len() < 2 {
                return Ok(None);
            }
            let (data, idx) = (&inputs[0], &inputs[1]);
            let axis = normalize_axis(
                node,
                node.attrs.get("axis").and_then(|v| v.as_i64()).unwrap_or(0),
                data.rank(),
            )?;
            let mut dims = data.dims()[..axis].to_vec();
            dims.extend(idx.dims().iter().cloned());
            dims.extend(data.dims()[axis + 1..].iter().cloned());
            single(Shape(dims))
        }
        _ => Ok(None),
    }
}

fn infer_node(node: &Node, inputs: &[Shape]) -> Result<Option<Vec<Shape>>, ShapeError> {
    let single = |s: Result<Shape, ShapeError>| s.map(|s| Some(vec![s]));
    match node.class {
        OpClass::Conv => single(infer_conv(node, inputs)),
        OpClass::Pooling => single(infer_pool(node, inputs)),
        OpClass::MatMul => single(infer_matmul(node, inputs)),
        OpClass::Elementwise => {
            if inputs.is_empty() {
                Ok(None)
            } else {
                single(broadcast(node, inputs))
            }
        }
        OpClass::Reduce => single(infer_reduce(node, inputs)),
        OpClass::Misc => infer_misc(node, inputs),
        OpClass::Delegate => Ok(None),
    }
}
