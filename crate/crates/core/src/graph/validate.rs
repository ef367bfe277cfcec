//! Structural checks run before any planning stage.

use serde::Serialize;

use super::{Dim, Graph, OpClass, Producer};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub passed: bool,
    pub findings: Vec<String>,
}

impl CheckResult {
    fn from_findings(findings: Vec<String>) -> Self {
        CheckResult {
            passed: findings.is_empty(),
            findings,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub acyclic: CheckResult,
    pub references: CheckResult,
    pub shape_bounds: CheckResult,
    /// Non-fatal observations (e.g. unknown op kinds).
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.acyclic.passed && self.references.passed && self.shape_bounds.passed
    }

    pub fn failures(&self) -> Vec<String> {
        [&self.acyclic, &self.references, &self.shape_bounds]
            .iter()
            .flat_map(|c| c.findings.iter().cloned())
            .collect()
    }
}

pub fn validate(g: &Graph) -> ValidationReport {
    let adj = g.adjacency();
    let acyclic = match g.topo_order(&adj) {
        Ok(_) => CheckResult::from_findings(Vec::new()),
        Err(e) => CheckResult::from_findings(vec![e.to_string()]),
    };

    let mut refs = Vec::new();
    for t in g.tensors() {
        if t.producer == Producer::Missing {
            refs.push(format!(
                "tensor '{}' has no producer and is neither a graph input nor a constant",
                t.name
            ));
        }
    }
    for node in g.nodes() {
        if node.outputs.is_empty() {
            refs.push(format!("node '{}' produces no tensors", node.name));
        }
        if !node.is_delegate() && !node.devices.cpu {
            refs.push(format!("node '{}' lacks CPU fallback", node.name));
        }
    }

    let mut shapes = Vec::new();
    for t in g.tensors() {
        let Some(shape) = &t.shape else { continue };
        for (axis, d) in shape.dims().iter().enumerate() {
            match d {
                Dim::Fixed(0) => shapes.push(format!(
                    "tensor '{}' axis {axis}: dimension must be >= 1",
                    t.name
                )),
                Dim::Sym { name, max: None } => shapes.push(format!(
                    "tensor '{}' axis {axis}: symbolic dim '{name}' has no max bound",
                    t.name
                )),
                Dim::Sym { name, max: Some(0) } => shapes.push(format!(
                    "tensor '{}' axis {axis}: symbolic dim '{name}' max bound must be >= 1",
                    t.name
                )),
                _ => {}
            }
        }
    }
    for &i in g.inputs() {
        if g.tensor(i).shape.is_none() {
            shapes.push(format!(
                "graph input '{}' has no declared shape",
                g.tensor(i).name
            ));
        }
    }

    let mut warnings = Vec::new();
    for node in g.nodes() {
        if node.class == OpClass::Misc && !node.op_known {
            warnings.push(format!(
                "node '{}': unknown op '{}' classified as Misc",
                node.name, node.op
            ));
        }
    }

    ValidationReport {
        acyclic,
        references: CheckResult::from_findings(refs),
        shape_bounds: CheckResult::from_findings(shapes),
        warnings,
    }
}
