//! JSON wire format for graphs.
//!
//! ```json
//! {"tensors": [{"id": "x", "dtype": "f32", "shape": [1, {"sym": "seq", "max": 128}]}],
//!  "nodes":   [{"id": "n0", "op": "Relu", "inputs": ["x"], "outputs": ["y"],
//!               "attrs": {}, "device_support": ["cpu"], "control_flow": false}],
//!  "inputs": ["x"], "outputs": ["y"]}
//! ```
//!
//! `shape` may be omitted on produced tensors (it is then inferred) and
//! `"constant": true` marks static weights that need no producer.

use serde::{Deserialize, Serialize};

use super::{Attrs, DType, Device, Dim, Graph, GraphError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimDoc {
    Fixed(u64),
    Sym {
        sym: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<u64>,
    },
}

impl DimDoc {
    pub fn to_dim(&self) -> Dim {
        match self {
            DimDoc::Fixed(v) => Dim::Fixed(*v),
            DimDoc::Sym { sym, max } => Dim::Sym {
                name: sym.clone(),
                max: *max,
            },
        }
    }

    pub fn from_dim(d: &Dim) -> Self {
        match d {
            Dim::Fixed(v) => DimDoc::Fixed(*v),
            Dim::Sym { name, max } => DimDoc::Sym {
                sym: name.clone(),
                max: *max,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDoc {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<DimDoc>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub op: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    #[serde(default)]
    pub attrs: Attrs,
    #[serde(default)]
    pub device_support: Vec<Device>,
    #[serde(default)]
    pub control_flow: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub tensors: Vec<TensorDoc>,
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl GraphDoc {
    pub fn tensor(&mut self, id: &str, dtype: DType, shape: &[u64]) -> &mut TensorDoc {
        self.push_tensor(
            id,
            dtype,
            Some(shape.iter().map(|&d| DimDoc::Fixed(d)).collect()),
        )
    }

    pub fn tensor_dims(&mut self, id: &str, dtype: DType, dims: Vec<DimDoc>) -> &mut TensorDoc {
        self.push_tensor(id, dtype, Some(dims))
    }

    pub fn tensor_unshaped(&mut self, id: &str, dtype: DType) -> &mut TensorDoc {
        self.push_tensor(id, dtype, None)
    }

    fn push_tensor(
        &mut self,
        id: &str,
        dtype: DType,
        shape: Option<Vec<DimDoc>>,
    ) -> &mut TensorDoc {
        self.tensors.push(TensorDoc {
            id: id.to_string(),
            dtype: Some(dtype),
            shape,
            constant: false,
        });
        self.tensors.last_mut().expect("just pushed")
    }

    pub fn node(&mut self, id: &str, op: &str, inputs: &[&str], outputs: &[&str]) -> &mut NodeDoc {
        self.nodes.push(NodeDoc {
            id: id.to_string(),
            op: op.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            attrs: Attrs::new(),
            device_support: vec![Device::Cpu],
            control_flow: false,
        });
        self.nodes.last_mut().expect("just pushed")
    }
}

impl NodeDoc {
    pub fn attr(&mut self, key: &str, value: serde_json::Value) -> &mut Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn on_accelerator(&mut self) -> &mut Self {
        if !self.device_support.contains(&Device::Accelerator) {
            self.device_support.push(Device::Accelerator);
        }
        self
    }

    pub fn control_flow(&mut self) -> &mut Self {
        self.control_flow = true;
        self
    }
}

/// Parses the JSON graph format and resolves every tensor reference.
pub fn parse_graph(raw: &[u8]) -> Result<Graph, GraphError> {
    let doc: GraphDoc = serde_json::from_slice(raw).map_err(|e| GraphError::Json(e.to_string()))?;
    Graph::from_doc(&doc)
}
