//! Small CNN computation graphs: load, validate, save, and shape inference.
//!
//! A model on disk is a JSON manifest plus sibling tensor blob files. The
//! manifest lists nodes in topological order; every referenced id must be
//! defined earlier (the reserved id `input` names the graph input), so a
//! well-formed manifest is a DAG by construction.

use crate::error::{Error, Result};
use crate::tensor::{read_blob, write_blob, Blob, Shape, TensorF};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Reserved id naming the graph input inside `inputs` lists.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Conv2d {
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    },
    FullyConnected,
    BatchNorm {
        epsilon: f32,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Add,
    Flatten,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Conv2d { .. } => "conv2d",
            NodeKind::FullyConnected => "fc",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool { .. } => "max_pool",
            NodeKind::AvgPool { .. } => "avg_pool",
            NodeKind::GlobalAvgPool => "global_avg_pool",
            NodeKind::Add => "add",
            NodeKind::Flatten => "flatten",
        }
    }

    /// Conv2d and FullyConnected carry weights and take part in
    /// quantization; everything else is parameter-free or foldable.
    pub fn is_weighted(&self) -> bool {
        matches!(self, NodeKind::Conv2d { .. } | NodeKind::FullyConnected)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
    /// Role -> parameter tensor name. Roles: `weight`/`bias` for conv and
    /// fc; `gamma`/`beta`/`mean`/`var` for batch norm.
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    pub input_shape: Shape,
    pub nodes: Vec<Node>,
    pub params: BTreeMap<String, TensorF>,
    pub output: String,
}

impl Graph {
    /// Structural validation plus full shape propagation. Called by
    /// [`load_model`]; call it again after constructing graphs in code.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for node in &self.nodes {
            if node.id == INPUT_ID {
                return Err(Error::GraphInvalid {
                    context: format!("node id `{INPUT_ID}` is reserved"),
                });
            }
            if !seen.insert(&node.id) {
                return Err(Error::GraphInvalid {
                    context: format!("duplicate node id {}", node.id),
                });
            }
            let arity = if matches!(node.kind, NodeKind::Add) { 2 } else { 1 };
            if node.inputs.len() != arity {
                return Err(Error::GraphInvalid {
                    context: format!(
                        "node {} ({}) expects {arity} input(s), got {}",
                        node.id,
                        node.kind.name(),
                        node.inputs.len()
                    ),
                });
            }
            for input in &node.inputs {
                if input != INPUT_ID && !seen.contains(input.as_str()) {
                    return Err(Error::DanglingRef {
                        node: node.id.clone(),
                        target: input.clone(),
                    });
                }
            }
            self.validate_node_params(node)?;
        }
        if self.output != INPUT_ID && !seen.contains(self.output.as_str()) {
            return Err(Error::DanglingRef {
                node: "<output>".into(),
                target: self.output.clone(),
            });
        }
        // Shape propagation catches everything structural checks cannot.
        self.infer_shapes()?;
        Ok(())
    }

    /// Parameter tensor bound to `role` on `node`.
    pub fn param_tensor(&self, node: &Node, role: &str) -> Result<&TensorF> {
        let name = node.params.get(role).ok_or_else(|| Error::GraphInvalid {
            context: format!("node {} is missing required param `{role}`", node.id),
        })?;
        self.params.get(name).ok_or_else(|| Error::DanglingRef {
            node: node.id.clone(),
            target: name.clone(),
        })
    }

    /// Like [`Graph::param_tensor`] but `None` when the role is absent.
    pub fn opt_param_tensor(&self, node: &Node, role: &str) -> Result<Option<&TensorF>> {
        match node.params.get(role) {
            None => Ok(None),
            Some(name) => self
                .params
                .get(name)
                .map(Some)
                .ok_or_else(|| Error::DanglingRef {
                    node: node.id.clone(),
                    target: name.clone(),
                }),
        }
    }

    fn validate_node_params(&self, node: &Node) -> Result<()> {
        match &node.kind {
            NodeKind::Conv2d { groups, .. } => {
                if *groups != 1 {
                    return Err(Error::GraphInvalid {
                        context: format!("node {}: only groups=1 is supported", node.id),
                    });
                }
                let w = self.param_tensor(node, "weight")?;
                if w.shape().rank() != 4 {
                    return Err(Error::GraphInvalid {
                        context: format!("node {}: conv weight must be OIHW rank-4", node.id),
                    });
                }
                if let Some(name) = node.params.get("bias") {
                    let b = self.params.get(name).ok_or_else(|| Error::DanglingRef {
                        node: node.id.clone(),
                        target: name.clone(),
                    })?;
                    let o = w.shape().dims()[0];
                    if b.shape().dims() != [o] {
                        return Err(Error::GraphInvalid {
                            context: format!(
                                "node {}: bias shape {} does not match {o} output channels",
                                node.id,
                                b.shape()
                            ),
                        });
                    }
                }
            }
            NodeKind::FullyConnected => {
                let w = self.param_tensor(node, "weight")?;
                if w.shape().rank() != 2 {
                    return Err(Error::GraphInvalid {
                        context: format!("node {}: fc weight must be rank-2 [out, in]", node.id),
                    });
                }
                if let Some(name) = node.params.get("bias") {
                    let b = self.params.get(name).ok_or_else(|| Error::DanglingRef {
                        node: node.id.clone(),
                        target: name.clone(),
                    })?;
                    let o = w.shape().dims()[0];
                    if b.shape().dims() != [o] {
                        return Err(Error::GraphInvalid {
                            context: format!("node {}: fc bias length must be {o}", node.id),
                        });
                    }
                }
            }
            NodeKind::BatchNorm { epsilon } => {
                if !(*epsilon > 0.0) {
                    return Err(Error::GraphInvalid {
                        context: format!("node {}: epsilon must be > 0", node.id),
                    });
                }
                let g = self.param_tensor(node, "gamma")?.shape().len();
                for role in ["beta", "mean", "var"] {
                    let t = self.param_tensor(node, role)?;
                    if t.shape().len() != g {
                        return Err(Error::GraphInvalid {
                            context: format!(
                                "node {}: `{role}` length {} != gamma length {g}",
                                node.id,
                                t.shape().len()
                            ),
                        });
                    }
                }
                if self
                    .param_tensor(node, "var")?
                    .data()
                    .iter()
                    .any(|&v| v < 0.0)
                {
                    return Err(Error::GraphInvalid {
                        context: format!("node {}: variance must be >= 0", node.id),
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Ids of nodes consuming each node's output (the graph output does not
    /// count as a consumer).
    pub fn consumers(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for node in &self.nodes {
            for input in &node.inputs {
                map.entry(input.as_str()).or_default().push(node.id.as_str());
            }
        }
        map
    }

    /// Output shape of every node given the graph's declared input shape.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, Shape>> {
        shape_inference(self, &self.input_shape)
    }
}

fn pool_extent(input: usize, k: usize, stride: usize, id: &str) -> Result<usize> {
    if k == 0 || stride == 0 || k > input {
        return Err(Error::GraphInvalid {
            context: format!("node {id}: pool window {k}/stride {stride} invalid for extent {input}"),
        });
    }
    Ok((input - k) / stride + 1)
}

/// Propagate shapes through the graph. Conv and pool arithmetic is
/// `floor((in + 2*pad - k) / stride) + 1`; any intermediate dim < 1 is an
/// error.
pub fn shape_inference(graph: &Graph, input_shape: &Shape) -> Result<BTreeMap<String, Shape>> {
    if input_shape != &graph.input_shape {
        return Err(Error::ShapeMismatch {
            context: format!(
                "input shape {input_shape} does not match graph input spec {}",
                graph.input_shape
            ),
        });
    }
    let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
    shapes.insert(INPUT_ID.to_string(), input_shape.clone());

    for node in &graph.nodes {
        let in_shape = |idx: usize| -> Result<&Shape> {
            shapes
                .get(node.inputs[idx].as_str())
                .ok_or_else(|| Error::DanglingRef {
                    node: node.id.clone(),
                    target: node.inputs[idx].clone(),
                })
        };
        let out = match &node.kind {
            NodeKind::Conv2d { stride, pad, .. } => {
                let (n, c, h, w) = in_shape(0)?.nchw()?;
                let wt = graph.param_tensor(node, "weight")?;
                let (o, wc, kh, kw) = wt.shape().nchw()?;
                if wc != c {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "node {}: weight expects {wc} input channels, input has {c}",
                            node.id
                        ),
                    });
                }
                let padded_h = h + 2 * pad.0;
                let padded_w = w + 2 * pad.1;
                if padded_h < kh || padded_w < kw {
                    return Err(Error::ShapeMismatch {
                        context: format!("node {}: kernel larger than padded input", node.id),
                    });
                }
                let oh = (padded_h - kh) / stride.0 + 1;
                let ow = (padded_w - kw) / stride.1 + 1;
                Shape::new(vec![n, o, oh, ow])?
            }
            NodeKind::FullyConnected => {
                let (n, f) = in_shape(0)?.rc()?;
                let wt = graph.param_tensor(node, "weight")?;
                let (o, wf) = wt.shape().rc()?;
                if wf != f {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "node {}: fc weight expects {wf} features, input has {f}",
                            node.id
                        ),
                    });
                }
                Shape::new(vec![n, o])?
            }
            NodeKind::BatchNorm { .. } => {
                let shape = in_shape(0)?.clone();
                let c = match shape.dims() {
                    [_, c, _, _] => *c,
                    [_, c] => *c,
                    other => {
                        return Err(Error::ShapeMismatch {
                            context: format!(
                                "node {}: batch norm needs rank-2 or rank-4 input, got {other:?}",
                                node.id
                            ),
                        })
                    }
                };
                let g = graph.param_tensor(node, "gamma")?.shape().len();
                if g != c {
                    return Err(Error::ShapeMismatch {
                        context: format!(
                            "node {}: batch norm has {g} channels, input has {c}",
                            node.id
                        ),
                    });
                }
                shape
            }
            NodeKind::Relu => in_shape(0)?.clone(),
            NodeKind::MaxPool { k, stride } | NodeKind::AvgPool { k, stride } => {
                let (n, c, h, w) = in_shape(0)?.nchw()?;
                let oh = pool_extent(h, *k, *stride, &node.id)?;
                let ow = pool_extent(w, *k, *stride, &node.id)?;
                Shape::new(vec![n, c, oh, ow])?
            }
            NodeKind::GlobalAvgPool => {
                let (n, c, _, _) = in_shape(0)?.nchw()?;
                Shape::new(vec![n, c, 1, 1])?
            }
            NodeKind::Add => {
                let a = in_shape(0)?.clone();
                let b = in_shape(1)?;
                if &a != b {
                    return Err(Error::ShapeMismatch {
                        context: format!("node {}: add operands {a} vs {b}", node.id),
                    });
                }
                a
            }
            NodeKind::Flatten => {
                let dims = in_shape(0)?.dims();
                let n = dims[0];
                let rest: usize = dims[1..].iter().product();
                Shape::new(vec![n, rest])?
            }
        };
        shapes.insert(node.id.clone(), out);
    }
    Ok(shapes)
}

// ---------------------------------------------------------------------------
// Manifest serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    name: String,
    input: InputSpec,
    nodes: Vec<NodeDoc>,
    params: Vec<ParamDoc>,
    output: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct InputSpec {
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "AttrsDoc::is_empty")]
    attrs: AttrsDoc,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct AttrsDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

impl AttrsDoc {
    fn is_empty(&self) -> bool {
        self.stride.is_none()
            && self.pad.is_none()
            && self.groups.is_none()
            && self.epsilon.is_none()
            && self.k.is_none()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamDoc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    file: String,
}

fn pair(v: &Option<Vec<usize>>, default: usize, what: &str, id: &str) -> Result<(usize, usize)> {
    match v {
        None => Ok((default, default)),
        Some(vals) => match vals.as_slice() {
            [a] => Ok((*a, *a)),
            [a, b] => Ok((*a, *b)),
            _ => Err(Error::Manifest {
                context: format!("node {id}: `{what}` must have 1 or 2 entries"),
            }),
        },
    }
}

fn kind_from_doc(doc: &NodeDoc) -> Result<NodeKind> {
    let a = &doc.attrs;
    match doc.kind.as_str() {
        "conv2d" => Ok(NodeKind::Conv2d {
            stride: pair(&a.stride, 1, "stride", &doc.id)?,
            pad: pair(&a.pad, 0, "pad", &doc.id)?,
            groups: a.groups.unwrap_or(1),
        }),
        "fc" => Ok(NodeKind::FullyConnected),
        // Eq. 16-17 need epsilon explicitly; default 1e-5 when absent.
        "batch_norm" => Ok(NodeKind::BatchNorm {
            epsilon: a.epsilon.unwrap_or(1e-5),
        }),
        "relu" => Ok(NodeKind::Relu),
        "max_pool" | "avg_pool" => {
            let k = a.k.ok_or_else(|| Error::Manifest {
                context: format!("node {}: pool requires attr `k`", doc.id),
            })?;
            let stride = a.stride.as_ref().map_or(Ok((k, k)), |_| pair(&a.stride, k, "stride", &doc.id))?.0;
            if doc.kind == "max_pool" {
                Ok(NodeKind::MaxPool { k, stride })
            } else {
                Ok(NodeKind::AvgPool { k, stride })
            }
        }
        "global_avg_pool" => Ok(NodeKind::GlobalAvgPool),
        "add" => Ok(NodeKind::Add),
        "flatten" => Ok(NodeKind::Flatten),
        other => Err(Error::Manifest {
            context: format!("node {}: unknown kind `{other}`", doc.id),
        }),
    }
}

fn doc_from_kind(kind: &NodeKind) -> AttrsDoc {
    let mut attrs = AttrsDoc::default();
    match kind {
        NodeKind::Conv2d { stride, pad, groups } => {
            attrs.stride = Some(vec![stride.0, stride.1]);
            attrs.pad = Some(vec![pad.0, pad.1]);
            attrs.groups = Some(*groups);
        }
        NodeKind::BatchNorm { epsilon } => attrs.epsilon = Some(*epsilon),
        NodeKind::MaxPool { k, stride } | NodeKind::AvgPool { k, stride } => {
            attrs.k = Some(*k);
            attrs.stride = Some(vec![*stride]);
        }
        _ => {}
    }
    attrs
}

/// Load a model from its manifest path; blobs are resolved relative to the
/// manifest's directory. The returned graph is fully validated with all
/// shapes propagated.
pub fn load_model(path: &Path) -> Result<Graph> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        context: format!("{}: {e}", path.display()),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut params: BTreeMap<String, TensorF> = BTreeMap::new();
    for p in &doc.params {
        if p.dtype != "f32" {
            return Err(Error::Manifest {
                context: format!("param {}: model params must be f32, got {}", p.name, p.dtype),
            });
        }
        let blob_path = dir.join(&p.file);
        if !blob_path.is_file() {
            return Err(Error::MissingBlob {
                name: p.name.clone(),
                blob: p.file.clone(),
            });
        }
        let declared = Shape::new(p.shape.clone())?;
        let tensor = match read_blob(&blob_path)? {
            Blob::F32(shape, data) => {
                if shape != declared {
                    return Err(Error::Manifest {
                        context: format!(
                            "param {}: manifest declares shape {declared}, blob has {shape}",
                            p.name
                        ),
                    });
                }
                TensorF::new(shape, data)?
            }
            other => {
                return Err(Error::Manifest {
                    context: format!(
                        "param {}: expected f32 blob, found dtype code {}",
                        p.name,
                        other.dtype_code()
                    ),
                })
            }
        };
        if params.insert(p.name.clone(), tensor).is_some() {
            return Err(Error::Manifest {
                context: format!("duplicate param name {}", p.name),
            });
        }
    }

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in &doc.nodes {
        nodes.push(Node {
            id: nd.id.clone(),
            kind: kind_from_doc(nd)?,
            inputs: nd.inputs.clone(),
            params: nd.params.clone(),
        });
    }

    let graph = Graph {
        name: doc.name,
        input_shape: Shape::new(doc.input.shape)?,
        nodes,
        params,
        output: doc.output,
    };
    graph.validate()?;
    Ok(graph)
}

/// Write the manifest to `path` and one blob per parameter tensor next to
/// it, such that `load_model(path)` reproduces the graph exactly.
pub fn save_model(graph: &Graph, path: &Path) -> Result<()> {
    graph.validate()?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut param_docs = Vec::new();
    for (name, tensor) in &graph.params {
        let file = format!("{name}.bin");
        write_blob(
            &dir.join(&file),
            &Blob::F32(tensor.shape().clone(), tensor.data().to_vec()),
        )?;
        param_docs.push(ParamDoc {
            name: name.clone(),
            dtype: "f32".into(),
            shape: tensor.shape().dims().to_vec(),
            file,
        });
    }

    let doc = ManifestDoc {
        name: graph.name.clone(),
        input: InputSpec {
            shape: graph.input_shape.dims().to_vec(),
        },
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeDoc {
                id: n.id.clone(),
                kind: n.kind.name().into(),
                attrs: doc_from_kind(&n.kind),
                inputs: n.inputs.clone(),
                params: n.params.clone(),
            })
            .collect(),
        params: param_docs,
        output: graph.output.clone(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_node(id: &str, input: &str, weight: &str, bias: Option<&str>) -> Node {
        let mut params = BTreeMap::new();
        params.insert("weight".to_string(), weight.to_string());
        if let Some(b) = bias {
            params.insert("bias".to_string(), b.to_string());
        }
        Node {
            id: id.into(),
            kind: NodeKind::Conv2d {
                stride: (1, 1),
                pad: (0, 0),
                groups: 1,
            },
            inputs: vec![input.into()],
            params,
        }
    }

    fn minimal_graph() -> Graph {
        let mut params = BTreeMap::new();
        params.insert(
            "c.w".to_string(),
            TensorF::new(Shape::new(vec![1, 1, 2, 2]).unwrap(), vec![1.0; 4]).unwrap(),
        );
        Graph {
            name: "mini".into(),
            input_shape: Shape::new(vec![1, 1, 3, 3]).unwrap(),
            nodes: vec![
                conv_node("c", INPUT_ID, "c.w", None),
                Node {
                    id: "r".into(),
                    kind: NodeKind::Relu,
                    inputs: vec!["c".into()],
                    params: BTreeMap::new(),
                },
            ],
            params,
            output: "r".into(),
        }
    }

    #[test]
    fn minimal_two_node_graph_validates() {
        let g = minimal_graph();
        g.validate().unwrap();
        assert_eq!(g.nodes.len(), 2);
    }

    #[test]
    fn paper_geometry_3x3_input_2x2_conv_gives_2x2() {
        let g = minimal_graph();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes["c"].dims(), [1, 1, 2, 2]);
    }

    #[test]
    fn global_avg_pool_collapses_spatial_dims() {
        let mut g = minimal_graph();
        g.nodes.push(Node {
            id: "gap".into(),
            kind: NodeKind::GlobalAvgPool,
            inputs: vec!["r".into()],
            params: BTreeMap::new(),
        });
        g.output = "gap".into();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes["gap"].dims(), [1, 1, 1, 1]);
    }

    #[test]
    fn forward_reference_is_rejected() {
        let mut g = minimal_graph();
        g.nodes.swap(0, 1);
        let err = g.validate().unwrap_err();
        assert_eq!(err.code(), "graph/dangling-ref");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let mut g = minimal_graph();
        let dup = g.nodes[1].clone();
        g.nodes.push(dup);
        assert!(g.validate().is_err());
    }

    #[test]
    fn load_reports_missing_blob_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{
            "name": "broken",
            "input": {"shape": [1, 1, 3, 3]},
            "nodes": [{"id": "c", "kind": "conv2d", "inputs": ["input"], "params": {"weight": "c.w"}}],
            "params": [{"name": "c.w", "dtype": "f32", "shape": [1, 1, 2, 2], "file": "c.w.bin"}],
            "output": "c"
        }"#;
        let path = dir.path().join("model.json");
        std::fs::write(&path, manifest).unwrap();
        let err = load_model(&path).unwrap_err();
        assert_eq!(err.code(), "graph/missing-blob");
        assert!(err.to_string().contains("c.w.bin"));
    }

    #[test]
    fn save_then_load_is_identity() {
        let g = minimal_graph();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&g, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let g = minimal_graph();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a/model.json");
        save_model(&g, &p1).unwrap();
        let back = load_model(&p1).unwrap();
        let p2 = dir.path().join("b/model.json");
        save_model(&back, &p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap()
        );
    }
}
