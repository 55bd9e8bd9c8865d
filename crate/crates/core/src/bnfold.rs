//! Fold batch-norm nodes into the preceding conv/fc as a graph-to-graph
//! pass, run before quantization:
//!
//! ```text
//! w_fold = w * gamma / sqrt(var + eps)        (per output channel)
//! b_fold = beta + (b - mu) * gamma / sqrt(var + eps)
//! ```
//!
//! A conv without bias is treated as b = 0. Only this naive strategy is
//! implemented; nothing here retrains or re-estimates statistics.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeKind};
use crate::tensor::{Shape, TensorF};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    /// Any unfoldable batch-norm node is an error.
    Strict,
    /// Unfoldable batch-norm nodes are left in place and reported.
    Permissive,
}

/// Per-channel batch-norm statistics pulled out of a node.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mu: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn from_node(graph: &Graph, node: &Node) -> Result<Self> {
        let NodeKind::BatchNorm { epsilon } = node.kind else {
            return Err(Error::GraphInvalid {
                context: format!("node {} is not a batch norm", node.id),
            });
        };
        Ok(BnParams {
            gamma: graph.param_tensor(node, "gamma")?.data().to_vec(),
            beta: graph.param_tensor(node, "beta")?.data().to_vec(),
            mu: graph.param_tensor(node, "mean")?.data().to_vec(),
            var: graph.param_tensor(node, "var")?.data().to_vec(),
            eps: epsilon,
        })
    }

    /// gamma / sqrt(var + eps) per channel.
    pub fn factors(&self) -> Vec<f32> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldWarning {
    pub node: String,
    pub reason: String,
}

#[derive(Debug)]
pub struct FoldOutcome {
    pub graph: Graph,
    pub folded: usize,
    pub warnings: Vec<FoldWarning>,
}

fn unfoldable_reason(graph: &Graph, bn: &Node, consumers: &BTreeMap<&str, Vec<&str>>) -> Option<String> {
    let producer_id = &bn.inputs[0];
    let Some(producer) = graph.node(producer_id) else {
        return Some(format!("input `{producer_id}` is the graph input, not a conv/fc"));
    };
    if !producer.kind.is_weighted() {
        return Some(format!(
            "input `{producer_id}` is {}, not a conv/fc",
            producer.kind.name()
        ));
    }
    let fan_out = consumers.get(producer_id.as_str()).map_or(0, |v| v.len());
    if fan_out > 1 {
        return Some(format!(
            "producer `{producer_id}` feeds {fan_out} consumers, cannot fold"
        ));
    }
    if graph.output == *producer_id {
        return Some(format!("producer `{producer_id}` is also the graph output"));
    }
    None
}

/// Fold every (conv|fc, batch_norm) pair into a single conv/fc. Returns a
/// new graph; the input graph is untouched. Idempotent: running it twice
/// changes nothing on the second pass.
pub fn fold_bn(graph: &Graph, mode: FoldMode) -> Result<FoldOutcome> {
    let consumers = graph.consumers();

    // bn node id -> producer id, for foldable pairs.
    let mut foldable: BTreeMap<String, String> = BTreeMap::new();
    let mut warnings = Vec::new();
    for node in &graph.nodes {
        if !matches!(node.kind, NodeKind::BatchNorm { .. }) {
            continue;
        }
        match unfoldable_reason(graph, node, &consumers) {
            None => {
                foldable.insert(node.id.clone(), node.inputs[0].clone());
            }
            Some(reason) => match mode {
                FoldMode::Strict => {
                    return Err(Error::UnfoldableBn {
                        node: node.id.clone(),
                        context: reason,
                    })
                }
                FoldMode::Permissive => warnings.push(FoldWarning {
                    node: node.id.clone(),
                    reason,
                }),
            },
        }
    }

    let mut params = graph.params.clone();
    let mut nodes: Vec<Node> = Vec::with_capacity(graph.nodes.len());
    // bn id -> id its consumers should be rewired to.
    let mut rewire: BTreeMap<String, String> = BTreeMap::new();
    let mut folded = 0usize;

    for node in &graph.nodes {
        if let Some(producer_id) = foldable.get(&node.id) {
            let bn = BnParams::from_node(graph, node)?;
            let producer = graph.node(producer_id).expect("checked foldable");
            let weight_name = producer.params["weight"].clone();
            let weight = &graph.params[&weight_name];
            let out_channels = weight.shape().dims()[0];
            if bn.gamma.len() != out_channels {
                return Err(Error::UnfoldableBn {
                    node: node.id.clone(),
                    context: format!(
                        "batch norm has {} channels, producer has {out_channels}",
                        bn.gamma.len()
                    ),
                });
            }
            let factors = bn.factors();
            let span = weight.shape().len() / out_channels;
            let mut w_fold = weight.data().to_vec();
            for (c, chunk) in w_fold.chunks_mut(span).enumerate() {
                for v in chunk.iter_mut() {
                    *v *= factors[c];
                }
            }
            let bias: Vec<f32> = match producer.params.get("bias") {
                Some(name) => graph.params[name].data().to_vec(),
                None => vec![0.0; out_channels],
            };
            let b_fold: Vec<f32> = (0..out_channels)
                .map(|c| bn.beta[c] + (bias[c] - bn.mu[c]) * factors[c])
                .collect();

            params.insert(
                weight_name.clone(),
                TensorF::new(weight.shape().clone(), w_fold)?,
            );
            let bias_name = match producer.params.get("bias") {
                Some(name) => name.clone(),
                None => {
                    let mut name = format!("{producer_id}.b_fold");
                    while params.contains_key(&name) {
                        name.push('_');
                    }
                    name
                }
            };
            params.insert(
                bias_name.clone(),
                TensorF::new(Shape::new(vec![out_channels])?, b_fold)?,
            );

            // Rewrite the already-emitted producer node to carry the bias.
            let emitted = nodes
                .iter_mut()
                .find(|n| &n.id == producer_id)
                .expect("producer precedes its bn in topological order");
            emitted.params.insert("bias".into(), bias_name);

            rewire.insert(node.id.clone(), producer_id.clone());
            folded += 1;
        } else {
            let mut n = node.clone();
            for input in n.inputs.iter_mut() {
                if let Some(target) = rewire.get(input) {
                    *input = target.clone();
                }
            }
            nodes.push(n);
        }
    }

    let mut output = graph.output.clone();
    if let Some(target) = rewire.get(&output) {
        output = target.clone();
    }

    // Drop parameters of removed batch-norm nodes.
    let used: std::collections::BTreeSet<&String> = nodes
        .iter()
        .flat_map(|n| n.params.values())
        .collect();
    params.retain(|name, _| used.contains(name));

    let graph = Graph {
        name: graph.name.clone(),
        input_shape: graph.input_shape.clone(),
        nodes,
        params,
        output,
    };
    graph.validate()?;
    Ok(FoldOutcome {
        graph,
        folded,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::INPUT_ID;

    fn bn_graph(gamma: f32, beta: f32, mu: f32, var: f32, eps: f32, bias: Option<Vec<f32>>) -> Graph {
        let mut params = BTreeMap::new();
        params.insert(
            "c.w".to_string(),
            TensorF::new(
                Shape::new(vec![2, 1, 2, 2]).unwrap(),
                vec![1.0, 2.0, -1.0, 0.5, 0.25, -2.0, 3.0, 1.5],
            )
            .unwrap(),
        );
        let mut conv_params = BTreeMap::new();
        conv_params.insert("weight".to_string(), "c.w".to_string());
        if let Some(b) = bias {
            params.insert(
                "c.b".to_string(),
                TensorF::new(Shape::new(vec![2]).unwrap(), b).unwrap(),
            );
            conv_params.insert("bias".to_string(), "c.b".to_string());
        }
        for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mu), ("var", var)] {
            params.insert(
                format!("bn.{name}"),
                TensorF::new(Shape::new(vec![2]).unwrap(), vec![v; 2]).unwrap(),
            );
        }
        let mut bn_params = BTreeMap::new();
        for role in ["gamma", "beta", "mean", "var"] {
            bn_params.insert(role.to_string(), format!("bn.{role}"));
        }
        Graph {
            name: "bn-test".into(),
            input_shape: Shape::new(vec![1, 1, 4, 4]).unwrap(),
            nodes: vec![
                Node {
                    id: "c".into(),
                    kind: NodeKind::Conv2d {
                        stride: (1, 1),
                        pad: (0, 0),
                        groups: 1,
                    },
                    inputs: vec![INPUT_ID.into()],
                    params: conv_params,
                },
                Node {
                    id: "bn".into(),
                    kind: NodeKind::BatchNorm { epsilon: eps },
                    inputs: vec!["c".into()],
                    params: bn_params,
                },
            ],
            params,
            output: "bn".into(),
        }
    }

    #[test]
    fn identity_bn_leaves_weights_unchanged() {
        let eps = 1e-5f32;
        let g = bn_graph(1.0, 0.0, 0.0, 1.0 - eps, eps, Some(vec![0.5, -0.5]));
        let out = fold_bn(&g, FoldMode::Strict).unwrap();
        assert_eq!(out.folded, 1);
        assert_eq!(out.graph.nodes.len(), 1);
        let w = &out.graph.params["c.w"];
        for (a, b) in w.data().iter().zip(g.params["c.w"].data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let b = &out.graph.params["c.b"];
        assert!((b.data()[0] - 0.5).abs() < 1e-6);
        assert!((b.data()[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn unit_factor_reduces_to_beta_plus_bias_minus_mu() {
        // gamma = 2, var + eps = 4 -> factor = 1, so w_fold = w and
        // b_fold = beta + (b - mu).
        let eps = 1e-3f32;
        let g = bn_graph(2.0, 0.7, 0.2, 4.0 - eps, eps, Some(vec![1.0, -1.0]));
        let out = fold_bn(&g, FoldMode::Strict).unwrap();
        let w = &out.graph.params["c.w"];
        for (a, b) in w.data().iter().zip(g.params["c.w"].data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let b = &out.graph.params["c.b"];
        assert!((b.data()[0] - (0.7 + (1.0 - 0.2))).abs() < 1e-6);
        assert!((b.data()[1] - (0.7 + (-1.0 - 0.2))).abs() < 1e-6);
    }

    #[test]
    fn conv_without_bias_gets_one() {
        let g = bn_graph(1.5, 0.3, -0.1, 0.8, 1e-5, None);
        let out = fold_bn(&g, FoldMode::Strict).unwrap();
        let conv = out.graph.node("c").unwrap();
        assert!(conv.params.contains_key("bias"));
    }

    #[test]
    fn folding_is_idempotent() {
        let g = bn_graph(1.5, 0.3, -0.1, 0.8, 1e-5, Some(vec![0.1, 0.2]));
        let once = fold_bn(&g, FoldMode::Strict).unwrap();
        let twice = fold_bn(&once.graph, FoldMode::Strict).unwrap();
        assert_eq!(twice.folded, 0);
        assert_eq!(once.graph, twice.graph);
    }

    #[test]
    fn bn_after_relu_errors_in_strict_mode() {
        let mut g = bn_graph(1.0, 0.0, 0.0, 1.0, 1e-5, None);
        g.nodes.insert(
            1,
            Node {
                id: "r".into(),
                kind: NodeKind::Relu,
                inputs: vec!["c".into()],
                params: BTreeMap::new(),
            },
        );
        g.nodes[2].inputs = vec!["r".into()];
        let err = fold_bn(&g, FoldMode::Strict).unwrap_err();
        assert_eq!(err.code(), "bnfold/unfoldable");
        let out = fold_bn(&g, FoldMode::Permissive).unwrap();
        assert_eq!(out.folded, 0);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.graph.nodes.len(), 3);
    }

    #[test]
    fn zero_variance_channel_is_legal() {
        let g = bn_graph(1.0, 0.0, 0.0, 0.0, 1e-4, None);
        let out = fold_bn(&g, FoldMode::Strict).unwrap();
        let factor = 1.0 / (1e-4f32).sqrt();
        let w = &out.graph.params["c.w"];
        assert!((w.data()[0] - factor).abs() / factor < 1e-5);
    }
}
