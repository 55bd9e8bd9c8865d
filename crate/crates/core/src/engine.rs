//! Graph execution along four paths: float reference, fake-quant
//! simulation, zero-point-free integer, and full affine integer.
//!
//! The fake and integer paths share one computation structure so the
//! simulation and the deployment arithmetic can be compared bit-for-bit:
//! activations live on static per-tensor grids, convolutions accumulate
//! zero-point-centered codes, and every inter-layer requantization applies
//! the same f32 multiplier `m = (s_w * s_x) / s_next` with the same
//! rounding rule. Grid-preserving nodes (relu, pools, flatten) propagate
//! their producer's grid; conv/fc outputs requantize onto their own
//! calibrated grid; add rescales both operands to the larger of the two
//! scales. A conv or fc that nothing consumes is the graph output and is
//! dequantized straight from the accumulator by `1 / (s_w * s_x)`.
//!
//! The fake path runs the same code arithmetic in f32, which is exact while
//! accumulators stay below 2^24; the planner checks a conservative
//! worst-case bound per layer and reports when the window is exceeded.

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeKind, INPUT_ID};
use crate::quantizer::{
    round_half_away, ActivationParams, Granularity, NumberSetClass, QuantParams, QuantScheme,
};
use crate::squant::{CalibReport, RoundingMode};
use crate::tensor::{conv2d_f32, conv2d_int_padded, Shape, TensorAcc, TensorF, TensorQ};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecPath {
    Float,
    FakeQuant,
    IntSymmetric,
    IntAffine,
}

impl ExecPath {
    pub fn name(&self) -> &'static str {
        match self {
            ExecPath::Float => "float",
            ExecPath::FakeQuant => "fake",
            ExecPath::IntSymmetric => "int",
            ExecPath::IntAffine => "int_affine",
        }
    }
}

/// Quantized weights and report for one conv/fc node.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub weight: TensorQ,
    pub weight_params: QuantParams,
    /// round(b_fold * s_w * s_x), one entry per output channel.
    pub bias_int: Vec<i32>,
    pub calib: Option<CalibReport>,
}

/// A BN-folded graph plus everything the integer paths need: quantized
/// weights, int32 biases, and static activation parameters per node.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGraph {
    pub graph: Graph,
    pub bits: u8,
    pub scheme: QuantScheme,
    pub granularity: Granularity,
    pub rounding: RoundingMode,
    pub weights: BTreeMap<String, LayerQuant>,
    pub activations: ActivationParams,
}

impl QuantizedGraph {
    /// Structural checks: folded graph, one weight record per conv/fc,
    /// activation params for the input and every node.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        for node in &self.graph.nodes {
            if matches!(node.kind, NodeKind::BatchNorm { .. }) {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} is an unfolded batch norm", node.id),
                });
            }
            if node.kind.is_weighted() && !self.weights.contains_key(&node.id) {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} has no quantized weights", node.id),
                });
            }
            if !self.activations.params.contains_key(&node.id) {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} has no activation params", node.id),
                });
            }
        }
        if !self.activations.params.contains_key(INPUT_ID) {
            return Err(Error::QuantizedGraphInvalid {
                context: "missing input activation params".into(),
            });
        }
        for (id, lq) in &self.weights {
            let node = self.graph.node(id).ok_or_else(|| Error::QuantizedGraphInvalid {
                context: format!("weight record for unknown node {id}"),
            })?;
            let w = self.graph.param_tensor(node, "weight")?;
            if w.shape() != lq.weight.shape() {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {id}: quantized weight shape differs from float weight"),
                });
            }
            let out_channels = w.shape().dims()[0];
            if lq.bias_int.len() != out_channels {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {id}: bias_int length != output channels"),
                });
            }
            let expected = match lq.weight_params.granularity {
                Granularity::PerTensor => 1,
                Granularity::PerChannel => out_channels,
            };
            if lq.weight_params.channels.len() != expected {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {id}: weight params channel count mismatch"),
                });
            }
        }
        Ok(())
    }
}

/// Execution trace: the value at each layer boundary, in node order, with
/// the quantized graph input under the `input` id. Integer paths record
/// dequantized values so traces are directly comparable across paths.
#[derive(Debug, Clone)]
pub struct Trace {
    pub nodes: Vec<(String, TensorF)>,
}

impl Trace {
    pub fn get(&self, id: &str) -> Option<&TensorF> {
        self.nodes.iter().find(|(n, _)| n == id).map(|(_, t)| t)
    }
}

/// The four decomposition terms of one affine conv/fc:
/// `y = s_x * s_w * (p0 - p1 - p2 + p3)`.
#[derive(Debug, Clone)]
pub struct AffineTerms {
    pub node: String,
    /// Raw code products per output element.
    pub p0: TensorAcc,
    /// z_w * (window sum of input codes) per output element.
    pub p1: TensorAcc,
    /// z_x * (kernel code sum), per output channel.
    pub p2: Vec<i32>,
    /// n * z_x * z_w for an n-element kernel, per output channel.
    pub p3: Vec<i32>,
}

impl AffineTerms {
    /// p0 - p1 - p2 + p3, checked into int32.
    pub fn combined(&self) -> Result<TensorAcc> {
        let dims = self.p0.shape().dims().to_vec();
        let channels = self.p2.len();
        let per_channel = self.p0.shape().len() / (dims[0] * channels);
        let mut out = Vec::with_capacity(self.p0.shape().len());
        for (i, (&a, &b)) in self.p0.data().iter().zip(self.p1.data()).enumerate() {
            let o = (i / per_channel) % channels;
            let v = a as i64 - b as i64 - self.p2[o] as i64 + self.p3[o] as i64;
            if v > i32::MAX as i64 || v < i32::MIN as i64 {
                return Err(Error::AccOverflow { index: i, value: v });
            }
            out.push(v as i32);
        }
        TensorAcc::new(self.p0.shape().clone(), out)
    }
}

// ---------------------------------------------------------------------------
// Float reference path
// ---------------------------------------------------------------------------

fn matmul_f32(x: &TensorF, w: &TensorF, bias: Option<&TensorF>) -> Result<TensorF> {
    let (n, f) = x.shape().rc()?;
    let (o, wf) = w.shape().rc()?;
    if f != wf {
        return Err(Error::ShapeMismatch {
            context: format!("fc input has {f} features, weight expects {wf}"),
        });
    }
    let mut out = vec![0.0f32; n * o];
    for s in 0..n {
        for c in 0..o {
            let mut acc = 0.0f32;
            for i in 0..f {
                acc += x.data()[s * f + i] * w.data()[c * f + i];
            }
            if let Some(b) = bias {
                acc += b.data()[c];
            }
            out[s * o + c] = acc;
        }
    }
    TensorF::new(Shape::new(vec![n, o])?, out)
}

fn batchnorm_f32(x: &TensorF, graph: &Graph, node: &Node) -> Result<TensorF> {
    let NodeKind::BatchNorm { epsilon } = node.kind else {
        unreachable!()
    };
    let gamma = graph.param_tensor(node, "gamma")?.data();
    let beta = graph.param_tensor(node, "beta")?.data();
    let mu = graph.param_tensor(node, "mean")?.data();
    let var = graph.param_tensor(node, "var")?.data();
    let dims = x.shape().dims();
    let (channels, span) = match dims {
        [_, c, h, w] => (*c, h * w),
        [_, c] => (*c, 1),
        other => {
            return Err(Error::ShapeMismatch {
                context: format!("batch norm input must be rank-2 or rank-4, got {other:?}"),
            })
        }
    };
    let mut out = Vec::with_capacity(x.shape().len());
    for (i, &v) in x.data().iter().enumerate() {
        let c = (i / span) % channels;
        out.push(gamma[c] * (v - mu[c]) / (var[c] + epsilon).sqrt() + beta[c]);
    }
    TensorF::new(x.shape().clone(), out)
}

fn maxpool_f32(x: &TensorF, k: usize, stride: usize) -> Result<TensorF> {
    let (n, c, h, w) = x.shape().nchw()?;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            m = m.max(plane[(oy * stride + ky) * w + (ox * stride + kx)]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    TensorF::new(Shape::new(vec![n, c, oh, ow])?, out)
}

fn avgpool_f32(x: &TensorF, k: usize, stride: usize) -> Result<TensorF> {
    let (n, c, h, w) = x.shape().nchw()?;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let div = (k * k) as f32;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += plane[(oy * stride + ky) * w + (ox * stride + kx)];
                        }
                    }
                    out.push(acc / div);
                }
            }
        }
    }
    TensorF::new(Shape::new(vec![n, c, oh, ow])?, out)
}

fn gap_f32(x: &TensorF) -> Result<TensorF> {
    let (n, c, h, w) = x.shape().nchw()?;
    let div = (h * w) as f32;
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            out.push(plane.iter().sum::<f32>() / div);
        }
    }
    TensorF::new(Shape::new(vec![n, c, 1, 1])?, out)
}

/// Float reference execution. Supports unfolded graphs (batch-norm nodes
/// run in float), so it doubles as the oracle arm for fold equivalence.
pub fn run_float(graph: &Graph, input: &TensorF) -> Result<TensorF> {
    let trace = run_float_traced(graph, input)?;
    output_of(graph, trace, input)
}

fn output_of(graph: &Graph, trace: Trace, input: &TensorF) -> Result<TensorF> {
    if graph.output == INPUT_ID {
        return Ok(input.clone());
    }
    trace
        .get(&graph.output)
        .cloned()
        .ok_or_else(|| Error::GraphInvalid {
            context: format!("output node {} produced no value", graph.output),
        })
}

/// [`run_float`] with every node's output captured.
pub fn run_float_traced(graph: &Graph, input: &TensorF) -> Result<Trace> {
    if input.shape() != &graph.input_shape {
        return Err(Error::ShapeMismatch {
            context: format!(
                "input shape {} does not match graph input spec {}",
                input.shape(),
                graph.input_shape
            ),
        });
    }
    let mut values: BTreeMap<&str, TensorF> = BTreeMap::new();
    let mut trace = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let arg = |idx: usize| -> &TensorF {
            let id = node.inputs[idx].as_str();
            if id == INPUT_ID {
                input
            } else {
                &values[id]
            }
        };
        let out = match &node.kind {
            NodeKind::Conv2d { stride, pad, .. } => {
                let w = graph.param_tensor(node, "weight")?;
                let b = graph.opt_param_tensor(node, "bias")?;
                conv2d_f32(arg(0), w, b, *stride, *pad)?
            }
            NodeKind::FullyConnected => {
                let w = graph.param_tensor(node, "weight")?;
                let b = graph.opt_param_tensor(node, "bias")?;
                matmul_f32(arg(0), w, b)?
            }
            NodeKind::BatchNorm { .. } => batchnorm_f32(arg(0), graph, node)?,
            NodeKind::Relu => TensorF::new(
                arg(0).shape().clone(),
                arg(0).data().iter().map(|&v| v.max(0.0)).collect(),
            )?,
            NodeKind::MaxPool { k, stride } => maxpool_f32(arg(0), *k, *stride)?,
            NodeKind::AvgPool { k, stride } => avgpool_f32(arg(0), *k, *stride)?,
            NodeKind::GlobalAvgPool => gap_f32(arg(0))?,
            NodeKind::Add => {
                let a = arg(0);
                let b = arg(1);
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        context: format!("add operands {} vs {}", a.shape(), b.shape()),
                    });
                }
                TensorF::new(
                    a.shape().clone(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                )?
            }
            NodeKind::Flatten => {
                let dims = arg(0).shape().dims();
                let n = dims[0];
                let rest: usize = dims[1..].iter().product();
                arg(0).reshaped(Shape::new(vec![n, rest])?)?
            }
        };
        trace.push((node.id.clone(), out.clone()));
        values.insert(&node.id, out);
    }
    Ok(Trace { nodes: trace })
}

// ---------------------------------------------------------------------------
// Quantized execution plan
// ---------------------------------------------------------------------------

/// Static per-tensor activation grid: code = round(s*x) + z in [lo, hi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActGrid {
    pub scale: f32,
    pub zero_point: i32,
    pub lo: i32,
    pub hi: i32,
}

impl ActGrid {
    fn from_params(p: &QuantParams) -> Self {
        let (lo, hi) = p.code_range();
        ActGrid {
            scale: p.scale(),
            zero_point: p.zero_point(),
            lo,
            hi,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvPlan {
    /// (s_w, z_w) per output channel (length 1 expanded on use when
    /// per-tensor).
    w_scales: Vec<f32>,
    w_zps: Vec<i32>,
    /// d = s_w * s_x per output channel.
    d: Vec<f32>,
    /// m = (s_w * s_x) / s_next per output channel; absent for a terminal
    /// layer that dequantizes straight from the accumulator.
    m: Option<Vec<f32>>,
    in_grid: ActGrid,
    out_grid: Option<ActGrid>,
    /// Conservative worst-case |accumulator| for the fake-quant window check.
    acc_bound: i64,
}

#[derive(Debug, Clone)]
struct AddPlan {
    grids: [ActGrid; 2],
    rescale: [f32; 2],
    out_grid: ActGrid,
}

#[derive(Debug, Clone)]
enum NodePlan {
    Conv(ConvPlan),
    Add(AddPlan),
    /// Grid-preserving nodes: relu, pools, flatten.
    Passthrough(ActGrid),
}

struct Plan {
    input_grid: ActGrid,
    nodes: BTreeMap<String, NodePlan>,
    /// Effective grid of each node's output (None for terminal conv/fc).
    grids: BTreeMap<String, Option<ActGrid>>,
}

fn weight_param_vectors(lq: &LayerQuant, out_channels: usize) -> (Vec<f32>, Vec<i32>) {
    match lq.weight_params.granularity {
        Granularity::PerTensor => (
            vec![lq.weight_params.scale(); out_channels],
            vec![lq.weight_params.zero_point(); out_channels],
        ),
        Granularity::PerChannel => (
            lq.weight_params.channels.iter().map(|c| c.scale).collect(),
            lq.weight_params.channels.iter().map(|c| c.zero_point).collect(),
        ),
    }
}

fn build_plan(qg: &QuantizedGraph) -> Result<Plan> {
    let consumers = qg.graph.consumers();
    let input_grid = ActGrid::from_params(&qg.activations.params[INPUT_ID]);
    let mut grids: BTreeMap<String, Option<ActGrid>> = BTreeMap::new();
    grids.insert(INPUT_ID.to_string(), Some(input_grid));
    let mut nodes = BTreeMap::new();

    for node in &qg.graph.nodes {
        let grid_of = |id: &str| -> Result<ActGrid> {
            grids
                .get(id)
                .and_then(|g| *g)
                .ok_or_else(|| Error::QuantizedGraphInvalid {
                    context: format!("node {} consumes an accumulator-domain value", node.id),
                })
        };
        match &node.kind {
            NodeKind::Conv2d { .. } | NodeKind::FullyConnected => {
                let in_grid = grid_of(&node.inputs[0])?;
                let lq = &qg.weights[&node.id];
                let w = qg.graph.param_tensor(node, "weight")?;
                let out_channels = w.shape().dims()[0];
                let (w_scales, w_zps) = weight_param_vectors(lq, out_channels);
                let d: Vec<f32> = w_scales.iter().map(|&s| s * in_grid.scale).collect();
                let terminal = consumers.get(node.id.as_str()).map_or(true, |v| v.is_empty());
                let (m, out_grid) = if terminal {
                    (None, None)
                } else {
                    let out_grid = ActGrid::from_params(&qg.activations.params[&node.id]);
                    let m = d.iter().map(|&dv| dv / out_grid.scale).collect();
                    (Some(m), Some(out_grid))
                };

                // Worst-case |acc|: max centered input code * sum |centered
                // weight codes| per channel, plus the bias.
                let x_max = (in_grid.lo - in_grid.zero_point)
                    .abs()
                    .max((in_grid.hi - in_grid.zero_point).abs()) as i64;
                let span = w.shape().len() / out_channels;
                let mut acc_bound = 0i64;
                for c in 0..out_channels {
                    let sum_abs_w: i64 = lq.weight.data()[c * span..(c + 1) * span]
                        .iter()
                        .map(|&v| (v as i64 - w_zps[c] as i64).abs())
                        .sum();
                    acc_bound =
                        acc_bound.max(x_max * sum_abs_w + (lq.bias_int[c] as i64).abs());
                }

                grids.insert(node.id.clone(), out_grid);
                nodes.insert(
                    node.id.clone(),
                    NodePlan::Conv(ConvPlan {
                        w_scales,
                        w_zps,
                        d,
                        m,
                        in_grid,
                        out_grid,
                        acc_bound,
                    }),
                );
            }
            NodeKind::Add => {
                let a = grid_of(&node.inputs[0])?;
                let b = grid_of(&node.inputs[1])?;
                // Shared scale = max of the two; the finer operand keeps its
                // codes (multiplier exactly 1), the other is rescaled.
                let (out_grid, rescale) = if a.scale >= b.scale {
                    (a, [1.0, a.scale / b.scale])
                } else {
                    (b, [b.scale / a.scale, 1.0])
                };
                grids.insert(node.id.clone(), Some(out_grid));
                nodes.insert(
                    node.id.clone(),
                    NodePlan::Add(AddPlan {
                        grids: [a, b],
                        rescale,
                        out_grid,
                    }),
                );
            }
            NodeKind::Relu
            | NodeKind::MaxPool { .. }
            | NodeKind::AvgPool { .. }
            | NodeKind::GlobalAvgPool
            | NodeKind::Flatten => {
                let g = grid_of(&node.inputs[0])?;
                grids.insert(node.id.clone(), Some(g));
                nodes.insert(node.id.clone(), NodePlan::Passthrough(g));
            }
            NodeKind::BatchNorm { .. } => {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} is an unfolded batch norm", node.id),
                })
            }
        }
    }
    Ok(Plan {
        input_grid,
        nodes,
        grids,
    })
}

fn check_zero_point_free(qg: &QuantizedGraph, plan: &Plan) -> Result<()> {
    if qg.scheme != QuantScheme::Scale {
        return Err(Error::ZeroPointNotZero {
            zero_point: -1,
            context: "scheme is not symmetric".into(),
        });
    }
    if plan.input_grid.zero_point != 0 {
        return Err(Error::ZeroPointNotZero {
            zero_point: plan.input_grid.zero_point,
            context: "graph input".into(),
        });
    }
    for (id, node_plan) in &plan.nodes {
        match node_plan {
            NodePlan::Conv(cp) => {
                if let Some(&z) = cp.w_zps.iter().find(|&&z| z != 0) {
                    return Err(Error::ZeroPointNotZero {
                        zero_point: z,
                        context: format!("weights of {id}"),
                    });
                }
                if let Some(g) = cp.out_grid {
                    if g.zero_point != 0 {
                        return Err(Error::ZeroPointNotZero {
                            zero_point: g.zero_point,
                            context: format!("activation of {id}"),
                        });
                    }
                }
            }
            NodePlan::Add(ap) => {
                if ap.out_grid.zero_point != 0 {
                    return Err(Error::ZeroPointNotZero {
                        zero_point: ap.out_grid.zero_point,
                        context: format!("activation of {id}"),
                    });
                }
            }
            NodePlan::Passthrough(_) => {}
        }
    }
    Ok(())
}

/// Round-half-away-from-zero integer division; mirrors the f32 expression
/// `(num as f32 / den as f32).round()` on the code magnitudes this engine
/// produces.
fn div_round_half_away(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    let r = (2 * num.abs() + den) / (2 * den);
    if num < 0 {
        -r
    } else {
        r
    }
}

// ---------------------------------------------------------------------------
// Integer paths
// ---------------------------------------------------------------------------

fn quantize_to_grid_q(x: &TensorF, g: ActGrid) -> Result<TensorQ> {
    let data: Vec<i16> = x
        .data()
        .iter()
        .map(|&v| {
            let q = round_half_away(g.scale * v) + g.zero_point as f32;
            (q.max(g.lo as f32).min(g.hi as f32)) as i16
        })
        .collect();
    TensorQ::new(x.shape().clone(), data, g.lo, g.hi)
}

fn dequantize_grid(q: &TensorQ, g: ActGrid) -> Result<TensorF> {
    TensorF::new(
        q.shape().clone(),
        q.data()
            .iter()
            .map(|&v| (v as f32 - g.zero_point as f32) / g.scale)
            .collect(),
    )
}

fn matmul_int(x: &TensorQ, w: &TensorQ, x_zp: i32, w_zps: &[i32]) -> Result<AffineTerms> {
    let (n, f) = x.shape().rc()?;
    let (o, wf) = w.shape().rc()?;
    if f != wf {
        return Err(Error::ShapeMismatch {
            context: format!("fc input has {f} features, weight expects {wf}"),
        });
    }
    let shape = Shape::new(vec![n, o])?;
    let mut p0 = vec![0i32; n * o];
    let mut p1 = vec![0i32; n * o];
    let mut row_sum = vec![0i64; n];
    for s in 0..n {
        row_sum[s] = x.data()[s * f..(s + 1) * f].iter().map(|&v| v as i64).sum();
    }
    let mut p2 = Vec::with_capacity(o);
    let mut p3 = Vec::with_capacity(o);
    for c in 0..o {
        let w_sum: i64 = w.data()[c * f..(c + 1) * f].iter().map(|&v| v as i64).sum();
        p2.push(checked_i32(x_zp as i64 * w_sum, c)?);
        p3.push(checked_i32(f as i64 * x_zp as i64 * w_zps[c] as i64, c)?);
    }
    for s in 0..n {
        for c in 0..o {
            let mut acc = 0i64;
            for i in 0..f {
                acc += x.data()[s * f + i] as i64 * w.data()[c * f + i] as i64;
            }
            p0[s * o + c] = checked_i32(acc, s * o + c)?;
            p1[s * o + c] = checked_i32(w_zps[c] as i64 * row_sum[s], s * o + c)?;
        }
    }
    Ok(AffineTerms {
        node: String::new(),
        p0: TensorAcc::new(shape.clone(), p0)?,
        p1: TensorAcc::new(shape, p1)?,
        p2,
        p3,
    })
}

fn checked_i32(v: i64, index: usize) -> Result<i32> {
    if v > i32::MAX as i64 || v < i32::MIN as i64 {
        return Err(Error::AccOverflow { index, value: v });
    }
    Ok(v as i32)
}

/// Affine decomposition of one conv: p0 from the raw codes (padding
/// contributes z_x), p1 from window sums of input codes, p2/p3 per channel.
fn conv_affine_terms(
    x: &TensorQ,
    w: &TensorQ,
    stride: (usize, usize),
    pad: (usize, usize),
    x_zp: i32,
    w_zps: &[i32],
) -> Result<AffineTerms> {
    let p0 = conv2d_int_padded(x, w, stride, pad, x_zp as i16)?;
    let (o, i, kh, kw) = w.shape().nchw()?;
    let n_elems = (i * kh * kw) as i64;

    // Window sums via an all-ones single-output-channel kernel.
    let ones = TensorQ::new(Shape::new(vec![1, i, kh, kw])?, vec![1i16; i * kh * kw], 0, 1)?;
    let window_sums = conv2d_int_padded(x, &ones, stride, pad, x_zp as i16)?;

    let out_dims = p0.shape().dims();
    let (n, _, oh, ow) = (out_dims[0], out_dims[1], out_dims[2], out_dims[3]);
    let mut p1 = vec![0i32; p0.shape().len()];
    for b in 0..n {
        for oc in 0..o {
            for yx in 0..oh * ow {
                let s = window_sums.data()[(b * oh * ow) + yx] as i64;
                p1[((b * o + oc) * oh * ow) + yx] =
                    checked_i32(w_zps[oc] as i64 * s, ((b * o + oc) * oh * ow) + yx)?;
            }
        }
    }
    let span = i * kh * kw;
    let mut p2 = Vec::with_capacity(o);
    let mut p3 = Vec::with_capacity(o);
    for c in 0..o {
        let w_sum: i64 = w.data()[c * span..(c + 1) * span]
            .iter()
            .map(|&v| v as i64)
            .sum();
        p2.push(checked_i32(x_zp as i64 * w_sum, c)?);
        p3.push(checked_i32(n_elems * x_zp as i64 * w_zps[c] as i64, c)?);
    }
    Ok(AffineTerms {
        node: String::new(),
        p0,
        p1,
        p2,
        p3,
    })
}

fn requant_acc(
    acc: &TensorAcc,
    bias: &[i32],
    m: &[f32],
    out_grid: ActGrid,
    channels: usize,
) -> Result<TensorQ> {
    let per_channel = acc.shape().len() / (acc.shape().dims()[0] * channels);
    let data: Vec<i16> = acc
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &a)| {
            let o = (idx / per_channel) % channels;
            let with_bias = a as i64 + bias[o] as i64;
            let q = round_half_away(m[o] * with_bias as f32) + out_grid.zero_point as f32;
            (q.max(out_grid.lo as f32).min(out_grid.hi as f32)) as i16
        })
        .collect();
    TensorQ::new(acc.shape().clone(), data, out_grid.lo, out_grid.hi)
}

fn dequant_acc(acc: &TensorAcc, bias: &[i32], d: &[f32], channels: usize) -> Result<TensorF> {
    let per_channel = acc.shape().len() / (acc.shape().dims()[0] * channels);
    let data: Vec<f32> = acc
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &a)| {
            let o = (idx / per_channel) % channels;
            let with_bias = (a as i64 + bias[o] as i64) as f32;
            with_bias / d[o]
        })
        .collect();
    TensorF::new(acc.shape().clone(), data)
}

fn pool_int(
    x: &TensorQ,
    kind: &NodeKind,
    grid: ActGrid,
) -> Result<TensorQ> {
    let (n, c, h, w) = x.shape().nchw()?;
    match kind {
        NodeKind::MaxPool { k, stride } => {
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for b in 0..n {
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = i16::MIN;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    m = m.max(plane[(oy * stride + ky) * w + (ox * stride + kx)]);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
            }
            TensorQ::new(Shape::new(vec![n, c, oh, ow])?, out, grid.lo, grid.hi)
        }
        NodeKind::AvgPool { k, stride } => {
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let div = (k * k) as i64;
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for b in 0..n {
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0i64;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    acc += plane[(oy * stride + ky) * w + (ox * stride + kx)] as i64;
                                }
                            }
                            let v = div_round_half_away(acc, div)
                                .clamp(grid.lo as i64, grid.hi as i64);
                            out.push(v as i16);
                        }
                    }
                }
            }
            TensorQ::new(Shape::new(vec![n, c, oh, ow])?, out, grid.lo, grid.hi)
        }
        NodeKind::GlobalAvgPool => {
            let div = (h * w) as i64;
            let mut out = Vec::with_capacity(n * c);
            for b in 0..n {
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let acc: i64 = plane.iter().map(|&v| v as i64).sum();
                    out.push(div_round_half_away(acc, div).clamp(grid.lo as i64, grid.hi as i64)
                        as i16);
                }
            }
            TensorQ::new(Shape::new(vec![n, c, 1, 1])?, out, grid.lo, grid.hi)
        }
        _ => unreachable!(),
    }
}

enum IntValue {
    Grid(TensorQ),
    /// Terminal conv/fc output, already dequantized.
    Final(TensorF),
}

fn finish_int_layer(
    terms: AffineTerms,
    node: &Node,
    cp: &ConvPlan,
    lq: &LayerQuant,
    collect_terms: bool,
    terms_out: &mut Vec<AffineTerms>,
) -> Result<IntValue> {
    let acc = terms.combined()?;
    if collect_terms {
        let mut t = terms;
        t.node = node.id.clone();
        terms_out.push(t);
    }
    let channels = cp.d.len();
    match (&cp.m, cp.out_grid) {
        (Some(m), Some(grid)) => Ok(IntValue::Grid(requant_acc(
            &acc,
            &lq.bias_int,
            m,
            grid,
            channels,
        )?)),
        _ => Ok(IntValue::Final(dequant_acc(
            &acc,
            &lq.bias_int,
            &cp.d,
            channels,
        )?)),
    }
}

fn run_int_generic(
    qg: &QuantizedGraph,
    input: &TensorF,
    plan: &Plan,
    collect_terms: bool,
) -> Result<(TensorF, Trace, Vec<AffineTerms>)> {
    if input.shape() != &qg.graph.input_shape {
        return Err(Error::ShapeMismatch {
            context: format!(
                "input shape {} does not match graph input spec {}",
                input.shape(),
                qg.graph.input_shape
            ),
        });
    }
    let mut values: BTreeMap<&str, IntValue> = BTreeMap::new();
    let entry = quantize_to_grid_q(input, plan.input_grid)?;
    let mut trace = vec![(
        INPUT_ID.to_string(),
        dequantize_grid(&entry, plan.input_grid)?,
    )];
    values.insert(INPUT_ID, IntValue::Grid(entry));
    let mut terms_out = Vec::new();

    for node in &qg.graph.nodes {
        let grid_arg = |idx: usize| -> Result<&TensorQ> {
            match &values[node.inputs[idx].as_str()] {
                IntValue::Grid(q) => Ok(q),
                IntValue::Final(_) => Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} consumes a final value", node.id),
                }),
            }
        };
        let out: IntValue = match &node.kind {
            NodeKind::Conv2d { stride, pad, .. } => {
                let NodePlan::Conv(cp) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                let lq = &qg.weights[&node.id];
                let terms = conv_affine_terms(
                    grid_arg(0)?,
                    &lq.weight,
                    *stride,
                    *pad,
                    cp.in_grid.zero_point,
                    &cp.w_zps,
                )?;
                finish_int_layer(terms, node, cp, lq, collect_terms, &mut terms_out)?
            }
            NodeKind::FullyConnected => {
                let NodePlan::Conv(cp) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                let lq = &qg.weights[&node.id];
                let terms = matmul_int(grid_arg(0)?, &lq.weight, cp.in_grid.zero_point, &cp.w_zps)?;
                finish_int_layer(terms, node, cp, lq, collect_terms, &mut terms_out)?
            }
            NodeKind::Relu => {
                let NodePlan::Passthrough(g) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                let x = grid_arg(0)?;
                // Real 0 is code z; z = 0 under the symmetric scheme.
                let z = g.zero_point as i16;
                let data: Vec<i16> = x.data().iter().map(|&v| v.max(z)).collect();
                IntValue::Grid(TensorQ::new(x.shape().clone(), data, g.lo, g.hi)?)
            }
            NodeKind::MaxPool { .. } | NodeKind::AvgPool { .. } | NodeKind::GlobalAvgPool => {
                let NodePlan::Passthrough(g) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                IntValue::Grid(pool_int(grid_arg(0)?, &node.kind, *g)?)
            }
            NodeKind::Flatten => {
                let x = grid_arg(0)?;
                let dims = x.shape().dims();
                let n = dims[0];
                let rest: usize = dims[1..].iter().product();
                IntValue::Grid(x.reshaped(Shape::new(vec![n, rest])?)?)
            }
            NodeKind::Add => {
                let NodePlan::Add(ap) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                let a = grid_arg(0)?;
                let b = grid_arg(1)?;
                let g = ap.out_grid;
                let rescale = |q: &TensorQ, i: usize| -> Vec<i32> {
                    q.data()
                        .iter()
                        .map(|&v| {
                            let centered = v as i32 - ap.grids[i].zero_point;
                            let r = round_half_away(ap.rescale[i] * centered as f32) as i32
                                + g.zero_point;
                            r.clamp(g.lo, g.hi)
                        })
                        .collect()
                };
                let qa = rescale(a, 0);
                let qb = rescale(b, 1);
                let data: Vec<i16> = qa
                    .iter()
                    .zip(&qb)
                    .map(|(&x, &y)| (x + y - g.zero_point).clamp(g.lo, g.hi) as i16)
                    .collect();
                IntValue::Grid(TensorQ::new(a.shape().clone(), data, g.lo, g.hi)?)
            }
            NodeKind::BatchNorm { .. } => unreachable!("validated out"),
        };
        let boundary = match &out {
            IntValue::Grid(q) => {
                let g = plan.grids[&node.id].expect("grid value has a grid");
                dequantize_grid(q, g)?
            }
            IntValue::Final(t) => t.clone(),
        };
        trace.push((node.id.clone(), boundary));
        values.insert(&node.id, out);
    }

    let output = if qg.graph.output == INPUT_ID {
        trace[0].1.clone()
    } else {
        trace
            .iter()
            .find(|(id, _)| id == &qg.graph.output)
            .map(|(_, t)| t.clone())
            .expect("output node traced")
    };
    Ok((output, Trace { nodes: trace }, terms_out))
}

/// Zero-point-free integer execution (the deployment path): input quantized
/// once at entry, int8 x int8 -> int32 convolutions plus int32 bias,
/// requantization between layers, relu as integer max, final layer
/// dequantized by 1/(s_w * s_x). Requires the symmetric scheme.
pub fn run_int_symmetric(qg: &QuantizedGraph, input: &TensorF) -> Result<TensorF> {
    Ok(run_int_symmetric_traced(qg, input)?.0)
}

pub fn run_int_symmetric_traced(qg: &QuantizedGraph, input: &TensorF) -> Result<(TensorF, Trace)> {
    let plan = build_plan(qg)?;
    check_zero_point_free(qg, &plan)?;
    let (out, trace, _) = run_int_generic(qg, input, &plan, false)?;
    Ok((out, trace))
}

/// Full affine integer execution: every conv/fc computes the four-term
/// decomposition separately and the terms are returned for inspection.
/// With all zero-points at 0 this reduces exactly to the symmetric path.
pub fn run_int_affine(qg: &QuantizedGraph, input: &TensorF) -> Result<(TensorF, Vec<AffineTerms>)> {
    let (out, _, terms) = run_int_affine_traced(qg, input)?;
    Ok((out, terms))
}

pub fn run_int_affine_traced(
    qg: &QuantizedGraph,
    input: &TensorF,
) -> Result<(TensorF, Trace, Vec<AffineTerms>)> {
    let plan = build_plan(qg)?;
    run_int_generic(qg, input, &plan, true)
}

// ---------------------------------------------------------------------------
// Fake-quant path
// ---------------------------------------------------------------------------

/// Codes recovered from a grid value: x carries q/s (or (q-z)/s) exactly,
/// so round(s*x) + z returns the integer codes without drift.
fn recover_codes(x: &TensorF, g: ActGrid) -> TensorF {
    TensorF::new(
        x.shape().clone(),
        x.data()
            .iter()
            .map(|&v| round_half_away(g.scale * v) + g.zero_point as f32)
            .collect(),
    )
    .expect("codes are finite")
}

/// Zero-point-centered codes, `q - z = round(s * x)` for a grid value x;
/// zero-padding these in an f32 conv equals padding the raw codes with z_x.
fn centered_codes(x: &TensorF, g: ActGrid) -> TensorF {
    TensorF::new(
        x.shape().clone(),
        x.data()
            .iter()
            .map(|&v| round_half_away(g.scale * v))
            .collect(),
    )
    .expect("codes are finite")
}

fn centered_weights(lq: &LayerQuant, w_zps: &[i32], channels: usize) -> TensorF {
    let span = lq.weight.shape().len() / channels;
    TensorF::new(
        lq.weight.shape().clone(),
        lq.weight
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f32 - w_zps[i / span] as f32)
            .collect(),
    )
    .expect("codes are finite")
}

/// Fake-quant simulation: weights enter as dequantize(quantize(w)), every
/// activation lives on its static grid, and all arithmetic is f32. The
/// inter-layer requantization applies the identical multiplier, rounding,
/// and clipping as the integer paths, so under the symmetric scheme with
/// in-window accumulators the two agree bit-exactly at every boundary.
pub fn run_fake_quant(qg: &QuantizedGraph, input: &TensorF) -> Result<TensorF> {
    Ok(run_fake_quant_traced(qg, input)?.0)
}

pub fn run_fake_quant_traced(qg: &QuantizedGraph, input: &TensorF) -> Result<(TensorF, Trace)> {
    if input.shape() != &qg.graph.input_shape {
        return Err(Error::ShapeMismatch {
            context: format!(
                "input shape {} does not match graph input spec {}",
                input.shape(),
                qg.graph.input_shape
            ),
        });
    }
    let plan = build_plan(qg)?;
    const WINDOW: i64 = 1 << 24;

    // Values carried between nodes are dequantized grid values.
    let mut values: BTreeMap<&str, TensorF> = BTreeMap::new();
    let entry_q = quantize_to_grid_q(input, plan.input_grid)?;
    let entry = dequantize_grid(&entry_q, plan.input_grid)?;
    let mut trace = vec![(INPUT_ID.to_string(), entry.clone())];
    values.insert(INPUT_ID, entry);

    for node in &qg.graph.nodes {
        let arg = |idx: usize| -> &TensorF { &values[node.inputs[idx].as_str()] };
        let out: TensorF = match &node.kind {
            NodeKind::Conv2d { stride, pad, .. } => {
                let NodePlan::Conv(cp) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                if cp.acc_bound >= WINDOW {
                    return Err(Error::FakeQuantWindow {
                        node: node.id.clone(),
                        bound: cp.acc_bound,
                    });
                }
                let lq = &qg.weights[&node.id];
                let x_c = centered_codes(arg(0), cp.in_grid);
                let w_c = centered_weights(lq, &cp.w_zps, cp.d.len());
                let acc = conv2d_f32(&x_c, &w_c, None, *stride, *pad)?;
                fake_finish(&acc, cp, lq)?
            }
            NodeKind::FullyConnected => {
                let NodePlan::Conv(cp) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                if cp.acc_bound >= WINDOW {
                    return Err(Error::FakeQuantWindow {
                        node: node.id.clone(),
                        bound: cp.acc_bound,
                    });
                }
                let lq = &qg.weights[&node.id];
                let x_c = centered_codes(arg(0), cp.in_grid);
                let w_c = centered_weights(lq, &cp.w_zps, cp.d.len());
                let acc = matmul_f32(&x_c, &w_c, None)?;
                fake_finish(&acc, cp, lq)?
            }
            NodeKind::Relu => {
                let x = arg(0);
                TensorF::new(
                    x.shape().clone(),
                    x.data().iter().map(|&v| v.max(0.0)).collect(),
                )?
            }
            NodeKind::MaxPool { k, stride } => maxpool_f32(arg(0), *k, *stride)?,
            NodeKind::AvgPool { k, stride } => {
                let NodePlan::Passthrough(g) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                fake_avgpool(arg(0), Some((*k, *stride)), *g)?
            }
            NodeKind::GlobalAvgPool => {
                let NodePlan::Passthrough(g) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                fake_avgpool(arg(0), None, *g)?
            }
            NodeKind::Flatten => {
                let x = arg(0);
                let dims = x.shape().dims();
                let n = dims[0];
                let rest: usize = dims[1..].iter().product();
                x.reshaped(Shape::new(vec![n, rest])?)?
            }
            NodeKind::Add => {
                let NodePlan::Add(ap) = &plan.nodes[&node.id] else {
                    unreachable!()
                };
                let g = ap.out_grid;
                let rescale = |x: &TensorF, i: usize| -> Vec<f32> {
                    let codes = recover_codes(x, ap.grids[i]);
                    codes
                        .data()
                        .iter()
                        .map(|&q| {
                            let centered = q - ap.grids[i].zero_point as f32;
                            let r = round_half_away(ap.rescale[i] * centered)
                                + g.zero_point as f32;
                            r.max(g.lo as f32).min(g.hi as f32)
                        })
                        .collect()
                };
                let qa = rescale(arg(0), 0);
                let qb = rescale(arg(1), 1);
                let data: Vec<f32> = qa
                    .iter()
                    .zip(&qb)
                    .map(|(&x, &y)| {
                        let code = (x + y - g.zero_point as f32)
                            .max(g.lo as f32)
                            .min(g.hi as f32);
                        (code - g.zero_point as f32) / g.scale
                    })
                    .collect();
                TensorF::new(arg(0).shape().clone(), data)?
            }
            NodeKind::BatchNorm { .. } => {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} is an unfolded batch norm", node.id),
                })
            }
        };
        trace.push((node.id.clone(), out.clone()));
        values.insert(&node.id, out);
    }

    let output = if qg.graph.output == INPUT_ID {
        trace[0].1.clone()
    } else {
        trace
            .iter()
            .find(|(id, _)| id == &qg.graph.output)
            .map(|(_, t)| t.clone())
            .expect("output node traced")
    };
    Ok((output, Trace { nodes: trace }))
}

/// Bias add plus requantization (or final dequantization) on an f32
/// accumulator of exact integer values; expression-for-expression the same
/// arithmetic as the integer path.
fn fake_finish(acc: &TensorF, cp: &ConvPlan, lq: &LayerQuant) -> Result<TensorF> {
    let channels = cp.d.len();
    let per_channel = acc.shape().len() / (acc.shape().dims()[0] * channels);
    let data: Vec<f32> = match (&cp.m, cp.out_grid) {
        (Some(m), Some(g)) => acc
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &a)| {
                let o = (idx / per_channel) % channels;
                let with_bias = a + lq.bias_int[o] as f32;
                let q = round_half_away(m[o] * with_bias) + g.zero_point as f32;
                let q = q.max(g.lo as f32).min(g.hi as f32);
                (q - g.zero_point as f32) / g.scale
            })
            .collect(),
        _ => acc
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &a)| {
                let o = (idx / per_channel) % channels;
                let with_bias = a + lq.bias_int[o] as f32;
                with_bias / cp.d[o]
            })
            .collect(),
    };
    TensorF::new(acc.shape().clone(), data)
}

/// Average pooling over recovered codes with the same rounding as the
/// integer path; `window` of None pools the whole plane.
fn fake_avgpool(x: &TensorF, window: Option<(usize, usize)>, g: ActGrid) -> Result<TensorF> {
    let codes = recover_codes(x, g);
    let (n, c, h, w) = codes.shape().nchw()?;
    let (oh, ow, div) = match window {
        Some((k, stride)) => ((h - k) / stride + 1, (w - k) / stride + 1, (k * k) as f32),
        None => (1, 1, (h * w) as f32),
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let plane = &codes.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    match window {
                        Some((k, stride)) => {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += plane[(oy * stride + ky) * w + (ox * stride + kx)];
                                }
                            }
                        }
                        None => {
                            for &v in plane {
                                acc += v;
                            }
                        }
                    }
                    let q = round_half_away(acc / div)
                        .max(g.lo as f32)
                        .min(g.hi as f32);
                    out.push((q - g.zero_point as f32) / g.scale);
                }
            }
        }
    }
    TensorF::new(Shape::new(vec![n, c, oh, ow])?, out)
}

// ---------------------------------------------------------------------------
// Operation counting
// ---------------------------------------------------------------------------

/// Multiply/add and parameter tallies for one execution path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    pub mults: u64,
    pub adds: u64,
    pub weight_scales: u64,
    pub weight_zero_points: u64,
    pub activation_scales: u64,
    pub activation_zero_points: u64,
}

impl OpCount {
    pub fn total_quant_params(&self) -> u64 {
        self.weight_scales
            + self.weight_zero_points
            + self.activation_scales
            + self.activation_zero_points
    }
}

/// Static multiply/add and parameter counts per path.
///
/// Conv core: `out_elems * n_terms` multiplies and `out_elems * (n_terms-1)`
/// adds plus one bias add per output element. Quantized paths add one
/// requantization multiply per non-terminal output element. The affine path
/// additionally pays for p1 (window sums: `windows * (n_terms-1)` adds, one
/// multiply per output element), p2 (per-channel kernel sums), p3 (two
/// multiplies per channel), and three combining adds per output element.
pub fn count_ops(qg: &QuantizedGraph, path: ExecPath) -> Result<OpCount> {
    let shapes = qg.graph.infer_shapes()?;
    let consumers = qg.graph.consumers();
    let quantized = !matches!(path, ExecPath::Float);
    let affine = matches!(path, ExecPath::IntAffine);
    let mut count = OpCount::default();
    if quantized {
        count.activation_scales += 1; // graph input
        if matches!(qg.scheme, QuantScheme::Affine) {
            count.activation_zero_points += 1;
        }
    }
    for node in &qg.graph.nodes {
        let out_elems = shapes[&node.id].len() as u64;
        match &node.kind {
            NodeKind::Conv2d { .. } | NodeKind::FullyConnected => {
                let w = qg.graph.param_tensor(node, "weight")?;
                let out_channels = w.shape().dims()[0] as u64;
                let n_terms = (w.shape().len() as u64) / out_channels;
                let windows = out_elems / out_channels;
                count.mults += out_elems * n_terms;
                count.adds += out_elems * (n_terms - 1) + out_elems; // core + bias
                let terminal = consumers.get(node.id.as_str()).map_or(true, |v| v.is_empty());
                if quantized {
                    if !terminal {
                        count.mults += out_elems; // requantization
                        count.activation_scales += 1;
                        if matches!(qg.scheme, QuantScheme::Affine) {
                            count.activation_zero_points += 1;
                        }
                    }
                    let scales = match qg.granularity {
                        Granularity::PerTensor => 1,
                        Granularity::PerChannel => out_channels,
                    };
                    count.weight_scales += scales;
                    if matches!(qg.scheme, QuantScheme::Affine) {
                        count.weight_zero_points += scales;
                    }
                }
                if affine {
                    count.adds += windows * (n_terms - 1); // p1 window sums
                    count.mults += out_elems; // z_w * S per output element
                    count.adds += out_channels * (n_terms - 1); // p2 kernel sums
                    count.mults += out_channels; // z_x * sum
                    count.mults += 2 * out_channels; // p3 = n * z_x * z_w
                    count.adds += 3 * out_elems; // combine p0 - p1 - p2 + p3
                }
            }
            NodeKind::AvgPool { k, .. } => {
                count.adds += out_elems * ((k * k - 1) as u64);
                count.mults += out_elems; // division by the window size
            }
            NodeKind::GlobalAvgPool => {
                let in_shape = &shapes[&node.inputs[0]];
                let (_, _, h, w) = in_shape.nchw()?;
                count.adds += out_elems * ((h * w - 1) as u64);
                count.mults += out_elems;
            }
            NodeKind::Add => {
                count.adds += out_elems;
                if quantized {
                    count.mults += 2 * out_elems; // operand rescales
                    count.activation_scales += 1;
                    if matches!(qg.scheme, QuantScheme::Affine) {
                        count.activation_zero_points += 1;
                    }
                }
            }
            NodeKind::MaxPool { .. } | NodeKind::Relu | NodeKind::Flatten => {}
            NodeKind::BatchNorm { .. } => {
                return Err(Error::QuantizedGraphInvalid {
                    context: format!("node {} is an unfolded batch norm", node.id),
                })
            }
        }
    }
    Ok(count)
}
