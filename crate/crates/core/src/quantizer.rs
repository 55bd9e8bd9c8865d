//! Quantization parameters and the transforms between the real, quantized,
//! and dequantized zones.
//!
//! Conventions, fixed once for the whole toolkit so every oracle agrees:
//!
//! * the scale factor is a **multiplier**: `q = round(s * x)`, dequantize
//!   divides;
//! * rounding is **half away from zero** everywhere ([`round_half_away`]);
//! * the signed symmetric clip range is `[-(2^(b-1) - 1), 2^(b-1) - 1]`
//!   (so 8-bit is `[-127, 127]` and negation stays closed);
//! * the symmetric (scale) scheme has zero-point 0 and range min 0 by
//!   definition.
//!
//! Scale computation: the affine scheme uses `s = (2^b - 1) / (alpha - beta)`
//! with `z = -round(beta * s) - 2^(b-1)`. The symmetric scheme maps the
//! observed range onto the integer range: `s = (2^b - 1) / alpha` for an
//! unsigned set (range `[0, alpha]`), and `s = (2^(b-1) - 1) / alpha` for a
//! signed set (`alpha = max |x|`), so every in-range value survives the
//! round trip within `0.5 / s`.

use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind, INPUT_ID};
use crate::tensor::{Shape, TensorF, TensorQ};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// The toolkit-wide rounding rule: round half away from zero.
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    /// Asymmetric: scale plus zero-point.
    Affine,
    /// Symmetric: scale only, zero-point pinned to 0.
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One parameter set per output channel; conv/fc weights only.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumberSetClass {
    Signed,
    /// All values >= 0, e.g. post-relu activations.
    Unsigned,
}

/// Scale, zero-point and observed range for one channel (or the whole
/// tensor under per-tensor granularity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub scale: f32,
    pub zero_point: i32,
    pub alpha: f32,
    pub beta: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: QuantScheme,
    pub granularity: Granularity,
    pub bits: u8,
    pub class: NumberSetClass,
    /// One entry under per-tensor granularity, one per output channel
    /// otherwise.
    pub channels: Vec<ChannelParams>,
}

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::BitsOutOfRange {
            bits,
            lo: MIN_BITS,
            hi: MAX_BITS,
        });
    }
    Ok(())
}

impl QuantParams {
    /// Inclusive integer code range for these parameters.
    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.scheme, self.class, self.bits)
    }

    /// The single parameter set of a per-tensor quantizer.
    pub fn single(&self) -> &ChannelParams {
        debug_assert_eq!(self.channels.len(), 1);
        &self.channels[0]
    }

    pub fn scale(&self) -> f32 {
        self.single().scale
    }

    pub fn zero_point(&self) -> i32 {
        self.single().zero_point
    }

    pub fn is_zero_point_free(&self) -> bool {
        self.channels.iter().all(|c| c.zero_point == 0)
    }

    /// Per-tensor params with scale 1 and zero-point 0: the documented
    /// fallback for degenerate all-zero number sets.
    pub fn degenerate_fallback(
        bits: u8,
        scheme: QuantScheme,
        class: NumberSetClass,
    ) -> Result<Self> {
        check_bits(bits)?;
        Ok(QuantParams {
            scheme,
            granularity: Granularity::PerTensor,
            bits,
            class,
            channels: vec![ChannelParams {
                scale: 1.0,
                zero_point: 0,
                alpha: 0.0,
                beta: 0.0,
            }],
        })
    }
}

fn code_range(scheme: QuantScheme, class: NumberSetClass, bits: u8) -> (i32, i32) {
    let b = bits as u32;
    match (scheme, class) {
        // Signed symmetric excludes the most negative code so negation is
        // closed: [-(2^(b-1) - 1), 2^(b-1) - 1].
        (QuantScheme::Scale, NumberSetClass::Signed) => {
            let hi = (1i32 << (b - 1)) - 1;
            (-hi, hi)
        }
        (QuantScheme::Scale, NumberSetClass::Unsigned) => (0, (1i32 << b) - 1),
        (QuantScheme::Affine, _) => (-(1i32 << (b - 1)), (1i32 << (b - 1)) - 1),
    }
}

fn params_for_range(
    min: f32,
    max: f32,
    bits: u8,
    scheme: QuantScheme,
    class: NumberSetClass,
    context: &str,
    allow_degenerate: bool,
) -> Result<ChannelParams> {
    let levels = ((1u32 << bits) - 1) as f32;
    match scheme {
        QuantScheme::Scale => {
            let alpha = match class {
                NumberSetClass::Signed => min.abs().max(max.abs()),
                NumberSetClass::Unsigned => max,
            };
            if alpha <= 0.0 {
                if allow_degenerate {
                    return Ok(ChannelParams {
                        scale: 1.0,
                        zero_point: 0,
                        alpha: 0.0,
                        beta: 0.0,
                    });
                }
                return Err(Error::DegenerateRange {
                    context: context.to_string(),
                });
            }
            let scale = match class {
                NumberSetClass::Unsigned => levels / alpha,
                NumberSetClass::Signed => (((1u32 << (bits - 1)) - 1) as f32) / alpha,
            };
            Ok(ChannelParams {
                scale,
                zero_point: 0,
                alpha,
                beta: 0.0,
            })
        }
        QuantScheme::Affine => {
            let (beta, alpha) = (min, max);
            if alpha <= beta {
                if allow_degenerate {
                    return Ok(ChannelParams {
                        scale: 1.0,
                        zero_point: 0,
                        alpha,
                        beta,
                    });
                }
                return Err(Error::DegenerateRange {
                    context: context.to_string(),
                });
            }
            let scale = levels / (alpha - beta);
            let (lo, hi) = code_range(scheme, class, bits);
            let z = -round_half_away(beta * scale) - (1i64 << (bits - 1)) as f32;
            let zero_point = (z as i64).clamp(lo as i64, hi as i64) as i32;
            Ok(ChannelParams {
                scale,
                zero_point,
                alpha,
                beta,
            })
        }
    }
}

/// Compute quantization parameters from the observed min/max of `values`.
/// Per-channel granularity treats the first axis as output channels and
/// computes one parameter set per slice.
pub fn compute_params(
    values: &TensorF,
    bits: u8,
    scheme: QuantScheme,
    granularity: Granularity,
    class: NumberSetClass,
) -> Result<QuantParams> {
    compute_params_opt(values, bits, scheme, granularity, class, false)
}

/// [`compute_params`] with an opt-in `scale = 1, z = 0` fallback for
/// degenerate all-zero number sets.
pub fn compute_params_opt(
    values: &TensorF,
    bits: u8,
    scheme: QuantScheme,
    granularity: Granularity,
    class: NumberSetClass,
    allow_degenerate: bool,
) -> Result<QuantParams> {
    check_bits(bits)?;
    if matches!(class, NumberSetClass::Unsigned) && values.min() < 0.0 {
        return Err(Error::GraphInvalid {
            context: format!(
                "unsigned number set contains negative value {}",
                values.min()
            ),
        });
    }
    let channels = match granularity {
        Granularity::PerTensor => vec![params_for_range(
            values.min(),
            values.max(),
            bits,
            scheme,
            class,
            "per-tensor number set",
            allow_degenerate,
        )?],
        Granularity::PerChannel => {
            let dims = values.shape().dims();
            let out_channels = dims[0];
            let span = values.shape().len() / out_channels;
            let mut sets = Vec::with_capacity(out_channels);
            for c in 0..out_channels {
                let slice = &values.data()[c * span..(c + 1) * span];
                let min = slice.iter().fold(f32::INFINITY, |m, &v| m.min(v));
                let max = slice.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                sets.push(params_for_range(
                    min,
                    max,
                    bits,
                    scheme,
                    class,
                    &format!("channel {c}"),
                    allow_degenerate,
                )?);
            }
            sets
        }
    };
    Ok(QuantParams {
        scheme,
        granularity,
        bits,
        class,
        channels,
    })
}

fn quantize_value(x: f32, p: &ChannelParams, lo: i32, hi: i32) -> i16 {
    let q = round_half_away(p.scale * x) + p.zero_point as f32;
    (q.max(lo as f32).min(hi as f32)) as i16
}

/// Transform from the real zone to the quantized zone: clip(round(s*x) + z).
pub fn quantize(values: &TensorF, p: &QuantParams) -> Result<TensorQ> {
    let (lo, hi) = p.code_range();
    let data: Vec<i16> = match p.granularity {
        Granularity::PerTensor => {
            let cp = p.single();
            values
                .data()
                .iter()
                .map(|&x| quantize_value(x, cp, lo, hi))
                .collect()
        }
        Granularity::PerChannel => {
            let out_channels = p.channels.len();
            let dims = values.shape().dims();
            if dims[0] != out_channels {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "per-channel params have {out_channels} channels, tensor has {}",
                        dims[0]
                    ),
                });
            }
            let span = values.shape().len() / out_channels;
            values
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| quantize_value(x, &p.channels[i / span], lo, hi))
                .collect()
        }
    };
    TensorQ::new(values.shape().clone(), data, lo, hi)
}

/// Transform from the quantized zone to the dequantized zone:
/// `(q - z) / s` (which is `q / s` under the symmetric scheme).
pub fn dequantize(q: &TensorQ, p: &QuantParams) -> Result<TensorF> {
    let data: Vec<f32> = match p.granularity {
        Granularity::PerTensor => {
            let cp = p.single();
            q.data()
                .iter()
                .map(|&v| (v as f32 - cp.zero_point as f32) / cp.scale)
                .collect()
        }
        Granularity::PerChannel => {
            let out_channels = p.channels.len();
            let dims = q.shape().dims();
            if dims[0] != out_channels {
                return Err(Error::ShapeMismatch {
                    context: format!(
                        "per-channel params have {out_channels} channels, tensor has {}",
                        dims[0]
                    ),
                });
            }
            let span = q.shape().len() / out_channels;
            q.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let cp = &p.channels[i / span];
                    (v as f32 - cp.zero_point as f32) / cp.scale
                })
                .collect()
        }
    };
    TensorF::new(q.shape().clone(), data)
}

// ---------------------------------------------------------------------------
// Data-free activation calibration
// ---------------------------------------------------------------------------

/// Per-node activation statistics and the params derived from them. The map
/// includes the graph input under the reserved id `input`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationParams {
    pub params: BTreeMap<String, QuantParams>,
}

#[derive(Debug, Clone, Copy)]
struct RangeStat {
    min: f32,
    max: f32,
}

impl RangeStat {
    fn empty() -> Self {
        RangeStat {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
        }
    }

    fn update(&mut self, t: &TensorF) {
        self.min = self.min.min(t.min());
        self.max = self.max.max(t.max());
    }
}

/// Nodes whose output is provably non-negative: relu, and shape- or
/// order-preserving nodes fed only by non-negative producers.
fn nonneg_nodes(graph: &Graph) -> BTreeMap<&str, bool> {
    let mut flags: BTreeMap<&str, bool> = BTreeMap::new();
    flags.insert(INPUT_ID, false);
    for node in &graph.nodes {
        let all_inputs_nonneg = node
            .inputs
            .iter()
            .all(|i| *flags.get(i.as_str()).unwrap_or(&false));
        let flag = match node.kind {
            NodeKind::Relu => true,
            NodeKind::MaxPool { .. }
            | NodeKind::AvgPool { .. }
            | NodeKind::GlobalAvgPool
            | NodeKind::Flatten
            | NodeKind::Add => all_inputs_nonneg,
            NodeKind::Conv2d { .. } | NodeKind::FullyConnected | NodeKind::BatchNorm { .. } => {
                false
            }
        };
        flags.insert(&node.id, flag);
    }
    flags
}

/// Data-free static activation calibration: run the float engine on
/// `n_batches` standard-normal inputs from a seeded generator, record
/// per-node ranges, and derive per-tensor activation parameters. Post-relu
/// (and provably non-negative) nodes get unsigned parameters under the
/// symmetric scheme.
pub fn calibrate_activations(
    graph: &Graph,
    bits: u8,
    scheme: QuantScheme,
    n_batches: usize,
    seed: u64,
    allow_degenerate: bool,
) -> Result<ActivationParams> {
    check_bits(bits)?;
    if n_batches == 0 {
        return Err(Error::GraphInvalid {
            context: "calibration requires n_batches >= 1".into(),
        });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut stats: BTreeMap<String, RangeStat> = BTreeMap::new();
    stats.insert(INPUT_ID.to_string(), RangeStat::empty());
    for node in &graph.nodes {
        stats.insert(node.id.clone(), RangeStat::empty());
    }

    let count = graph.input_shape.len();
    for _ in 0..n_batches {
        let data: Vec<f32> = (0..count)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
            .collect();
        let input = TensorF::new(graph.input_shape.clone(), data)?;
        stats.get_mut(INPUT_ID).unwrap().update(&input);
        let trace = engine::run_float_traced(graph, &input)?;
        for (id, tensor) in &trace.nodes {
            stats.get_mut(id).unwrap().update(tensor);
        }
    }

    let nonneg = nonneg_nodes(graph);
    let mut params = BTreeMap::new();
    for (id, stat) in &stats {
        let class = if *nonneg.get(id.as_str()).unwrap_or(&false) {
            NumberSetClass::Unsigned
        } else {
            NumberSetClass::Signed
        };
        let cp = params_for_range(
            stat.min,
            stat.max,
            bits,
            scheme,
            class,
            &format!("activation of node {id}"),
            allow_degenerate,
        )?;
        params.insert(
            id.clone(),
            QuantParams {
                scheme,
                granularity: Granularity::PerTensor,
                bits,
                class,
                channels: vec![cp],
            },
        );
    }
    Ok(ActivationParams { params })
}

/// Standard-normal input batch used by calibration; exposed so tests and
/// fixtures can reproduce the exact stream.
pub fn normal_tensor(shape: &Shape, rng: &mut rand_chacha::ChaCha8Rng) -> TensorF {
    let data: Vec<f32> = (0..shape.len())
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) as f32)
        .collect();
    TensorF::new(shape.clone(), data).expect("normal samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tf(data: Vec<f32>) -> TensorF {
        TensorF::new(Shape::new(vec![data.len()]).unwrap(), data).unwrap()
    }

    #[test]
    fn affine_symmetric_range_forces_zero_point_zero() {
        // alpha = 1, beta = -1, b = 8: s = 255/2 = 127.5 and z lands on 0.
        let p = compute_params(
            &tf(vec![-1.0, 0.25, 1.0]),
            8,
            QuantScheme::Affine,
            Granularity::PerTensor,
            NumberSetClass::Signed,
        )
        .unwrap();
        assert_eq!(p.scale(), 127.5);
        assert_eq!(p.zero_point(), 0);
    }

    #[test]
    fn unsigned_scale_with_alpha_255_gives_unit_scale() {
        let p = compute_params(
            &tf(vec![0.0, 10.0, 255.0]),
            8,
            QuantScheme::Scale,
            Granularity::PerTensor,
            NumberSetClass::Unsigned,
        )
        .unwrap();
        assert_eq!(p.scale(), 1.0);
        assert_eq!(p.zero_point(), 0);
        assert_eq!(p.code_range(), (0, 255));
    }

    #[test]
    fn signed_scale_keeps_full_range_within_clip() {
        // alpha = max|x| = 2, b = 8: s = 127/2, so s*alpha = 127 exactly.
        let p = compute_params(
            &tf(vec![-2.0, 0.1, 1.5]),
            8,
            QuantScheme::Scale,
            Granularity::PerTensor,
            NumberSetClass::Signed,
        )
        .unwrap();
        assert_eq!(p.scale(), 63.5);
        assert_eq!(p.zero_point(), 0);
        assert_eq!(p.code_range(), (-127, 127));
    }

    #[test]
    fn quantize_rounds_and_clips() {
        let p = QuantParams {
            scheme: QuantScheme::Scale,
            granularity: Granularity::PerTensor,
            bits: 8,
            class: NumberSetClass::Signed,
            channels: vec![ChannelParams {
                scale: 1.0,
                zero_point: 0,
                alpha: 127.0,
                beta: 0.0,
            }],
        };
        let q = quantize(&tf(vec![3.4, 200.0, -200.0, -3.5]), &p).unwrap();
        assert_eq!(q.data(), &[3, 127, -127, -4]); // -3.5 rounds away from zero
    }

    #[test]
    fn zero_maps_to_zero_under_scale_scheme() {
        let p = compute_params(
            &tf(vec![-1.0, 1.0]),
            8,
            QuantScheme::Scale,
            Granularity::PerTensor,
            NumberSetClass::Signed,
        )
        .unwrap();
        let q = quantize(&tf(vec![0.0, 0.0]), &p).unwrap();
        assert_eq!(q.data(), &[0, 0]);
        let back = dequantize(&q, &p).unwrap();
        assert_eq!(back.data(), &[0.0, 0.0]);
    }

    #[test]
    fn dequantize_127_at_scale_127_gives_one() {
        let p = QuantParams {
            scheme: QuantScheme::Scale,
            granularity: Granularity::PerTensor,
            bits: 8,
            class: NumberSetClass::Signed,
            channels: vec![ChannelParams {
                scale: 127.0,
                zero_point: 0,
                alpha: 1.0,
                beta: 0.0,
            }],
        };
        let q = TensorQ::new(Shape::new(vec![1]).unwrap(), vec![127], -127, 127).unwrap();
        assert_eq!(dequantize(&q, &p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn per_channel_params_match_per_slice_computation() {
        let t = TensorF::new(
            Shape::new(vec![3, 4]).unwrap(),
            vec![
                0.1, -0.4, 0.3, 0.2, //
                2.0, -1.0, 0.5, 0.0, //
                -8.0, 4.0, 1.0, -0.5,
            ],
        )
        .unwrap();
        let pc = compute_params(
            &t,
            8,
            QuantScheme::Scale,
            Granularity::PerChannel,
            NumberSetClass::Signed,
        )
        .unwrap();
        assert_eq!(pc.channels.len(), 3);
        for c in 0..3 {
            let slice = TensorF::new(
                Shape::new(vec![4]).unwrap(),
                t.data()[c * 4..(c + 1) * 4].to_vec(),
            )
            .unwrap();
            let pt = compute_params(
                &slice,
                8,
                QuantScheme::Scale,
                Granularity::PerTensor,
                NumberSetClass::Signed,
            )
            .unwrap();
            assert_eq!(pc.channels[c], *pt.single());
        }
    }

    #[test]
    fn single_channel_per_channel_equals_per_tensor() {
        let t = TensorF::new(Shape::new(vec![1, 6]).unwrap(), vec![0.3, -2.0, 1.0, 0.0, 0.7, -0.1])
            .unwrap();
        let pc = compute_params(&t, 8, QuantScheme::Scale, Granularity::PerChannel, NumberSetClass::Signed).unwrap();
        let pt = compute_params(&t, 8, QuantScheme::Scale, Granularity::PerTensor, NumberSetClass::Signed).unwrap();
        assert_eq!(pc.channels, pt.channels);
    }

    #[test]
    fn all_zero_set_is_degenerate_unless_opted_in() {
        let t = tf(vec![0.0; 8]);
        let err = compute_params(
            &t,
            8,
            QuantScheme::Scale,
            Granularity::PerTensor,
            NumberSetClass::Signed,
        )
        .unwrap_err();
        assert_eq!(err.code(), "quantizer/degenerate-range");
        let p = compute_params_opt(
            &t,
            8,
            QuantScheme::Scale,
            Granularity::PerTensor,
            NumberSetClass::Signed,
            true,
        )
        .unwrap();
        assert_eq!(p.scale(), 1.0);
        assert_eq!(p.zero_point(), 0);
    }

    #[test]
    fn bits_out_of_range_is_rejected() {
        let t = tf(vec![1.0]);
        assert!(compute_params(&t, 1, QuantScheme::Scale, Granularity::PerTensor, NumberSetClass::Signed).is_err());
        assert!(compute_params(&t, 9, QuantScheme::Scale, Granularity::PerTensor, NumberSetClass::Signed).is_err());
    }

    #[test]
    fn roundtrip_error_bounded_on_fine_grid() {
        // Exhaustive over a fine grid of x in [-alpha, alpha].
        let alpha = 1.7f32;
        let p = compute_params(
            &tf(vec![-alpha, alpha * 0.3]),
            8,
            QuantScheme::Scale,
            Granularity::PerTensor,
            NumberSetClass::Signed,
        )
        .unwrap();
        let bound = 0.5 / p.scale();
        for i in 0..=2000 {
            let x = -alpha + (2.0 * alpha) * (i as f32) / 2000.0;
            let q = quantize(&tf(vec![x]), &p).unwrap();
            let back = dequantize(&q, &p).unwrap().data()[0];
            assert!(
                (x - back).abs() <= bound,
                "x={x} back={back} bound={bound}"
            );
        }
    }
}
