//! Direct 2-D convolutions (cross-correlation) for the float reference path
//! and the true-integer path.
//!
//! The float kernel's per-element accumulation order is part of its contract:
//! input channel outer, then kernel rows, then kernel columns. Two runs on
//! identical inputs are bit-identical. The integer kernel accumulates in i64
//! and reports rather than wraps on int32 overflow; its result is
//! order-independent, so parallelism never changes it.

use super::{Shape, TensorAcc, TensorF, TensorQ};
use crate::error::{Error, Result};
use rayon::prelude::*;

fn out_extent(input: usize, pad: usize, k: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch {
            context: format!("kernel {k} larger than padded input {padded}"),
        });
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::ShapeMismatch {
            context: "convolution output extent is zero".into(),
        });
    }
    Ok(out)
}

struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn check_conv_shapes(
    input: &Shape,
    weight: &Shape,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<ConvDims> {
    let (n, c_in, h, w) = input.nchw()?;
    let (c_out, wc_in, kh, kw) = weight.nchw()?;
    if c_in != wc_in {
        return Err(Error::ShapeMismatch {
            context: format!("input has {c_in} channels, weight expects {wc_in}"),
        });
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::ShapeMismatch {
            context: "stride must be >= 1".into(),
        });
    }
    let oh = out_extent(h, pad.0, kh, stride.0)?;
    let ow = out_extent(w, pad.1, kw, stride.1)?;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Float reference convolution. `weight` is OIHW; optional `bias` has one
/// value per output channel. Accumulation is f32 with the fixed loop nest
/// (input channel, kernel row, kernel column) per output element.
pub fn conv2d_f32(
    input: &TensorF,
    weight: &TensorF,
    bias: Option<&TensorF>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorF> {
    let ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    } = check_conv_shapes(input.shape(), weight.shape(), stride, pad)?;

    if let Some(b) = bias {
        if b.shape().dims() != [c_out] {
            return Err(Error::ShapeMismatch {
                context: format!("bias shape {} does not match {c_out} output channels", b.shape()),
            });
        }
    }

    let x = input.data();
    let k = weight.data();
    let mut out = vec![0.0f32; n * c_out * oh * ow];

    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(chunk, plane)| {
            let b = chunk / c_out;
            let oc = chunk % c_out;
            let bias_v = bias.map_or(0.0, |t| t.data()[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c_in + ic) * h + iy as usize) * w + ix as usize;
                                let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                acc += x[xi] * k[wi];
                            }
                        }
                    }
                    plane[oy * ow + ox] = acc + bias_v;
                }
            }
        });

    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index,
            context: "conv2d_f32 output".into(),
        });
    }
    TensorF::new(Shape::new(vec![n, c_out, oh, ow])?, out)
}

/// Integer convolution with zero padding: the int8 path of the symmetric
/// scheme, where code 0 is real 0. Accumulates exactly in i64 and errors if
/// any output exceeds the int32 range.
pub fn conv2d_int(
    input: &TensorQ,
    weight: &TensorQ,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<TensorAcc> {
    conv2d_int_padded(input, weight, stride, pad, 0)
}

/// Integer convolution where padding contributes `pad_value` instead of 0.
/// The affine path pads with the activation zero-point; everything else
/// matches [`conv2d_int`].
pub fn conv2d_int_padded(
    input: &TensorQ,
    weight: &TensorQ,
    stride: (usize, usize),
    pad: (usize, usize),
    pad_value: i16,
) -> Result<TensorAcc> {
    let ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        oh,
        ow,
    } = check_conv_shapes(input.shape(), weight.shape(), stride, pad)?;

    let x = input.data();
    let k = weight.data();
    let mut out = vec![0i32; n * c_out * oh * ow];

    let results: Vec<Result<()>> = out
        .par_chunks_mut(oh * ow)
        .enumerate()
        .map(|(chunk, plane)| {
            let b = chunk / c_out;
            let oc = chunk % c_out;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                let xv = if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize
                                {
                                    pad_value as i64
                                } else {
                                    x[((b * c_in + ic) * h + iy as usize) * w + ix as usize] as i64
                                };
                                let wv = k[((oc * c_in + ic) * kh + ky) * kw + kx] as i64;
                                acc += xv * wv;
                            }
                        }
                    }
                    if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                        return Err(Error::AccOverflow {
                            index: (chunk * oh * ow) + oy * ow + ox,
                            value: acc,
                        });
                    }
                    plane[oy * ow + ox] = acc as i32;
                }
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }

    TensorAcc::new(Shape::new(vec![n, c_out, oh, ow])?, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tf(dims: Vec<usize>, data: Vec<f32>) -> TensorF {
        TensorF::new(Shape::new(dims).unwrap(), data).unwrap()
    }

    fn tq(dims: Vec<usize>, data: Vec<i16>) -> TensorQ {
        TensorQ::new(Shape::new(dims).unwrap(), data, -127, 127).unwrap()
    }

    #[test]
    fn all_ones_3x3_by_2x2_gives_all_fours() {
        let input = tf(vec![1, 1, 3, 3], vec![1.0; 9]);
        let weight = tf(vec![1, 1, 2, 2], vec![1.0; 4]);
        let out = conv2d_f32(&input, &weight, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(out.shape().dims(), [1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let input = tf(vec![1, 1, 3, 3], (0..9).map(|v| v as f32).collect());
        let weight = tf(vec![1, 1, 1, 1], vec![1.0]);
        let out = conv2d_f32(&input, &weight, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn int_all_ones_gives_all_fours() {
        let input = tq(vec![1, 1, 3, 3], vec![1; 9]);
        let weight = tq(vec![1, 1, 2, 2], vec![1; 4]);
        let out = conv2d_int(&input, &weight, (1, 1), (0, 0)).unwrap();
        assert_eq!(out.data(), &[4, 4, 4, 4]);
    }

    #[test]
    fn int_zero_operand_gives_zero_output() {
        let input = tq(vec![1, 1, 3, 3], vec![0; 9]);
        let weight = tq(vec![1, 1, 2, 2], vec![5, -3, 2, 7]);
        let out = conv2d_int(&input, &weight, (1, 1), (0, 0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = tf(vec![1, 2, 3, 3], vec![1.0; 18]);
        let weight = tf(vec![1, 3, 2, 2], vec![1.0; 12]);
        let err = conv2d_f32(&input, &weight, None, (1, 1), (0, 0)).unwrap_err();
        assert_eq!(err.code(), "tensor/shape-mismatch");
    }

    #[test]
    fn float_conv_is_deterministic_across_runs() {
        let input = tf(vec![2, 3, 6, 6], (0..216).map(|v| (v as f32) * 0.113 - 9.0).collect());
        let weight = tf(vec![4, 3, 3, 3], (0..108).map(|v| (v as f32) * 0.071 - 3.0).collect());
        let a = conv2d_f32(&input, &weight, None, (1, 1), (1, 1)).unwrap();
        let b = conv2d_f32(&input, &weight, None, (1, 1), (1, 1)).unwrap();
        let eq = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(eq);
    }
}
