//! Flip-based data-free weight rounding.
//!
//! Rounding starts from nearest (every per-element error within 0.5, the
//! element-level goal) and then flips individual roundings to their other
//! neighbor so the accumulated error is bounded at two more levels:
//!
//! * kernel level: for each H*W window of an OIHW conv weight (each row of
//!   an fc weight), the absolute sum of error ends within 0.5;
//! * channel level: treating kernel sums as elements, each output channel's
//!   total ends within 0.5, paying one extra element flip inside each
//!   chosen kernel.
//!
//! A flip moves a code by exactly one step toward the other neighbor, so
//! per-element error stays below 1.0. Flips pick the unfrozen element with
//! the largest error in the sign of the excess, lowest flat index on ties,
//! which reaches the bound with the minimum number of flips. Elements
//! clipped by the code range are frozen and excluded. Error sums are
//! accumulated in f64, which is exact for desk-scale kernels.
//!
//! The whole pass sees only weights: there is no dataset interface here.

use crate::error::{Error, Result};
use crate::quantizer::{self, QuantParams};
use crate::tensor::{TensorF, TensorQ};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    Nearest,
    Squant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundWarningReason {
    /// All candidates frozen by clipping; the kernel bound is unreachable.
    ClipFrozen,
    /// The channel-level pass flipped this kernel past its own bound.
    ChannelOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundWarning {
    pub channel: usize,
    pub kernel: usize,
    pub achieved_ase: f64,
    pub reason: BoundWarningReason,
}

/// Per-kernel and per-channel rounding-error statistics for one weight
/// tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    /// Kernels per channel (conv: input-channel count; fc: 1).
    pub kernels_per_channel: usize,
    pub channels: usize,
    /// |sum of error| per kernel before any flips, flattened channel-major.
    pub kernel_ase_before: Vec<f64>,
    /// |sum of error| per kernel after calibration.
    pub kernel_ase_after: Vec<f64>,
    /// |sum over the channel| before flips.
    pub channel_ase_before: Vec<f64>,
    pub channel_ase_after: Vec<f64>,
    pub flips_per_kernel: Vec<u32>,
    pub warnings: Vec<BoundWarning>,
    /// Wall-clock of the calibration pass. Excluded from deterministic
    /// report files; see metrics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

impl CalibReport {
    pub fn total_flips(&self) -> u64 {
        self.flips_per_kernel.iter().map(|&f| f as u64).sum()
    }

    pub fn max_kernel_ase_after(&self) -> f64 {
        self.kernel_ase_after.iter().cloned().fold(0.0, f64::max)
    }

    /// Max kernel ASE over kernels not covered by a warning.
    pub fn max_unflagged_kernel_ase(&self) -> f64 {
        let flagged: std::collections::BTreeSet<usize> = self
            .warnings
            .iter()
            .map(|w| w.channel * self.kernels_per_channel + w.kernel)
            .collect();
        self.kernel_ase_after
            .iter()
            .enumerate()
            .filter(|(i, _)| !flagged.contains(i))
            .map(|(_, &v)| v)
            .fold(0.0, f64::max)
    }

    pub fn max_channel_ase_after(&self) -> f64 {
        self.channel_ase_after.iter().cloned().fold(0.0, f64::max)
    }
}

struct Element {
    /// Scaled weight value v = s * w.
    v: f32,
    /// Current integer code.
    q: i32,
    /// Frozen by clipping: nearest code fell outside the range.
    frozen: bool,
    flipped: bool,
}

impl Element {
    fn error(&self) -> f64 {
        self.v as f64 - self.q as f64
    }
}

struct Kernel {
    elements: Vec<Element>,
}

impl Kernel {
    fn error_sum(&self) -> f64 {
        self.elements.iter().map(Element::error).sum()
    }

    /// Index of the best flip candidate in `direction` (+1 reduces the sum
    /// by flipping the most positive error up; -1 the mirror). `None` when
    /// no unfrozen, unflipped element with an error of the right sign and
    /// room in the code range remains.
    fn best_candidate(&self, direction: i32, lo: i32, hi: i32) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.elements.iter().enumerate() {
            if e.frozen || e.flipped {
                continue;
            }
            let err = e.error();
            let (sign_ok, room) = if direction > 0 {
                (err > 0.0, e.q < hi)
            } else {
                (err < 0.0, e.q > lo)
            };
            if !sign_ok || !room {
                continue;
            }
            let magnitude = err.abs();
            match best {
                Some((_, m)) if m >= magnitude => {}
                _ => best = Some((i, magnitude)),
            }
        }
        best.map(|(i, _)| i)
    }

    fn flip(&mut self, index: usize, direction: i32) {
        let e = &mut self.elements[index];
        e.q += direction;
        e.flipped = true;
    }
}

/// Kernel partitioning of a weight tensor: conv OIHW tensors have O
/// channels of I kernels (H*W elements each); fc tensors have O channels
/// of a single kernel (the row). The channel pass is skipped for fc.
fn partition(weight: &TensorF) -> Result<(usize, usize, usize, bool)> {
    match weight.shape().dims() {
        &[o, i, h, w] => Ok((o, i, h * w, true)),
        &[o, i] => Ok((o, 1, i, false)),
        other => Err(Error::InvalidShape {
            context: format!("squant expects OIHW conv or [out, in] fc weights, got {other:?}"),
        }),
    }
}

/// Plain nearest rounding through the shared quantize path; the baseline
/// arm in comparisons.
pub fn nearest_round(weight: &TensorF, p: &QuantParams) -> Result<TensorQ> {
    quantizer::quantize(weight, p)
}

/// Flip-calibrated rounding. Returns the quantized weights together with
/// the per-kernel/per-channel error report.
pub fn squant_round(weight: &TensorF, p: &QuantParams) -> Result<(TensorQ, CalibReport)> {
    let start = Instant::now();
    let (channels, kernels_per_channel, kernel_len, channel_pass) = partition(weight)?;
    let (lo, hi) = p.code_range();

    let scale_of = |c: usize| -> f32 {
        match p.granularity {
            quantizer::Granularity::PerTensor => p.single().scale,
            quantizer::Granularity::PerChannel => p.channels[c].scale,
        }
    };
    let zp_of = |c: usize| -> i32 {
        match p.granularity {
            quantizer::Granularity::PerTensor => p.single().zero_point,
            quantizer::Granularity::PerChannel => p.channels[c].zero_point,
        }
    };

    let data = weight.data();
    let mut kernel_ase_before = Vec::with_capacity(channels * kernels_per_channel);
    let mut kernel_ase_after = Vec::with_capacity(channels * kernels_per_channel);
    let mut channel_ase_before = Vec::with_capacity(channels);
    let mut channel_ase_after = Vec::with_capacity(channels);
    let mut flips_per_kernel = vec![0u32; channels * kernels_per_channel];
    let mut warnings = Vec::new();
    let mut out = vec![0i16; data.len()];

    let span = kernels_per_channel * kernel_len;
    for c in 0..channels {
        let s = scale_of(c);
        let z = zp_of(c);
        let mut kernels: Vec<Kernel> = Vec::with_capacity(kernels_per_channel);
        for k in 0..kernels_per_channel {
            let base = c * span + k * kernel_len;
            let elements = data[base..base + kernel_len]
                .iter()
                .map(|&w| {
                    // The error model tracks v against the zero-point-shifted
                    // code so e = v - (q - z) regardless of scheme.
                    let v = s * w;
                    let nearest = quantizer::round_half_away(v) as i32;
                    let q = (nearest + z).clamp(lo, hi) - z;
                    Element {
                        v,
                        q,
                        frozen: q != nearest,
                        flipped: false,
                    }
                })
                .collect();
            kernels.push(Kernel { elements });
        }

        channel_ase_before.push(kernels.iter().map(Kernel::error_sum).sum::<f64>().abs());

        // Kernel-level pass.
        for (k, kernel) in kernels.iter_mut().enumerate() {
            let initial = kernel.error_sum();
            kernel_ase_before.push(initial.abs());
            let flips_wanted = initial.round().abs() as u32;
            let direction = if initial > 0.0 { 1 } else { -1 };
            let mut done = 0u32;
            while done < flips_wanted {
                match kernel.best_candidate(direction, lo, hi) {
                    Some(i) => {
                        kernel.flip(i, direction);
                        done += 1;
                    }
                    None => break,
                }
            }
            flips_per_kernel[c * kernels_per_channel + k] = done;
            let after = kernel.error_sum();
            if after.abs() > 0.5 {
                warnings.push(BoundWarning {
                    channel: c,
                    kernel: k,
                    achieved_ase: after.abs(),
                    reason: BoundWarningReason::ClipFrozen,
                });
            }
        }

        // Channel-level pass: one extra element flip inside each chosen
        // kernel until the channel total is within 0.5. Kernels with the
        // largest sum in the sign of the excess go first.
        if channel_pass {
            let total: f64 = kernels.iter().map(Kernel::error_sum).sum();
            let flips_wanted = total.round().abs() as u32;
            let direction = if total > 0.0 { 1 } else { -1 };
            let mut done = 0u32;
            while done < flips_wanted {
                let mut order: Vec<(usize, f64)> = kernels
                    .iter()
                    .enumerate()
                    .map(|(k, kr)| (k, kr.error_sum()))
                    .collect();
                order.sort_by(|a, b| {
                    let va = (a.1 * direction as f64, a.0);
                    let vb = (b.1 * direction as f64, b.0);
                    vb.0.partial_cmp(&va.0)
                        .unwrap()
                        .then_with(|| va.1.cmp(&vb.1))
                });
                let mut flipped_one = false;
                for (k, _) in order {
                    if let Some(i) = kernels[k].best_candidate(direction, lo, hi) {
                        kernels[k].flip(i, direction);
                        flips_per_kernel[c * kernels_per_channel + k] += 1;
                        let after = kernels[k].error_sum().abs();
                        if after > 0.5 {
                            warnings.push(BoundWarning {
                                channel: c,
                                kernel: k,
                                achieved_ase: after,
                                reason: BoundWarningReason::ChannelOverride,
                            });
                        }
                        flipped_one = true;
                        break;
                    }
                }
                if !flipped_one {
                    break;
                }
                done += 1;
            }
        }

        for (k, kernel) in kernels.iter().enumerate() {
            kernel_ase_after.push(kernel.error_sum().abs());
            let base = c * span + k * kernel_len;
            for (i, e) in kernel.elements.iter().enumerate() {
                out[base + i] = (e.q + z) as i16;
            }
        }
        channel_ase_after.push(kernels.iter().map(Kernel::error_sum).sum::<f64>().abs());
    }

    let tensor = TensorQ::new(weight.shape().clone(), out, lo, hi)?;
    let report = CalibReport {
        kernels_per_channel,
        channels,
        kernel_ase_before,
        kernel_ase_after,
        channel_ase_before,
        channel_ase_after,
        flips_per_kernel,
        warnings,
        wall_clock_ms: Some(start.elapsed().as_secs_f64() * 1e3),
    };
    Ok((tensor, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{ChannelParams, Granularity, NumberSetClass, QuantScheme};
    use crate::tensor::Shape;

    fn unit_params() -> QuantParams {
        QuantParams {
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
        }
    }

    fn fc_weight(rows: Vec<Vec<f32>>) -> TensorF {
        let r = rows.len();
        let c = rows[0].len();
        TensorF::new(Shape::new(vec![r, c]).unwrap(), rows.concat()).unwrap()
    }

    #[test]
    fn point_four_triple_flips_first_element() {
        // v = [0.4, 0.4, 0.4]: nearest [0,0,0], E = 1.2, one flip; ties
        // break to the lowest index.
        let w = fc_weight(vec![vec![0.4, 0.4, 0.4]]);
        let (q, report) = squant_round(&w, &unit_params()).unwrap();
        assert_eq!(q.data(), &[1, 0, 0]);
        assert_eq!(report.flips_per_kernel, vec![1]);
        let sum_after = report.kernel_ase_after[0];
        assert!((sum_after - 0.2).abs() < 1e-9, "got {sum_after}");
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn nearest_round_on_point_four_triple_exceeds_bound() {
        let w = fc_weight(vec![vec![0.4, 0.4, 0.4]]);
        let q = nearest_round(&w, &unit_params()).unwrap();
        assert_eq!(q.data(), &[0, 0, 0]);
        let ase: f32 = w.data().iter().map(|v| v - 0.0).sum();
        assert!((ase - 1.2).abs() < 1e-6);
    }

    #[test]
    fn integral_values_need_no_flips() {
        let w = fc_weight(vec![vec![3.0, -2.0, 0.0, 5.0]]);
        let (q, report) = squant_round(&w, &unit_params()).unwrap();
        assert_eq!(q.data(), &[3, -2, 0, 5]);
        assert_eq!(report.total_flips(), 0);
        assert_eq!(report.kernel_ase_after, vec![0.0]);
    }

    #[test]
    fn negative_excess_flips_downward() {
        let w = fc_weight(vec![vec![-0.4, -0.4, -0.4]]);
        let (q, report) = squant_round(&w, &unit_params()).unwrap();
        assert_eq!(q.data(), &[-1, 0, 0]);
        assert_eq!(report.flips_per_kernel, vec![1]);
    }

    #[test]
    fn per_element_error_stays_below_one_after_flips() {
        let w = fc_weight(vec![vec![0.45, 0.45, 0.45, 0.45, 0.45]]);
        let (q, _) = squant_round(&w, &unit_params()).unwrap();
        for (x, code) in w.data().iter().zip(q.data()) {
            assert!((x - *code as f32).abs() < 1.0);
        }
    }

    #[test]
    fn clip_frozen_kernel_reports_warning() {
        // All values quantize to the clip ceiling; no flips possible and the
        // bound is unreachable.
        let w = fc_weight(vec![vec![130.0, 130.0, 130.0]]);
        let (q, report) = squant_round(&w, &unit_params()).unwrap();
        assert_eq!(q.data(), &[127, 127, 127]);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.warnings[0].reason, BoundWarningReason::ClipFrozen);
        assert!(report.warnings[0].achieved_ase > 0.5);
    }

    #[test]
    fn deterministic_across_runs() {
        let w = TensorF::new(
            Shape::new(vec![2, 3, 2, 2]).unwrap(),
            (0..24).map(|i| ((i * 37 % 17) as f32) * 0.21 - 1.6).collect(),
        )
        .unwrap();
        let p = unit_params();
        let (q1, r1) = squant_round(&w, &p).unwrap();
        let (q2, r2) = squant_round(&w, &p).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(r1.flips_per_kernel, r2.flips_per_kernel);
    }

    #[test]
    fn channel_pass_bounds_channel_sum_for_conv() {
        // Six kernels each with sum 0.4: channel total 2.4 needs two kernel
        // flips; per-kernel bound breaks for the chosen ones and they get
        // flagged.
        let w = TensorF::new(
            Shape::new(vec![1, 6, 1, 2]).unwrap(),
            vec![0.2; 12],
        )
        .unwrap();
        let (_, report) = squant_round(&w, &unit_params()).unwrap();
        assert!(report.max_channel_ase_after() <= 0.5, "{}", report.max_channel_ase_after());
        assert_eq!(
            report
                .warnings
                .iter()
                .filter(|w| w.reason == BoundWarningReason::ChannelOverride)
                .count(),
            2
        );
        assert!(report.max_unflagged_kernel_ase() <= 0.5);
    }

    #[test]
    fn fc_rows_skip_channel_pass() {
        // Three rows each with sum 0.9 -> one flip each; row-level bound
        // holds and no channel-level flips are added on top.
        let w = fc_weight(vec![vec![0.45, 0.45], vec![0.45, 0.45], vec![0.45, 0.45]]);
        let (_, report) = squant_round(&w, &unit_params()).unwrap();
        assert_eq!(report.flips_per_kernel, vec![1, 1, 1]);
        assert!(report.max_kernel_ase_after() <= 0.5);
    }

    #[test]
    fn squant_mse_at_least_nearest_mse() {
        let w = TensorF::new(
            Shape::new(vec![4, 2, 3, 3]).unwrap(),
            (0..72).map(|i| (((i * 73) % 41) as f32) * 0.077 - 1.5).collect(),
        )
        .unwrap();
        let p = unit_params();
        let near = nearest_round(&w, &p).unwrap();
        let (sq, _) = squant_round(&w, &p).unwrap();
        let mse = |q: &TensorQ| -> f64 {
            w.data()
                .iter()
                .zip(q.data())
                .map(|(x, &c)| {
                    let d = *x as f64 - c as f64;
                    d * d
                })
                .sum::<f64>()
        };
        assert!(mse(&sq) >= mse(&near) - 1e-12);
    }
}
