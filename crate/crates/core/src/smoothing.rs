//! Per-input-channel activation smoothing, fused offline into the weights.
//!
//! For each layer, a positive scale `s_c` per input channel balances the
//! dynamic ranges of activations and weights: the activation entering the
//! layer is effectively divided by `s_c` while the layer's input-channel
//! weight slice is multiplied by it, leaving the output unchanged. Because
//! LeakyReLU is positively homogeneous, the division folds into the
//! preceding layer's output-channel weights and bias, so inference carries
//! no extra multiplies. High-variance channels inside the facial region
//! masks are exempted (forced `s_c = 1`) to preserve fine detail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DecoderModel, Tensor3, WeightTensor};

/// Per-layer smoothing scales plus the exempt channel set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_index: usize,
    /// One positive scale per input channel; exempt channels hold exactly 1.
    pub scales: Vec<f32>,
    pub exempt: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPlan {
    pub alpha: f32,
    pub layers: Vec<LayerPlan>,
}

/// Boolean spatial membership mask for a facial region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub membership: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, membership: Vec<bool>) -> Result<Self> {
        if membership.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "RegionMask::new",
                expected: format!("{} flags", height * width),
                got: format!("{}", membership.len()),
            });
        }
        Ok(Self {
            height,
            width,
            membership,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            membership: vec![true; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.membership[y * self.width + x]
    }

    pub fn member_count(&self) -> usize {
        self.membership.iter().filter(|m| **m).count()
    }

    /// Nearest-neighbor resample to a layer's spatial size.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut membership = vec![false; height * width];
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                membership[y * width + x] = self.at(sy, sx);
            }
        }
        Self {
            height,
            width,
            membership,
        }
    }
}

/// Per-channel region statistics with the variance-descending ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVarianceReport {
    pub variances: Vec<f64>,
    pub means: Vec<f64>,
    /// Channel indices sorted by variance descending, ties by lower index.
    pub ranking: Vec<usize>,
}

fn rank_by_variance(variances: &[f64]) -> Vec<usize> {
    let mut ranking: Vec<usize> = (0..variances.len()).collect();
    ranking.sort_by(|&a, &b| {
        variances[b]
            .partial_cmp(&variances[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ranking
}

/// Population variance and mean of each channel over the mask region.
pub fn channel_region_variance(x: &Tensor3, mask: &RegionMask) -> Result<ChannelVarianceReport> {
    if mask.height != x.height || mask.width != x.width {
        return Err(Error::ShapeMismatch {
            context: "channel_region_variance",
            expected: format!("{}x{} mask", x.height, x.width),
            got: format!("{}x{}", mask.height, mask.width),
        });
    }
    let count = mask.member_count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let inv = 1.0 / count as f64;
    let mut means = Vec::with_capacity(x.channels);
    let mut variances = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let mut sum = 0.0f64;
        for y in 0..x.height {
            let row = x.row(c, y);
            for xx in 0..x.width {
                if mask.at(y, xx) {
                    sum += row[xx] as f64;
                }
            }
        }
        let mu = sum * inv;
        let mut var = 0.0f64;
        for y in 0..x.height {
            let row = x.row(c, y);
            for xx in 0..x.width {
                if mask.at(y, xx) {
                    let d = row[xx] as f64 - mu;
                    var += d * d;
                }
            }
        }
        means.push(mu);
        variances.push(var * inv);
    }
    let ranking = rank_by_variance(&variances);
    Ok(ChannelVarianceReport {
        variances,
        means,
        ranking,
    })
}

/// Variance report averaged over calibration samples. Single-sample reports
/// are exact per-sample; averaging stabilizes the ranking.
pub fn mean_region_variance(samples: &[Tensor3], mask: &RegionMask) -> Result<ChannelVarianceReport> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let channels = samples[0].channels;
    let mut variances = vec![0.0f64; channels];
    let mut means = vec![0.0f64; channels];
    for s in samples {
        let rep = channel_region_variance(s, mask)?;
        for c in 0..channels {
            variances[c] += rep.variances[c];
            means[c] += rep.means[c];
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for c in 0..channels {
        variances[c] *= inv;
        means[c] *= inv;
    }
    let ranking = rank_by_variance(&variances);
    Ok(ChannelVarianceReport {
        variances,
        means,
        ranking,
    })
}

/// Migration scales: `s_c = (max|X_c|)^alpha / (max|W_c|)^(1-alpha)`.
/// Channels whose activation or weight slice is all zero get `s_c = 1`,
/// the only output-preserving choice for the degenerate 0/0 case.
pub fn compute_icas_scales(calib: &[Tensor3], w: &WeightTensor, alpha: f32) -> Result<Vec<f32>> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let channels = w.in_channels;
    let mut act_max = vec![0.0f32; channels];
    for x in calib {
        if x.channels != channels {
            return Err(Error::ShapeMismatch {
                context: "compute_icas_scales",
                expected: format!("{channels} channels"),
                got: format!("{}", x.channels),
            });
        }
        for c in 0..channels {
            for v in x.channel(c) {
                act_max[c] = act_max[c].max(v.abs());
            }
        }
    }
    compute_icas_scales_from_maxima(&act_max, w, alpha)
}

/// Same as [`compute_icas_scales`] from pre-reduced per-channel activation
/// maxima, so calibration passes can stream instead of retaining tensors.
pub fn compute_icas_scales_from_maxima(
    act_max: &[f32],
    w: &WeightTensor,
    alpha: f32,
) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidLayer(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if act_max.len() != w.in_channels {
        return Err(Error::ShapeMismatch {
            context: "compute_icas_scales_from_maxima",
            expected: format!("{} channels", w.in_channels),
            got: format!("{}", act_max.len()),
        });
    }
    let mut scales = Vec::with_capacity(w.in_channels);
    for (c, &m) in act_max.iter().enumerate() {
        let a = m as f64;
        let wmax = w.max_abs_in_slice(c) as f64;
        let s = if a == 0.0 || wmax == 0.0 {
            1.0
        } else {
            a.powf(alpha as f64) / wmax.powf(1.0 - alpha as f64)
        };
        scales.push(s as f32);
    }
    Ok(scales)
}

/// Number of exempt channels: `ceil(k_percent/100 * channels)`, with a small
/// epsilon so that exact rational products do not round up spuriously.
pub fn exempt_count(channels: usize, k_percent: f64) -> usize {
    let raw = k_percent * channels as f64 / 100.0;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(channels)
}

/// Top-k% variance channels per layer, ties broken by lower channel index.
pub fn select_ffas_exempt(reports: &[ChannelVarianceReport], k_percent: f64) -> Vec<Vec<usize>> {
    reports
        .iter()
        .map(|rep| {
            let n = exempt_count(rep.variances.len(), k_percent);
            let mut set: Vec<usize> = rep.ranking[..n].to_vec();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Assemble a per-layer plan from scales and exempt sets; exempt channels
/// are forced to exactly 1.
pub fn build_plan(
    alpha: f32,
    per_layer_scales: Vec<Vec<f32>>,
    per_layer_exempt: Vec<Vec<usize>>,
) -> SmoothingPlan {
    let layers = per_layer_scales
        .into_iter()
        .zip(per_layer_exempt)
        .enumerate()
        .map(|(layer_index, (mut scales, exempt))| {
            for &c in &exempt {
                if c < scales.len() {
                    scales[c] = 1.0;
                }
            }
            LayerPlan {
                layer_index,
                scales,
                exempt,
            }
        })
        .collect();
    SmoothingPlan { alpha, layers }
}

fn validate_layer_plan(plan: &LayerPlan, channels: usize) -> Result<()> {
    if plan.scales.len() != channels {
        return Err(Error::ShapeMismatch {
            context: "apply_smoothing",
            expected: format!("{channels} scales for layer {}", plan.layer_index),
            got: format!("{}", plan.scales.len()),
        });
    }
    for (c, &s) in plan.scales.iter().enumerate() {
        if !s.is_finite() || s <= 0.0 {
            return Err(Error::NonPositiveScale {
                layer: plan.layer_index,
                channel: c,
                value: s,
            });
        }
    }
    for &c in &plan.exempt {
        if c >= channels {
            return Err(Error::InvalidLayer(format!(
                "exempt channel {c} out of range for layer {}",
                plan.layer_index
            )));
        }
        if plan.scales[c] != 1.0 {
            return Err(Error::InvalidLayer(format!(
                "exempt channel {c} of layer {} must have scale exactly 1, got {}",
                plan.layer_index, plan.scales[c]
            )));
        }
    }
    Ok(())
}

/// Fuse the plan into a new model.
///
/// For layer `i > 0`: output channel `c` of layer `i-1` (weights and bias)
/// is divided by `s_c` and the input-channel slice `c` of layer `i` is
/// multiplied by `s_c`; LeakyReLU between them commutes with the positive
/// per-channel factor, so the forward output is unchanged. The first layer
/// has no predecessor: its `1/s_c` lands in the model's input transform.
pub fn apply_smoothing(model: &DecoderModel, plan: &SmoothingPlan) -> Result<DecoderModel> {
    let mut out = model.clone();
    for lp in &plan.layers {
        let li = lp.layer_index;
        if li >= out.layers.len() {
            return Err(Error::InvalidLayer(format!(
                "plan refers to layer {li}, model has {}",
                out.layers.len()
            )));
        }
        let channels = out.layers[li].weights.in_channels;
        validate_layer_plan(lp, channels)?;
        let identity = lp.scales.iter().all(|&s| s == 1.0);
        if identity {
            continue;
        }
        if li == 0 {
            let transform = out
                .input_transform
                .get_or_insert_with(|| vec![1.0; channels]);
            if transform.len() != channels {
                return Err(Error::ShapeMismatch {
                    context: "apply_smoothing input_transform",
                    expected: format!("{channels} channels"),
                    got: format!("{}", transform.len()),
                });
            }
            for (c, &s) in lp.scales.iter().enumerate() {
                transform[c] /= s;
            }
        } else {
            if out.layers[li - 1].spec.activation_slope.is_none() {
                return Err(Error::MissingActivation { layer: li });
            }
            let prev = &mut out.layers[li - 1];
            let (kh, kw) = (prev.weights.kh, prev.weights.kw);
            for ci in 0..prev.weights.in_channels {
                for (c, &s) in lp.scales.iter().enumerate() {
                    if s == 1.0 {
                        continue;
                    }
                    for u in 0..kh {
                        for v in 0..kw {
                            *prev.weights.at_mut(ci, c, u, v) /= s;
                        }
                    }
                }
            }
            for (c, &s) in lp.scales.iter().enumerate() {
                prev.bias[c] /= s;
            }
        }
        let cur = &mut out.layers[li];
        let (kh, kw) = (cur.weights.kh, cur.weights.kw);
        for (c, &s) in lp.scales.iter().enumerate() {
            if s == 1.0 {
                continue;
            }
            for co in 0..cur.weights.out_channels {
                for u in 0..kh {
                    for v in 0..kw {
                        *cur.weights.at_mut(c, co, u, v) *= s;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::forward;
    use crate::tensor::{DecoderLayer, LayerKind, LayerSpec};

    fn sample(channels: usize, w: usize, values: impl Fn(usize, usize) -> f32) -> Tensor3 {
        let mut t = Tensor3::zeros(channels, w, w);
        for c in 0..channels {
            for i in 0..w * w {
                t.data[c * w * w + i] = values(c, i);
            }
        }
        t
    }

    #[test]
    fn icas_scale_direct_eval() {
        // max|X_c| = 16, max|W_c| = 1, alpha = 0.8 -> 16^0.8
        let x = sample(1, 2, |_, i| if i == 0 { 16.0 } else { 1.0 });
        let w = WeightTensor::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let s = compute_icas_scales(&[x], &w, 0.8).unwrap();
        assert!((s[0] - 9.189586).abs() < 1e-4, "{}", s[0]);
    }

    #[test]
    fn icas_scale_unit_ranges() {
        let x = sample(1, 2, |_, _| 1.0);
        let w = WeightTensor::new(1, 1, 1, 1, vec![-1.0]).unwrap();
        for alpha in [0.0, 0.3, 0.8, 1.0] {
            let s = compute_icas_scales(&[x.clone()], &w, alpha).unwrap();
            assert_eq!(s[0], 1.0);
        }
    }

    #[test]
    fn icas_scale_alpha_zero_is_inverse_weight_max() {
        let x = sample(1, 2, |_, _| 5.0);
        let w = WeightTensor::new(1, 1, 1, 1, vec![4.0]).unwrap();
        let s = compute_icas_scales(&[x], &w, 0.0).unwrap();
        assert!((s[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn icas_degenerate_channels_get_unit_scale() {
        let x = sample(2, 2, |c, _| if c == 0 { 0.0 } else { 3.0 });
        let w = WeightTensor::new(2, 1, 1, 1, vec![2.0, 0.0]).unwrap();
        let s = compute_icas_scales(&[x], &w, 0.5).unwrap();
        assert_eq!(s, vec![1.0, 1.0]);
    }

    #[test]
    fn icas_rejects_empty_calibration() {
        let w = WeightTensor::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            compute_icas_scales(&[], &w, 0.5),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn variance_constant_channel_is_zero() {
        let x = sample(1, 2, |_, _| 2.5);
        let rep = channel_region_variance(&x, &RegionMask::full(2, 2)).unwrap();
        assert_eq!(rep.variances[0], 0.0);
    }

    #[test]
    fn variance_two_pixel_region() {
        // Values {1, 3} inside the region -> mean 2, variance 1.
        let x = sample(1, 2, |_, i| [1.0, 3.0, 100.0, -50.0][i]);
        let mask = RegionMask::new(2, 2, vec![true, true, false, false]).unwrap();
        let rep = channel_region_variance(&x, &mask).unwrap();
        assert!((rep.means[0] - 2.0).abs() < 1e-12);
        assert!((rep.variances[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_shift_invariant() {
        let x = sample(1, 3, |_, i| (i as f32 * 1.7).sin());
        let mut shifted = x.clone();
        for v in &mut shifted.data {
            *v += 41.5;
        }
        let mask = RegionMask::full(3, 3);
        let a = channel_region_variance(&x, &mask).unwrap();
        let b = channel_region_variance(&shifted, &mask).unwrap();
        assert!((a.variances[0] - b.variances[0]).abs() < 1e-6);
    }

    #[test]
    fn variance_rejects_empty_mask() {
        let x = sample(1, 2, |_, _| 1.0);
        let mask = RegionMask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(
            channel_region_variance(&x, &mask),
            Err(Error::EmptyMask)
        ));
    }

    fn report_from(variances: Vec<f64>) -> ChannelVarianceReport {
        let ranking = rank_by_variance(&variances);
        let means = vec![0.0; variances.len()];
        ChannelVarianceReport {
            variances,
            means,
            ranking,
        }
    }

    #[test]
    fn exempt_selection_boundaries() {
        let rep = report_from(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(select_ffas_exempt(&[rep.clone()], 0.0)[0].is_empty());
        assert_eq!(select_ffas_exempt(&[rep], 100.0)[0], vec![0, 1, 2, 3]);
    }

    #[test]
    fn exempt_selection_eight_channels_k75() {
        let rep = report_from(vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0]);
        let sets = select_ffas_exempt(&[rep], 75.0);
        assert_eq!(sets[0], vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn exempt_ties_break_to_lower_index() {
        let rep = report_from(vec![5.0, 7.0, 7.0, 1.0]);
        let sets = select_ffas_exempt(&[rep], 50.0);
        assert_eq!(sets[0], vec![1, 2]);
    }

    #[test]
    fn exempt_count_exact_rationals() {
        assert_eq!(exempt_count(8, 75.0), 6);
        assert_eq!(exempt_count(5, 60.0), 3);
        assert_eq!(exempt_count(3, 75.0), 3); // ceil(2.25)
        assert_eq!(exempt_count(10, 0.0), 0);
    }

    fn two_layer_model(seed: u64) -> DecoderModel {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 40) as f32 / (1u64 << 23) as f32) - 1.0
        };
        let spec_act = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, Some(0.2)).unwrap();
        let spec_end = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, None).unwrap();
        let w0 =
            WeightTensor::new(2, 3, 4, 4, (0..96).map(|_| next()).collect()).unwrap();
        let w1 =
            WeightTensor::new(3, 2, 4, 4, (0..96).map(|_| next()).collect()).unwrap();
        let l0 = DecoderLayer::new(spec_act, w0, vec![next(), next(), next()]).unwrap();
        let l1 = DecoderLayer::new(spec_end, w1, vec![next(), next()]).unwrap();
        DecoderModel::new(vec![l0, l1]).unwrap()
    }

    fn plan_for(model: &DecoderModel, scales1: Vec<f32>) -> SmoothingPlan {
        SmoothingPlan {
            alpha: 0.8,
            layers: vec![
                LayerPlan {
                    layer_index: 0,
                    scales: vec![1.0; model.layers[0].weights.in_channels],
                    exempt: vec![],
                },
                LayerPlan {
                    layer_index: 1,
                    scales: scales1,
                    exempt: vec![],
                },
            ],
        }
    }

    #[test]
    fn identity_plan_leaves_model_bit_identical() {
        let model = two_layer_model(7);
        let plan = plan_for(&model, vec![1.0, 1.0, 1.0]);
        let smoothed = apply_smoothing(&model, &plan).unwrap();
        assert_eq!(model, smoothed);
    }

    #[test]
    fn fused_model_preserves_forward_output() {
        for seed in 0..8u64 {
            let model = two_layer_model(seed + 1);
            let scales = vec![3.5, 0.02, 17.0];
            let plan = plan_for(&model, scales);
            let smoothed = apply_smoothing(&model, &plan).unwrap();
            let x = Tensor3::new(
                2,
                2,
                2,
                (0..8).map(|i| ((seed as f32 + 1.3) * (i as f32 + 0.7)).sin()).collect(),
            )
            .unwrap();
            let y0 = forward(&model, &x).unwrap();
            let y1 = forward(&smoothed, &x).unwrap();
            let max = y0
                .data
                .iter()
                .zip(y1.data.iter())
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            assert!(max <= 1e-4, "seed {seed}: deviation {max}");
        }
    }

    #[test]
    fn first_layer_scales_land_in_input_transform() {
        let model = two_layer_model(3);
        let plan = SmoothingPlan {
            alpha: 0.8,
            layers: vec![LayerPlan {
                layer_index: 0,
                scales: vec![4.0, 0.5],
                exempt: vec![],
            }],
        };
        let smoothed = apply_smoothing(&model, &plan).unwrap();
        assert_eq!(smoothed.input_transform, Some(vec![0.25, 2.0]));
        let x = Tensor3::new(2, 2, 2, (0..8).map(|i| i as f32 - 3.0).collect()).unwrap();
        let y0 = forward(&model, &x).unwrap();
        let y1 = forward(&smoothed, &x).unwrap();
        let max = y0
            .data
            .iter()
            .zip(y1.data.iter())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(max <= 1e-4);
    }

    #[test]
    fn exempt_channel_activation_bit_identical() {
        let model = two_layer_model(11);
        // Channel 1 exempt: its producing weights must not be touched.
        let plan = SmoothingPlan {
            alpha: 0.8,
            layers: vec![LayerPlan {
                layer_index: 1,
                scales: vec![2.0, 1.0, 0.25],
                exempt: vec![1],
            }],
        };
        let smoothed = apply_smoothing(&model, &plan).unwrap();
        let x = Tensor3::new(2, 2, 2, (0..8).map(|i| (i as f32).cos()).collect()).unwrap();
        let h0 = crate::conv::apply_layer_linear(&x, &model.layers[0]).unwrap();
        let h1 = crate::conv::apply_layer_linear(&x, &smoothed.layers[0]).unwrap();
        for y in 0..h0.height {
            for xx in 0..h0.width {
                assert_eq!(h0.at(1, y, xx).to_bits(), h1.at(1, y, xx).to_bits());
            }
        }
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let model = two_layer_model(5);
        for bad in [0.0f32, -1.0, f32::NAN, f32::INFINITY] {
            let plan = plan_for(&model, vec![1.0, bad, 1.0]);
            assert!(matches!(
                apply_smoothing(&model, &plan),
                Err(Error::NonPositiveScale { .. })
            ));
        }
    }

    #[test]
    fn fusing_requires_homogeneous_activation() {
        let mut model = two_layer_model(9);
        model.layers[0].spec.activation_slope = None;
        let plan = plan_for(&model, vec![2.0, 1.0, 1.0]);
        assert!(matches!(
            apply_smoothing(&model, &plan),
            Err(Error::MissingActivation { layer: 1 })
        ));
        // Identity scales across that boundary are still fine.
        let id = plan_for(&model, vec![1.0, 1.0, 1.0]);
        assert!(apply_smoothing(&model, &id).is_ok());
    }

    #[test]
    fn mask_resize_identity_and_downsample() {
        let mask = RegionMask::new(4, 4, (0..16).map(|i| i < 8).collect()).unwrap();
        assert_eq!(mask.resize_nearest(4, 4), mask);
        let half = mask.resize_nearest(2, 2);
        assert_eq!(half.membership, vec![true, true, false, false]);
    }
}
