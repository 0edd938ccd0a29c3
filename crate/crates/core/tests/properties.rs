//! Property suites over the tensor core, smoothing and compaction paths.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avq_core::accel::{classify_tiles, compact};
use avq_core::conv::{
    conv_transpose_direct, conv_transpose_im2col, forward, im2col, leaky_relu, zero_insert,
};
use avq_core::quant::QuantGrid;
use avq_core::smoothing::{apply_smoothing, compute_icas_scales, LayerPlan, SmoothingPlan};
use avq_core::tensor::{DecoderLayer, DecoderModel, LayerKind, LayerSpec, Tensor3, WeightTensor};

fn tconv(k: usize, s: usize, p: usize) -> LayerSpec {
    LayerSpec::new(LayerKind::ConvTranspose, k, s, p, None).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, w: usize, scale: f32) -> Tensor3 {
    let data = (0..c * w * w)
        .map(|_| (rng.random::<f32>() - 0.5) * 2.0 * scale)
        .collect();
    Tensor3::new(c, w, w, data).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, ci: usize, co: usize, k: usize) -> WeightTensor {
    let data = (0..ci * co * k * k)
        .map(|_| (rng.random::<f32>() - 0.5) * 2.0)
        .collect();
    WeightTensor::new(ci, co, k, k, data).unwrap()
}

fn max_abs_diff(a: &Tensor3, b: &Tensor3) -> f32 {
    a.data
        .iter()
        .zip(b.data.iter())
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs()))
}

/// Channel-wise scaling of activations paired with reciprocal kernel scaling
/// leaves the transposed-convolution output unchanged.
#[test]
fn scale_invariance_of_single_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ca1e);
    for _ in 0..60 {
        let ci = rng.random_range(1..4usize);
        let co = rng.random_range(1..4usize);
        let w_in = rng.random_range(2..5usize);
        let k = rng.random_range(1..5usize);
        let s = rng.random_range(1..3usize);
        let p = rng.random_range(0..k); // K - P - 1 >= 0
        let spec = tconv(k, s, p);
        if spec.output_width(w_in).is_err() {
            continue; // empty output geometry
        }
        let x = random_tensor(&mut rng, ci, w_in, 4.0);
        let w = random_weights(&mut rng, ci, co, k);
        let bias: Vec<f32> = (0..co).map(|_| rng.random::<f32>() - 0.5).collect();
        let scales: Vec<f32> = (0..ci).map(|_| rng.random_range(0.01..100.0f32)).collect();
        let mut xs = x.clone();
        for c in 0..ci {
            let plane = w_in * w_in;
            for v in &mut xs.data[c * plane..(c + 1) * plane] {
                *v *= scales[c];
            }
        }
        let mut ws = w.clone();
        for c in 0..ci {
            for o in 0..co {
                for u in 0..k {
                    for v in 0..k {
                        *ws.at_mut(c, o, u, v) /= scales[c];
                    }
                }
            }
        }
        let y0 = conv_transpose_direct(&x, &w, &bias, &spec).unwrap();
        let y1 = conv_transpose_direct(&xs, &ws, &bias, &spec).unwrap();
        assert!(max_abs_diff(&y0, &y1) <= 1e-5);
    }
}

fn random_two_layer_model(rng: &mut ChaCha8Rng) -> (DecoderModel, usize) {
    let ci = rng.random_range(1..4usize);
    let mid = rng.random_range(1..4usize);
    let co = rng.random_range(1..3usize);
    let spec0 = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, Some(0.2)).unwrap();
    let spec1 = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, Some(0.15)).unwrap();
    let l0 = DecoderLayer::new(
        spec0,
        random_weights(rng, ci, mid, 4),
        (0..mid).map(|_| rng.random::<f32>() - 0.5).collect(),
    )
    .unwrap();
    let l1 = DecoderLayer::new(
        spec1,
        random_weights(rng, mid, co, 4),
        (0..co).map(|_| rng.random::<f32>() - 0.5).collect(),
    )
    .unwrap();
    (DecoderModel::new(vec![l0, l1]).unwrap(), ci)
}

/// Fusing scales into the previous layer's weights and bias across LeakyReLU
/// preserves the end-to-end output; nonpositive scales are rejected.
#[test]
fn fusing_equivalence_two_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0f0);
    for _ in 0..60 {
        let (model, ci) = random_two_layer_model(&mut rng);
        let mid = model.layers[1].weights.in_channels;
        let plan = SmoothingPlan {
            alpha: 0.8,
            layers: vec![LayerPlan {
                layer_index: 1,
                scales: (0..mid).map(|_| rng.random_range(0.02..50.0f32)).collect(),
                exempt: vec![],
            }],
        };
        let smoothed = apply_smoothing(&model, &plan).unwrap();
        let x = random_tensor(&mut rng, ci, 2, 2.0);
        let y0 = forward(&model, &x).unwrap();
        let y1 = forward(&smoothed, &x).unwrap();
        assert!(max_abs_diff(&y0, &y1) <= 1e-4);

        let mut bad = plan.clone();
        bad.layers[0].scales[0] = -rng.random_range(0.1..2.0f32);
        assert!(apply_smoothing(&model, &bad).is_err());
    }
}

/// GEMM lowering reproduces the direct scatter path.
#[test]
fn im2col_gemm_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e33);
    for _ in 0..50 {
        let ci = rng.random_range(1..4usize);
        let co = rng.random_range(1..4usize);
        let w_in = rng.random_range(2..6usize);
        let k = rng.random_range(1..5usize);
        let s = rng.random_range(1..4usize);
        let p = rng.random_range(0..k);
        let spec = tconv(k, s, p);
        if spec.output_width(w_in).is_err() {
            continue; // empty output geometry
        }
        let x = random_tensor(&mut rng, ci, w_in, 3.0);
        let w = random_weights(&mut rng, ci, co, k);
        let bias: Vec<f32> = (0..co).map(|_| rng.random::<f32>() - 0.5).collect();
        let a = conv_transpose_direct(&x, &w, &bias, &spec).unwrap();
        let b = conv_transpose_im2col(&x, &w, &bias, &spec).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }
}

/// Exact structural zero fractions of the stride-2, K=4, P=1 lowering:
/// (2W-1)^2 / (16 W^2) nonzero per channel block.
#[test]
fn im2col_zero_fraction_by_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let spec = tconv(4, 2, 1);
    for w_in in [2usize, 4, 8, 16, 32] {
        let x = random_tensor(&mut rng, 2, w_in, 1.0);
        let ins = zero_insert(&x, &spec).unwrap();
        let m = im2col(&ins, 4).unwrap();
        let nz_expect = (4 * w_in - 2) * (4 * w_in - 2) * 2;
        let nz = m.nonzero_mask.iter().filter(|b| **b).count();
        assert_eq!(nz, nz_expect, "width {w_in}");
        if w_in == 2 {
            assert!((m.zero_fraction() - 0.859375).abs() < 1e-12);
        }
        assert!(
            m.zero_fraction() >= if w_in == 2 { 0.85 } else { 0.70 },
            "width {w_in}: fraction {}",
            m.zero_fraction()
        );
    }
}

/// Smoothing with alpha in (0,1) shrinks the cross-channel dynamic-range
/// ratio on models with injected channel outliers, statistically.
#[test]
fn smoothing_reduces_dynamic_range_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xd9a);
    let mut reduced = 0;
    let trials = 50;
    for _ in 0..trials {
        let (mut model, ci) = random_two_layer_model(&mut rng);
        // Outlier injection: blow up a random output channel of layer 0.
        let mid = model.layers[0].weights.out_channels;
        let hot = rng.random_range(0..mid);
        for c in 0..model.layers[0].weights.in_channels {
            for u in 0..4 {
                for v in 0..4 {
                    *model.layers[0].weights.at_mut(c, hot, u, v) *= 16.0;
                }
            }
        }
        let calib: Vec<Tensor3> = (0..4).map(|_| random_tensor(&mut rng, ci, 2, 2.0)).collect();
        let mut layer1_inputs = Vec::new();
        for x in &calib {
            avq_core::conv::forward_collect(&model, x, &mut |i, t| {
                if i == 1 {
                    layer1_inputs.push(t.clone());
                }
            })
            .unwrap();
        }
        let range = |samples: &[Tensor3]| -> Vec<f32> {
            let ch = samples[0].channels;
            let mut r = vec![0.0f32; ch];
            for s in samples {
                for c in 0..ch {
                    for v in s.channel(c) {
                        r[c] = r[c].max(v.abs());
                    }
                }
            }
            r
        };
        let before = range(&layer1_inputs);
        if before.iter().any(|&v| v == 0.0) {
            continue;
        }
        let scales =
            compute_icas_scales(&layer1_inputs, &model.layers[1].weights, 0.8).unwrap();
        let plan = SmoothingPlan {
            alpha: 0.8,
            layers: vec![LayerPlan {
                layer_index: 1,
                scales,
                exempt: vec![],
            }],
        };
        let smoothed = apply_smoothing(&model, &plan).unwrap();
        let mut after_inputs = Vec::new();
        for x in &calib {
            avq_core::conv::forward_collect(&smoothed, x, &mut |i, t| {
                if i == 1 {
                    after_inputs.push(t.clone());
                }
            })
            .unwrap();
        }
        let after = range(&after_inputs);
        let ratio = |r: &[f32]| {
            let max = r.iter().fold(0.0f32, |m, v| m.max(*v));
            let min = r.iter().fold(f32::INFINITY, |m, v| m.min(*v));
            max / min
        };
        if ratio(&after) <= ratio(&before) {
            reduced += 1;
        }
    }
    assert!(
        reduced * 10 >= trials * 9,
        "dynamic range reduced in only {reduced}/{trials} trials"
    );
}

/// Post-smoothing channel maxima obey the migration balance
/// `(max|X_c|)^(1-alpha) * (max|W_c|)^(1-alpha)`.
#[test]
fn smoothing_balance_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xba1a);
    let (model, ci) = random_two_layer_model(&mut rng);
    let alpha = 0.8f32;
    let calib: Vec<Tensor3> = (0..4).map(|_| random_tensor(&mut rng, ci, 2, 2.0)).collect();
    let mut layer1_inputs = Vec::new();
    for x in &calib {
        avq_core::conv::forward_collect(&model, x, &mut |i, t| {
            if i == 1 {
                layer1_inputs.push(t.clone());
            }
        })
        .unwrap();
    }
    let w1 = &model.layers[1].weights;
    let scales = compute_icas_scales(&layer1_inputs, w1, alpha).unwrap();
    let plan = SmoothingPlan {
        alpha,
        layers: vec![LayerPlan {
            layer_index: 1,
            scales: scales.clone(),
            exempt: vec![],
        }],
    };
    let smoothed = apply_smoothing(&model, &plan).unwrap();
    let mut after_inputs = Vec::new();
    for x in &calib {
        avq_core::conv::forward_collect(&smoothed, x, &mut |i, t| {
            if i == 1 {
                after_inputs.push(t.clone());
            }
        })
        .unwrap();
    }
    for c in 0..w1.in_channels {
        let before: f32 = layer1_inputs
            .iter()
            .flat_map(|t| t.channel(c))
            .fold(0.0f32, |m, v| m.max(v.abs()));
        let after: f32 = after_inputs
            .iter()
            .flat_map(|t| t.channel(c))
            .fold(0.0f32, |m, v| m.max(v.abs()));
        let wmax = w1.max_abs_in_slice(c);
        if before == 0.0 || wmax == 0.0 {
            continue;
        }
        let expect = (before as f64).powf(1.0 - alpha as f64) * (wmax as f64).powf(1.0 - alpha as f64);
        assert!(
            ((after as f64) - expect).abs() <= 1e-3 * expect.max(1e-6),
            "channel {c}: after {after} vs balance {expect}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Zero insertion preserves the nonzero values and their raster order.
    #[test]
    fn zero_insert_preserves_nonzeros(
        c in 1usize..3,
        w in 1usize..5,
        k in 1usize..5,
        s in 1usize..4,
        seed in any::<u64>(),
    ) {
        let p = k - 1; // widest legal padding keeps sizes small
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, c, w, 2.0);
        let spec = tconv(k, s, p);
        let out = zero_insert(&x, &spec).unwrap();
        let seq_in: Vec<f32> = x.data.iter().copied().filter(|v| *v != 0.0).collect();
        let seq_out: Vec<f32> = out.data.iter().copied().filter(|v| *v != 0.0).collect();
        prop_assert_eq!(seq_in, seq_out);
        prop_assert_eq!(x.count_nonzero(), out.count_nonzero());
    }

    /// LeakyReLU commutes with positive scaling.
    #[test]
    fn leaky_relu_positive_homogeneity(
        v in -100.0f32..100.0,
        scale in 0.001f32..1000.0,
        slope in 0.01f32..0.99,
    ) {
        let x = Tensor3::new(1, 1, 1, vec![v]).unwrap();
        let lhs = leaky_relu(&Tensor3::new(1, 1, 1, vec![scale * v]).unwrap(), slope);
        let rhs = leaky_relu(&x, slope);
        let scaled_rhs = scale * rhs.data[0];
        prop_assert!((lhs.data[0] - scaled_rhs).abs() <= 1e-3 * scaled_rhs.abs().max(1e-6));
    }

    /// Grid round trips stay within half a step.
    #[test]
    fn grid_round_trip_bound(
        vals in proptest::collection::vec(-10.0f32..10.0, 4..64),
        bits in 2u8..9,
    ) {
        let grid = QuantGrid::asymmetric_per_tensor(&vals, bits, None).unwrap();
        for v in &vals {
            let back = grid.dequantize(grid.quantize(*v, 0), 0);
            prop_assert!((back - v).abs() <= grid.scales[0] * 0.5 + 1e-5);
        }
    }

    /// Compaction of a transposed-convolution lowering is lossless.
    #[test]
    fn compaction_round_trip(
        c in 1usize..3,
        w in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, c, w, 3.0);
        let spec = tconv(4, 2, 1);
        let ins = zero_insert(&x, &spec).unwrap();
        let m = im2col(&ins, 4).unwrap();
        let tiles = classify_tiles(&m);
        let packed = compact(&m, &tiles).unwrap();
        prop_assert_eq!(packed.expand(), m);
    }

    /// Multiplying all pipeline latencies by a constant scales the
    /// steady-state interval by the same constant.
    #[test]
    fn pipeline_time_scaling(
        s in 0.1f64..10.0,
        e in 0.1f64..10.0,
        t in 0.1f64..10.0,
        d in 0.1f64..10.0,
        r in 0.1f64..10.0,
        c in 0.5f64..4.0,
    ) {
        use avq_core::pipeline::{schedule, steady_state_interval, StageLatencies};
        let a = StageLatencies::new(s, e, t, d, r).unwrap();
        let b = StageLatencies::new(c * s, c * e, c * t, c * d, c * r).unwrap();
        let ia = steady_state_interval(&schedule(&a, 24).unwrap()).unwrap();
        let ib = steady_state_interval(&schedule(&b, 24).unwrap()).unwrap();
        prop_assert!((ib - c * ia).abs() <= 1e-9 * (c * ia).max(1.0));
    }
}
