//! Reference convolution, transposed convolution and im2col lowering.
//!
//! `conv_transpose_direct` is the scatter-form definition and serves as the
//! numerical oracle. The im2col/GEMM path lowers the same layer to a matrix
//! multiply: the input is zero-inserted, unfolded at unit stride, and
//! multiplied by the flipped-kernel weight matrix from
//! [`crate::tensor::unfold_weights`]. Both paths must agree to 1e-5.

use crate::error::{Error, Result};
use crate::tensor::{DecoderModel, LayerKind, LayerSpec, Tensor3, WeightTensor};

/// Width of a square map after zero insertion: `W + 2(K-P-1) + (W-1)(S-1)`.
pub fn zero_insert_width(w: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    if w < 1 || k < 1 || s < 1 {
        return Err(Error::InvalidLayer(format!(
            "zero_insert_width requires W, K, S >= 1 (got W={w}, K={k}, S={s})"
        )));
    }
    let interior = k as isize - p as isize - 1;
    if interior < 0 {
        return Err(Error::NegativeInteriorPad {
            kernel: k,
            padding: p,
            interior,
        });
    }
    Ok(w + 2 * interior as usize + (w - 1) * (s - 1))
}

/// Insert `S-1` zeros between adjacent pixels and a `K-P-1` zero border.
/// Original value `(y, x)` lands at `(P' + y*S, P' + x*S)` with `P' = K-P-1`.
pub fn zero_insert(x: &Tensor3, spec: &LayerSpec) -> Result<Tensor3> {
    debug_assert_eq!(spec.kind, LayerKind::ConvTranspose);
    let wi = zero_insert_width(x.width, spec.kernel, spec.padding, spec.stride)?;
    let hi = zero_insert_width(x.height, spec.kernel, spec.padding, spec.stride)?;
    let border = spec.kernel - spec.padding - 1;
    let mut out = Tensor3::zeros(x.channels, hi, wi);
    for c in 0..x.channels {
        for y in 0..x.height {
            for xx in 0..x.width {
                *out.at_mut(c, border + y * spec.stride, border + xx * spec.stride) =
                    x.at(c, y, xx);
            }
        }
    }
    Ok(out)
}

/// Elementwise LeakyReLU `max(slope * v, v)`, slope in (0, 1).
pub fn leaky_relu(x: &Tensor3, slope: f32) -> Tensor3 {
    debug_assert!(slope > 0.0 && slope < 1.0);
    let mut out = x.clone();
    for v in &mut out.data {
        *v = (slope * *v).max(*v);
    }
    out
}

fn check_in_channels(x: &Tensor3, w: &WeightTensor, context: &'static str) -> Result<()> {
    if x.channels != w.in_channels {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{} input channels", w.in_channels),
            got: format!("{}", x.channels),
        });
    }
    Ok(())
}

/// Standard strided convolution with zero padding.
pub fn conv2d(x: &Tensor3, w: &WeightTensor, bias: &[f32], spec: &LayerSpec) -> Result<Tensor3> {
    check_in_channels(x, w, "conv2d")?;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding;
    let h_out = spec.output_width(x.height)?;
    let w_out = spec.output_width(x.width)?;
    let mut out = Tensor3::zeros(w.out_channels, h_out, w_out);
    for co in 0..w.out_channels {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias[co] as f64;
                for ci in 0..x.channels {
                    for u in 0..k {
                        let iy = (oy * s + u) as isize - p as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for v in 0..k {
                            let ix = (ox * s + v) as isize - p as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            acc += x.at(ci, iy as usize, ix as usize) as f64
                                * w.at(ci, co, u, v) as f64;
                        }
                    }
                }
                *out.at_mut(co, oy, ox) = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Transposed convolution in scatter form: every input pixel `(a, b)` adds
/// `x[ci,a,b] * w[ci,co,u,v]` at output `(a*S - P + u, b*S - P + v)`.
/// Output width is `(W-1)*S - 2P + K`.
pub fn conv_transpose_direct(
    x: &Tensor3,
    w: &WeightTensor,
    bias: &[f32],
    spec: &LayerSpec,
) -> Result<Tensor3> {
    check_in_channels(x, w, "conv_transpose_direct")?;
    if bias.len() != w.out_channels {
        return Err(Error::ShapeMismatch {
            context: "conv_transpose_direct",
            expected: format!("{} bias values", w.out_channels),
            got: format!("{}", bias.len()),
        });
    }
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding;
    let h_out = spec.output_width(x.height)?;
    let w_out = spec.output_width(x.width)?;
    // f64 accumulation buffer so reductions match the GEMM path.
    let mut acc = vec![0.0f64; w.out_channels * h_out * w_out];
    for co in 0..w.out_channels {
        let plane = &mut acc[co * h_out * w_out..(co + 1) * h_out * w_out];
        for v0 in plane.iter_mut() {
            *v0 = bias[co] as f64;
        }
        for ci in 0..x.channels {
            for a in 0..x.height {
                for b in 0..x.width {
                    let xv = x.at(ci, a, b) as f64;
                    if xv == 0.0 {
                        continue;
                    }
                    for u in 0..k {
                        let oy = (a * s + u) as isize - p as isize;
                        if oy < 0 || oy >= h_out as isize {
                            continue;
                        }
                        let row = oy as usize * w_out;
                        for v in 0..k {
                            let ox = (b * s + v) as isize - p as isize;
                            if ox < 0 || ox >= w_out as isize {
                                continue;
                            }
                            plane[row + ox as usize] += xv * w.at(ci, co, u, v) as f64;
                        }
                    }
                }
            }
        }
    }
    let data = acc.iter().map(|v| *v as f32).collect();
    Tensor3::new(w.out_channels, h_out, w_out, data)
}

/// Unfolded activation matrix: one column per output location, one row per
/// (channel, kernel row, kernel column) in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2colMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    /// `true` exactly where the entry is nonzero.
    pub nonzero_mask: Vec<bool>,
}

impl Im2colMatrix {
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn count_zero(&self) -> usize {
        self.nonzero_mask.iter().filter(|m| !**m).count()
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count_zero() as f64 / self.data.len() as f64
    }
}

/// Unit-stride im2col of an already zero-inserted map. Column `j` holds the
/// KxK receptive field of output location `j = oy * w_out + ox`; row index is
/// `(ci * K + u) * K + v`.
pub fn im2col(x_inserted: &Tensor3, k: usize) -> Result<Im2colMatrix> {
    im2col_strided(x_inserted, k, 1, 0)
}

/// General im2col over a padded, strided window sweep. The transposed-conv
/// path uses stride 1 / padding 0 on the inserted map; standard convolution
/// layers lower with their own stride and padding.
pub fn im2col_strided(x: &Tensor3, k: usize, stride: usize, padding: usize) -> Result<Im2colMatrix> {
    let padded_h = x.height + 2 * padding;
    let padded_w = x.width + 2 * padding;
    if k > padded_h || k > padded_w {
        return Err(Error::KernelTooLarge {
            kernel: k,
            map: padded_h.min(padded_w),
        });
    }
    let h_out = (padded_h - k) / stride + 1;
    let w_out = (padded_w - k) / stride + 1;
    let rows = x.channels * k * k;
    let cols = h_out * w_out;
    let mut data = vec![0.0f32; rows * cols];
    for ci in 0..x.channels {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let out_row = &mut data[row * cols..(row + 1) * cols];
                for oy in 0..h_out {
                    let iy = (oy * stride + u) as isize - padding as isize;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + v) as isize - padding as isize;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        out_row[oy * w_out + ox] = x.at(ci, iy as usize, ix as usize);
                    }
                }
            }
        }
    }
    let nonzero_mask = data.iter().map(|v| *v != 0.0).collect();
    Ok(Im2colMatrix {
        rows,
        cols,
        data,
        nonzero_mask,
    })
}

/// `W_mat^T * X_col` with f64 accumulation: `w_mat` is `d x out_channels`
/// from [`crate::tensor::unfold_weights`], the result is `out_channels x cols`.
pub fn gemm(w_mat: &[f32], out_channels: usize, x_col: &Im2colMatrix) -> Result<Vec<f32>> {
    let d = x_col.rows;
    if w_mat.len() != d * out_channels {
        return Err(Error::ShapeMismatch {
            context: "gemm",
            expected: format!("{} weight values", d * out_channels),
            got: format!("{}", w_mat.len()),
        });
    }
    let cols = x_col.cols;
    let mut acc = vec![0.0f64; out_channels * cols];
    for r in 0..d {
        let x_row = &x_col.data[r * cols..(r + 1) * cols];
        let w_row = &w_mat[r * out_channels..(r + 1) * out_channels];
        for (co, wv) in w_row.iter().enumerate() {
            if *wv == 0.0 {
                continue;
            }
            let wv = *wv as f64;
            let out_row = &mut acc[co * cols..(co + 1) * cols];
            for (o, xv) in out_row.iter_mut().zip(x_row.iter()) {
                *o += wv * *xv as f64;
            }
        }
    }
    Ok(acc.iter().map(|v| *v as f32).collect())
}

/// Reshape GEMM output columns back to a spatial map and add the bias.
/// Each output location is produced by exactly one column, so this is pure
/// reshaping with no overlap accumulation.
pub fn col2im(
    y_col: &[f32],
    out_channels: usize,
    h_out: usize,
    w_out: usize,
    bias: &[f32],
) -> Result<Tensor3> {
    if y_col.len() != out_channels * h_out * w_out {
        return Err(Error::ShapeMismatch {
            context: "col2im",
            expected: format!("{} values", out_channels * h_out * w_out),
            got: format!("{}", y_col.len()),
        });
    }
    let mut data = y_col.to_vec();
    for co in 0..out_channels {
        for v in &mut data[co * h_out * w_out..(co + 1) * h_out * w_out] {
            *v += bias[co];
        }
    }
    Tensor3::new(out_channels, h_out, w_out, data)
}

/// Transposed convolution via zero-insert, im2col and GEMM. Must agree with
/// [`conv_transpose_direct`] to 1e-5 max-abs.
pub fn conv_transpose_im2col(
    x: &Tensor3,
    w: &WeightTensor,
    bias: &[f32],
    spec: &LayerSpec,
) -> Result<Tensor3> {
    check_in_channels(x, w, "conv_transpose_im2col")?;
    let inserted = zero_insert(x, spec)?;
    let x_col = im2col(&inserted, spec.kernel)?;
    let w_mat = crate::tensor::unfold_weights(w);
    let y_col = gemm(&w_mat, w.out_channels, &x_col)?;
    let h_out = spec.output_width(x.height)?;
    let w_out = spec.output_width(x.width)?;
    col2im(&y_col, w.out_channels, h_out, w_out, bias)
}

/// Apply one layer without its activation.
pub fn apply_layer_linear(x: &Tensor3, layer: &crate::tensor::DecoderLayer) -> Result<Tensor3> {
    match layer.spec.kind {
        LayerKind::Conv => conv2d(x, &layer.weights, &layer.bias, &layer.spec),
        LayerKind::ConvTranspose => {
            conv_transpose_direct(x, &layer.weights, &layer.bias, &layer.spec)
        }
    }
}

/// Full forward pass: optional input transform, then per layer the linear op,
/// bias and LeakyReLU where configured.
pub fn forward(model: &DecoderModel, x: &Tensor3) -> Result<Tensor3> {
    forward_collect(model, x, &mut |_, _| {})
}

/// Forward pass invoking `tap(layer_index, layer_input)` with the activation
/// entering each layer. Used by calibration to harvest per-layer inputs.
pub fn forward_collect(
    model: &DecoderModel,
    x: &Tensor3,
    tap: &mut dyn FnMut(usize, &Tensor3),
) -> Result<Tensor3> {
    let mut cur = x.clone();
    if let Some(t) = &model.input_transform {
        if t.len() != cur.channels {
            return Err(Error::ShapeMismatch {
                context: "forward input_transform",
                expected: format!("{} channels", t.len()),
                got: format!("{}", cur.channels),
            });
        }
        let plane = cur.height * cur.width;
        for (c, scale) in t.iter().enumerate() {
            for v in &mut cur.data[c * plane..(c + 1) * plane] {
                *v *= scale;
            }
        }
    }
    for (i, layer) in model.layers.iter().enumerate() {
        tap(i, &cur);
        let mut y = apply_layer_linear(&cur, layer)?;
        if let Some(slope) = layer.spec.activation_slope {
            y = leaky_relu(&y, slope);
        }
        cur = y;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DecoderLayer;

    fn tconv_spec(k: usize, s: usize, p: usize) -> LayerSpec {
        LayerSpec::new(LayerKind::ConvTranspose, k, s, p, None).unwrap()
    }

    #[test]
    fn zero_insert_width_first_layer_example() {
        assert_eq!(zero_insert_width(2, 4, 1, 2).unwrap(), 7);
    }

    #[test]
    fn zero_insert_width_identity_geometry() {
        assert_eq!(zero_insert_width(1, 1, 0, 1).unwrap(), 1);
    }

    #[test]
    fn zero_insert_width_direct_eval() {
        assert_eq!(zero_insert_width(4, 4, 1, 2).unwrap(), 11);
    }

    #[test]
    fn zero_insert_width_rejects_negative_border() {
        assert!(matches!(
            zero_insert_width(2, 2, 3, 1),
            Err(Error::NegativeInteriorPad { .. })
        ));
    }

    #[test]
    fn zero_insert_positions_first_layer() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = zero_insert(&x, &tconv_spec(4, 2, 1)).unwrap();
        assert_eq!((out.height, out.width), (7, 7));
        let mut nonzero = Vec::new();
        for y in 0..7 {
            for xx in 0..7 {
                if out.at(0, y, xx) != 0.0 {
                    nonzero.push((y, xx, out.at(0, y, xx)));
                }
            }
        }
        assert_eq!(
            nonzero,
            vec![(2, 2, 1.0), (2, 4, 2.0), (4, 2, 3.0), (4, 4, 4.0)]
        );
    }

    #[test]
    fn zero_insert_degenerate_is_identity() {
        // S = 1, P = K - 1 inserts nothing and adds no border.
        let x = Tensor3::new(2, 3, 3, (0..18).map(|i| i as f32 - 4.0).collect()).unwrap();
        let out = zero_insert(&x, &tconv_spec(3, 1, 2)).unwrap();
        assert_eq!(out, x);
    }

    /// Brute-force oracle: slide a KxK window over the inserted map and
    /// correlate with the spatially flipped kernel.
    fn sliding_window_oracle(
        x: &Tensor3,
        w: &WeightTensor,
        bias: &[f32],
        spec: &LayerSpec,
    ) -> Tensor3 {
        let ins = zero_insert(x, spec).unwrap();
        let k = spec.kernel;
        let h_out = ins.height - k + 1;
        let w_out = ins.width - k + 1;
        let mut out = Tensor3::zeros(w.out_channels, h_out, w_out);
        for co in 0..w.out_channels {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias[co] as f64;
                    for ci in 0..x.channels {
                        for u in 0..k {
                            for v in 0..k {
                                acc += ins.at(ci, oy + u, ox + v) as f64
                                    * w.at(ci, co, k - 1 - u, k - 1 - v) as f64;
                            }
                        }
                    }
                    *out.at_mut(co, oy, ox) = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_transpose_matches_sliding_window_all_ones() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = WeightTensor::new(1, 1, 4, 4, vec![1.0; 16]).unwrap();
        let spec = tconv_spec(4, 2, 1);
        let direct = conv_transpose_direct(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!((direct.height, direct.width), (4, 4));
        let oracle = sliding_window_oracle(&x, &w, &[0.0], &spec);
        assert_eq!(direct, oracle);
        // With an all-ones kernel each output pixel is the sum of covered
        // nonzeros of the 7x7 inserted map.
        assert_eq!(direct.at(0, 0, 0), 1.0);
        assert_eq!(direct.at(0, 1, 1), 10.0);
    }

    /// Golden pin of the kernel flip convention: an asymmetric kernel must
    /// produce identical results from the scatter path and the flipped
    /// sliding-window path.
    #[test]
    fn flip_convention_golden() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let w_data: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 1.0).collect();
        let w = WeightTensor::new(1, 1, 4, 4, w_data).unwrap();
        let spec = tconv_spec(4, 2, 1);
        let direct = conv_transpose_direct(&x, &w, &[0.1], &spec).unwrap();
        let oracle = sliding_window_oracle(&x, &w, &[0.1], &spec);
        for (a, b) in direct.data.iter().zip(oracle.data.iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_transpose_zero_input_broadcasts_bias() {
        let x = Tensor3::zeros(2, 3, 3);
        let w = WeightTensor::new(2, 2, 4, 4, vec![0.7; 64]).unwrap();
        let out = conv_transpose_direct(&x, &w, &[1.5, -2.0], &tconv_spec(4, 2, 1)).unwrap();
        for y in 0..out.height {
            for xx in 0..out.width {
                assert_eq!(out.at(0, y, xx), 1.5);
                assert_eq!(out.at(1, y, xx), -2.0);
            }
        }
    }

    #[test]
    fn conv_transpose_1x1_kernel_scales_input() {
        let x = Tensor3::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = WeightTensor::new(1, 1, 1, 1, vec![2.5]).unwrap();
        let spec = tconv_spec(1, 1, 0);
        let out = conv_transpose_direct(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!(out.data, vec![2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn im2col_first_layer_sparsity() {
        for channels in [1usize, 3] {
            let data: Vec<f32> = (0..channels * 4).map(|i| i as f32 + 1.0).collect();
            let x = Tensor3::new(channels, 2, 2, data).unwrap();
            let ins = zero_insert(&x, &tconv_spec(4, 2, 1)).unwrap();
            let m = im2col(&ins, 4).unwrap();
            assert_eq!(m.rows, channels * 16);
            assert_eq!(m.cols, 16);
            let nonzero = m.nonzero_mask.iter().filter(|b| **b).count();
            assert_eq!(nonzero, 36 * channels);
            assert_eq!(m.data.len(), 256 * channels);
            assert!((m.zero_fraction() - 0.859375).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_dense_no_insertion_zero_fraction_is_border_only() {
        let x = Tensor3::new(1, 4, 4, (1..=16).map(|i| i as f32).collect()).unwrap();
        let m = im2col_strided(&x, 3, 1, 0).unwrap();
        // No padding, dense input: every entry is a real pixel.
        assert_eq!(m.count_zero(), 0);
        let mp = im2col_strided(&x, 3, 1, 1).unwrap();
        // With padding 1 the zeros are exactly the border-touching taps.
        assert!(mp.count_zero() > 0);
        for (i, v) in mp.data.iter().enumerate() {
            assert_eq!(mp.nonzero_mask[i], (*v != 0.0));
        }
    }

    #[test]
    fn im2col_rejects_oversized_kernel() {
        let x = Tensor3::zeros(1, 3, 3);
        assert!(matches!(
            im2col(&x, 5),
            Err(Error::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn gemm_path_reproduces_direct_path() {
        // Pseudo-random but dependency-free values.
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 1.0
        };
        for (c_in, c_out, w_in, k, s, p) in [
            (2usize, 3usize, 2usize, 4usize, 2usize, 1usize),
            (1, 2, 3, 3, 2, 1),
            (3, 1, 4, 2, 1, 0),
            (2, 2, 2, 5, 3, 2),
        ] {
            let x = Tensor3::new(c_in, w_in, w_in, (0..c_in * w_in * w_in).map(|_| next()).collect())
                .unwrap();
            let w = WeightTensor::new(
                c_in,
                c_out,
                k,
                k,
                (0..c_in * c_out * k * k).map(|_| next()).collect(),
            )
            .unwrap();
            let bias: Vec<f32> = (0..c_out).map(|_| next()).collect();
            let spec = tconv_spec(k, s, p);
            let a = conv_transpose_direct(&x, &w, &bias, &spec).unwrap();
            let b = conv_transpose_im2col(&x, &w, &bias, &spec).unwrap();
            let max_abs = a
                .data
                .iter()
                .zip(b.data.iter())
                .fold(0.0f32, |m, (p0, q0)| m.max((p0 - q0).abs()));
            assert!(max_abs <= 1e-5, "paths diverge by {max_abs}");
        }
    }

    #[test]
    fn leaky_relu_examples() {
        let x = Tensor3::new(1, 1, 2, vec![-2.0, 3.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data, vec![-0.4, 3.0]);
    }

    #[test]
    fn forward_single_identity_layer() {
        // 1x1 kernel with weight 1 is the identity linear map.
        let spec = LayerSpec::new(LayerKind::ConvTranspose, 1, 1, 0, Some(0.2)).unwrap();
        let w = WeightTensor::new(1, 1, 1, 1, vec![1.0]).unwrap();
        let layer = DecoderLayer::new(spec, w, vec![0.5]).unwrap();
        let model = DecoderModel::new(vec![layer]).unwrap();
        let x = Tensor3::new(1, 1, 2, vec![-3.0, 1.0]).unwrap();
        let y = forward(&model, &x).unwrap();
        // leaky_relu(x + 0.5)
        assert_eq!(y.data, vec![0.2 * -2.5, 1.5]);
    }

    #[test]
    fn forward_two_layer_matches_manual_composition() {
        let spec = tconv_spec(4, 2, 1);
        let spec_act = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, Some(0.2)).unwrap();
        let w0 = WeightTensor::new(1, 2, 4, 4, (0..32).map(|i| (i as f32 - 16.0) * 0.1).collect())
            .unwrap();
        let w1 = WeightTensor::new(2, 1, 4, 4, (0..32).map(|i| (i as f32 - 10.0) * 0.05).collect())
            .unwrap();
        let l0 = DecoderLayer::new(spec_act, w0.clone(), vec![0.1, -0.2]).unwrap();
        let l1 = DecoderLayer::new(spec, w1.clone(), vec![0.3]).unwrap();
        let model = DecoderModel::new(vec![l0, l1]).unwrap();
        let x = Tensor3::new(1, 2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let y = forward(&model, &x).unwrap();
        let h = conv_transpose_direct(&x, &w0, &[0.1, -0.2], &spec_act).unwrap();
        let h = leaky_relu(&h, 0.2);
        let manual = conv_transpose_direct(&h, &w1, &[0.3], &spec).unwrap();
        assert_eq!(y, manual);
    }

    #[test]
    fn forward_zero_input_is_bias_chain() {
        let spec_act = LayerSpec::new(LayerKind::ConvTranspose, 4, 2, 1, Some(0.2)).unwrap();
        let w0 = WeightTensor::new(1, 1, 4, 4, vec![0.25; 16]).unwrap();
        let l0 = DecoderLayer::new(spec_act, w0.clone(), vec![1.0]).unwrap();
        let model = DecoderModel::new(vec![l0]).unwrap();
        let zero = Tensor3::zeros(1, 2, 2);
        let y = forward(&model, &zero).unwrap();
        let expect = leaky_relu(
            &conv_transpose_direct(&zero, &w0, &[1.0], &spec_act).unwrap(),
            0.2,
        );
        assert_eq!(y, expect);
        for v in &y.data {
            assert_eq!(*v, 1.0); // bias through positive LeakyReLU
        }
    }
}
