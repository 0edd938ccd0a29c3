//! Integer grids, importance-weighted Hessians and the greedy
//! error-compensated weight sweep.
//!
//! Weights quantize on symmetric per-output-channel grids, activations on an
//! asymmetric per-tensor grid with optional percentile clipping. The sweep
//! walks the unfolded input-feature dimension in order, quantizes one row at
//! a time and propagates the rounding error into the not-yet-quantized rows
//! through the upper Cholesky factor of the inverse Hessian. Structural
//! zeros in the Hessian (tap pairs that never co-occur) split it into
//! independent blocks, which the sweep factorizes separately; the result is
//! bit-identical to the dense sweep because cross-block compensation is zero.

use serde::{Deserialize, Serialize};

use crate::conv::{self, im2col, im2col_strided, zero_insert, Im2colMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{DecoderModel, LayerKind, LayerSpec, Tensor3, WeightTensor};
use crate::uvmap::UVImportanceMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScheme {
    SymmetricPerOutChannel,
    AsymmetricPerTensor,
}

/// Integer quantization grid. Symmetric grids hold one scale per output
/// channel and zero offsets; asymmetric grids hold a single scale and zero
/// point for the whole tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub bits: u8,
    pub scheme: GridScheme,
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
}

impl QuantGrid {
    pub fn range(&self) -> (i64, i64) {
        match self.scheme {
            GridScheme::SymmetricPerOutChannel => {
                let hi = (1i64 << (self.bits - 1)) - 1;
                (-(1i64 << (self.bits - 1)), hi)
            }
            GridScheme::AsymmetricPerTensor => (0, (1i64 << self.bits) - 1),
        }
    }

    /// Symmetric per-output-channel grid over an unfolded `d x out_channels`
    /// weight matrix: `scale_co = max|w[:, co]| / (2^{bits-1} - 1)`.
    /// An all-zero column defaults to scale 1 (any grid represents it).
    pub fn symmetric_per_out_channel(
        w_mat: &[f32],
        d: usize,
        out_channels: usize,
        bits: u8,
    ) -> Result<Self> {
        if !(2..=32).contains(&bits) {
            return Err(Error::InvalidLayer(format!(
                "weight grid bits must lie in 2..=32, got {bits}"
            )));
        }
        if w_mat.len() != d * out_channels {
            return Err(Error::ShapeMismatch {
                context: "QuantGrid::symmetric_per_out_channel",
                expected: format!("{} values", d * out_channels),
                got: format!("{}", w_mat.len()),
            });
        }
        let qmax = ((1i64 << (bits - 1)) - 1) as f64;
        let mut maxes = vec![0.0f32; out_channels];
        for row in w_mat.chunks_exact(out_channels) {
            for (m, v) in maxes.iter_mut().zip(row.iter()) {
                *m = m.max(v.abs());
            }
        }
        let scales = maxes
            .iter()
            .map(|&m| if m == 0.0 { 1.0 } else { (m as f64 / qmax) as f32 })
            .collect();
        Ok(Self {
            bits,
            scheme: GridScheme::SymmetricPerOutChannel,
            scales,
            zero_points: vec![0; out_channels],
        })
    }

    /// Asymmetric min-max per-tensor grid, range extended to include zero so
    /// structural zeros quantize exactly. `clip_percentile`, when set, clips
    /// the range symmetrically at that percentile of |values|.
    pub fn asymmetric_per_tensor(
        values: &[f32],
        bits: u8,
        clip_percentile: Option<f64>,
    ) -> Result<Self> {
        if !(2..=24).contains(&bits) {
            return Err(Error::InvalidLayer(format!(
                "activation grid bits must lie in 2..=24, got {bits}"
            )));
        }
        if values.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for v in values {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if let Some(p) = clip_percentile {
            let mut abs: Vec<f32> = values.iter().map(|v| v.abs()).collect();
            abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = (((p / 100.0) * abs.len() as f64).ceil() as usize)
                .clamp(1, abs.len())
                - 1;
            let t = abs[idx];
            lo = lo.max(-t);
            hi = hi.min(t);
        }
        lo = lo.min(0.0);
        hi = hi.max(0.0);
        let qmax = ((1i64 << bits) - 1) as f64;
        let span = hi as f64 - lo as f64;
        let (scale, zp) = if span == 0.0 {
            (1.0f32, 0i32)
        } else {
            let scale = span / qmax;
            let zp = (-(lo as f64) / scale).round() as i32;
            (scale as f32, zp.clamp(0, qmax as i32))
        };
        Ok(Self {
            bits,
            scheme: GridScheme::AsymmetricPerTensor,
            scales: vec![scale],
            zero_points: vec![zp],
        })
    }

    /// Quantize one value on the grid for output channel `co` (ignored for
    /// per-tensor grids).
    #[inline]
    pub fn quantize(&self, value: f32, co: usize) -> i32 {
        let (qmin, qmax) = self.range();
        match self.scheme {
            GridScheme::SymmetricPerOutChannel => {
                let q = (value as f64 / self.scales[co] as f64).round() as i64;
                q.clamp(qmin, qmax) as i32
            }
            GridScheme::AsymmetricPerTensor => {
                let q = (value as f64 / self.scales[0] as f64).round() as i64
                    + self.zero_points[0] as i64;
                q.clamp(qmin, qmax) as i32
            }
        }
    }

    #[inline]
    pub fn dequantize(&self, q: i32, co: usize) -> f32 {
        match self.scheme {
            GridScheme::SymmetricPerOutChannel => {
                (q as f64 * self.scales[co] as f64) as f32
            }
            GridScheme::AsymmetricPerTensor => {
                ((q as i64 - self.zero_points[0] as i64) as f64 * self.scales[0] as f64) as f32
            }
        }
    }

    /// Quantize-dequantize a whole tensor on a per-tensor grid.
    pub fn fake_quant_tensor(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(self.scheme, GridScheme::AsymmetricPerTensor);
        let mut out = x.clone();
        for v in &mut out.data {
            *v = self.dequantize(self.quantize(*v, 0), 0);
        }
        out
    }
}

/// Importance-weighted layer Hessian over the unfolded input-feature
/// dimension, with additive damping.
#[derive(Debug, Clone)]
pub struct WeightedHessian {
    pub dim: usize,
    /// Row-major symmetric `dim x dim`.
    pub matrix: Vec<f64>,
    pub lambda: f64,
    pub sample_count: usize,
}

impl WeightedHessian {
    /// Cholesky feasibility check (positive definite after damping).
    pub fn is_positive_definite(&self) -> bool {
        let mut a = self.matrix.clone();
        linalg::cholesky_lower(&mut a, self.dim).is_ok()
    }
}

/// Weight a sample by the channel-broadcast importance map.
fn weight_sample(x: &Tensor3, map: &UVImportanceMap) -> Result<Tensor3> {
    if map.height != x.height || map.width != x.width {
        return Err(Error::ShapeMismatch {
            context: "weighted_hessian map",
            expected: format!("{}x{}", x.height, x.width),
            got: format!("{}x{}", map.height, map.width),
        });
    }
    let mut out = x.clone();
    let plane = x.height * x.width;
    for c in 0..x.channels {
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        for (d, w) in dst.iter_mut().zip(map.weights.iter()) {
            *d *= *w;
        }
    }
    Ok(out)
}

fn lower_sample(x: &Tensor3, spec: &LayerSpec) -> Result<Im2colMatrix> {
    match spec.kind {
        LayerKind::ConvTranspose => {
            let inserted = zero_insert(x, spec)?;
            im2col(&inserted, spec.kernel)
        }
        LayerKind::Conv => im2col_strided(x, spec.kernel, spec.stride, spec.padding),
    }
}

/// `H = (1/S) * sum_s 2 * X_col X_col^T + lambda I`, with the inputs
/// importance-weighted before zero insertion (importance attaches to real
/// activations, not inserted zeros) and `lambda = lambda_frac * mean(diag)`.
/// When the weighted data vanishes entirely, `lambda` falls back to
/// `lambda_frac` itself so the degenerate case still yields `lambda I`.
pub fn weighted_hessian(
    samples: &[Tensor3],
    map: &UVImportanceMap,
    spec: &LayerSpec,
    lambda_frac: f64,
) -> Result<WeightedHessian> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut dim = 0usize;
    let mut acc: Vec<f64> = Vec::new();
    let mut nz_idx: Vec<u32> = Vec::new();
    let mut nz_val: Vec<f64> = Vec::new();
    for x in samples {
        let weighted = weight_sample(x, map)?;
        let x_col = lower_sample(&weighted, spec)?;
        if acc.is_empty() {
            dim = x_col.rows;
            acc = vec![0.0f64; dim * dim];
        } else if x_col.rows != dim {
            return Err(Error::ShapeMismatch {
                context: "weighted_hessian",
                expected: format!("{dim} rows"),
                got: format!("{}", x_col.rows),
            });
        }
        // Upper-triangle accumulation over the nonzero taps of each column.
        for col in 0..x_col.cols {
            nz_idx.clear();
            nz_val.clear();
            for r in 0..dim {
                let v = x_col.at(r, col);
                if v != 0.0 {
                    nz_idx.push(r as u32);
                    nz_val.push(v as f64);
                }
            }
            for a in 0..nz_idx.len() {
                let ra = nz_idx[a] as usize;
                let va = nz_val[a];
                let row = &mut acc[ra * dim..(ra + 1) * dim];
                for b in a..nz_idx.len() {
                    row[nz_idx[b] as usize] += va * nz_val[b];
                }
            }
        }
    }
    let norm = 2.0 / samples.len() as f64;
    let mut diag_sum = 0.0f64;
    for i in 0..dim {
        for j in i..dim {
            let v = acc[i * dim + j] * norm;
            acc[i * dim + j] = v;
            acc[j * dim + i] = v;
        }
        diag_sum += acc[i * dim + i];
    }
    let mean_diag = diag_sum / dim as f64;
    let lambda = if mean_diag > 0.0 {
        lambda_frac * mean_diag
    } else {
        // Weighting annihilated the data; damp with the raw fraction.
        lambda_frac
    };
    if lambda <= 0.0 && mean_diag == 0.0 {
        return Err(Error::SingularHessian);
    }
    for i in 0..dim {
        acc[i * dim + i] += lambda;
    }
    Ok(WeightedHessian {
        dim,
        matrix: acc,
        lambda,
        sample_count: samples.len(),
    })
}

/// How rounding error propagates into later rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationMode {
    /// Standard form: scale by rows of the upper Cholesky factor of H^-1.
    InverseCholesky,
    /// Literal ratio `H[r, j] / H[r, r]` of the damped Hessian itself; kept
    /// for comparison only.
    RawHessian,
}

/// Integer weights for one layer, stored unfolded (`d x out_channels`)
/// together with the grid that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub qweights: Vec<i32>,
    pub grid: QuantGrid,
}

impl QuantizedLayer {
    pub fn dim(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Dequantized unfolded matrix.
    pub fn dequantized_mat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.qweights.len());
        for row in self.qweights.chunks_exact(self.out_channels) {
            for (co, q) in row.iter().enumerate() {
                out.push(self.grid.dequantize(*q, co));
            }
        }
        out
    }
}

/// Connected components of the Hessian's structural nonzero pattern, each
/// sorted ascending. A dense Hessian yields one component spanning all rows.
fn hessian_components(h: &[f64], dim: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..dim).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..dim {
        for j in i + 1..dim {
            if h[i * dim + j] != 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..dim {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Greedy sweep over the input-feature rows of the unfolded weight matrix.
///
/// Rows are visited in index order; each is quantized on the grid and its
/// error is spread across every later row of all output columns via the
/// inverse-Hessian Cholesky factor (or the raw-Hessian ratio when
/// configured). Cholesky failure is reported, never patched.
pub fn gptq_quantize_layer(
    w_mat: &[f32],
    in_channels: usize,
    kernel: usize,
    out_channels: usize,
    h: &WeightedHessian,
    grid: &QuantGrid,
    mode: CompensationMode,
) -> Result<QuantizedLayer> {
    let d = in_channels * kernel * kernel;
    if h.dim != d {
        return Err(Error::ShapeMismatch {
            context: "gptq_quantize_layer",
            expected: format!("Hessian dim {d}"),
            got: format!("{}", h.dim),
        });
    }
    if w_mat.len() != d * out_channels {
        return Err(Error::ShapeMismatch {
            context: "gptq_quantize_layer",
            expected: format!("{} weight values", d * out_channels),
            got: format!("{}", w_mat.len()),
        });
    }
    let mut work: Vec<f64> = w_mat.iter().map(|v| *v as f64).collect();
    let mut qweights = vec![0i32; d * out_channels];
    let mut err = vec![0.0f64; out_channels];
    for comp in hessian_components(&h.matrix, d) {
        let m = comp.len();
        let factor: Option<Vec<f64>> = match mode {
            CompensationMode::InverseCholesky => {
                let mut sub = vec![0.0f64; m * m];
                for (a, &ga) in comp.iter().enumerate() {
                    for (b, &gb) in comp.iter().enumerate() {
                        sub[a * m + b] = h.matrix[ga * d + gb];
                    }
                }
                Some(linalg::inv_cholesky_upper(&sub, m)?)
            }
            CompensationMode::RawHessian => None,
        };
        for (r, &gr) in comp.iter().enumerate() {
            let row = gr * out_channels;
            for co in 0..out_channels {
                let w = work[row + co];
                let q = grid.quantize(w as f32, co);
                qweights[row + co] = q;
                err[co] = w - grid.dequantize(q, co) as f64;
            }
            match (&factor, mode) {
                (Some(u), CompensationMode::InverseCholesky) => {
                    let urr = u[r * m + r];
                    for j in r + 1..m {
                        let c = u[r * m + j] / urr;
                        if c == 0.0 {
                            continue;
                        }
                        let dst = comp[j] * out_channels;
                        for co in 0..out_channels {
                            work[dst + co] -= err[co] * c;
                        }
                    }
                }
                _ => {
                    let hrr = h.matrix[gr * d + gr];
                    for j in r + 1..m {
                        let gj = comp[j];
                        let c = h.matrix[gr * d + gj] / hrr;
                        if c == 0.0 {
                            continue;
                        }
                        let dst = gj * out_channels;
                        for co in 0..out_channels {
                            work[dst + co] -= err[co] * c;
                        }
                    }
                }
            }
        }
    }
    Ok(QuantizedLayer {
        in_channels,
        out_channels,
        kernel,
        qweights,
        grid: grid.clone(),
    })
}

/// Round-to-nearest baseline: same grid, no compensation.
pub fn rtn_quantize_layer(
    w_mat: &[f32],
    in_channels: usize,
    kernel: usize,
    out_channels: usize,
    grid: &QuantGrid,
) -> QuantizedLayer {
    let mut qweights = Vec::with_capacity(w_mat.len());
    for row in w_mat.chunks_exact(out_channels) {
        for (co, v) in row.iter().enumerate() {
            qweights.push(grid.quantize(*v, co));
        }
    }
    QuantizedLayer {
        in_channels,
        out_channels,
        kernel,
        qweights,
        grid: grid.clone(),
    }
}

/// One quantized decoder layer with its activation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModelLayer {
    pub spec: LayerSpec,
    pub weights: QuantizedLayer,
    pub bias: Vec<f32>,
    pub act_grid: Option<QuantGrid>,
}

impl QuantizedModelLayer {
    /// Fold the dequantized unfolded matrix back into a kernel tensor.
    pub fn dequantized_weights(&self) -> Result<WeightTensor> {
        let mat = self.weights.dequantized_mat();
        match self.spec.kind {
            LayerKind::ConvTranspose => crate::tensor::fold_weights(
                &mat,
                self.weights.in_channels,
                self.weights.out_channels,
                self.weights.kernel,
            ),
            LayerKind::Conv => fold_weights_conv(
                &mat,
                self.weights.in_channels,
                self.weights.out_channels,
                self.weights.kernel,
            ),
        }
    }
}

/// Fully quantized decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedModelLayer>,
    pub input_transform: Option<Vec<f32>>,
}

/// Unfold without the spatial flip, for standard-convolution layers whose
/// GEMM lowers patches directly.
pub fn unfold_weights_conv(w: &WeightTensor) -> Vec<f32> {
    let k = w.kh;
    let d = w.in_channels * k * k;
    let mut out = vec![0.0f32; d * w.out_channels];
    for ci in 0..w.in_channels {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                for co in 0..w.out_channels {
                    out[row * w.out_channels + co] = w.at(ci, co, u, v);
                }
            }
        }
    }
    out
}

pub fn fold_weights_conv(
    mat: &[f32],
    in_channels: usize,
    out_channels: usize,
    k: usize,
) -> Result<WeightTensor> {
    let d = in_channels * k * k;
    if mat.len() != d * out_channels {
        return Err(Error::ShapeMismatch {
            context: "fold_weights_conv",
            expected: format!("{} values", d * out_channels),
            got: format!("{}", mat.len()),
        });
    }
    let mut w = WeightTensor::zeros(in_channels, out_channels, k, k);
    for ci in 0..in_channels {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                for co in 0..out_channels {
                    *w.at_mut(ci, co, u, v) = mat[row * out_channels + co];
                }
            }
        }
    }
    Ok(w)
}

/// Unfold a layer's kernel with the convention its GEMM lowering expects.
pub fn unfold_for_spec(spec: &LayerSpec, w: &WeightTensor) -> Vec<f32> {
    match spec.kind {
        LayerKind::ConvTranspose => crate::tensor::unfold_weights(w),
        LayerKind::Conv => unfold_weights_conv(w),
    }
}

/// Simulated integer inference: quantize-dequantize the activation entering
/// every layer, run the layer with dequantized integer weights, apply the
/// activation. Deterministic.
pub fn fake_quant_forward(model: &QuantizedModel, x: &Tensor3) -> Result<Tensor3> {
    let mut cur = x.clone();
    if let Some(t) = &model.input_transform {
        let plane = cur.height * cur.width;
        for (c, scale) in t.iter().enumerate() {
            for v in &mut cur.data[c * plane..(c + 1) * plane] {
                *v *= scale;
            }
        }
    }
    for (i, layer) in model.layers.iter().enumerate() {
        let grid = layer
            .act_grid
            .as_ref()
            .ok_or(Error::UncalibratedActivationGrid { layer: i })?;
        let xq = grid.fake_quant_tensor(&cur);
        let w = layer.dequantized_weights()?;
        let mut y = match layer.spec.kind {
            LayerKind::ConvTranspose => {
                conv::conv_transpose_direct(&xq, &w, &layer.bias, &layer.spec)?
            }
            LayerKind::Conv => conv::conv2d(&xq, &w, &layer.bias, &layer.spec)?,
        };
        if let Some(slope) = layer.spec.activation_slope {
            y = conv::leaky_relu(&y, slope);
        }
        cur = y;
    }
    Ok(cur)
}

/// Calibrate one asymmetric per-tensor activation grid per layer from the
/// float model's layer inputs over the calibration set.
pub fn calibrate_activation_grids(
    model: &DecoderModel,
    calib: &[Tensor3],
    bits: u8,
    clip_percentile: Option<f64>,
) -> Result<Vec<QuantGrid>> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut pools: Vec<Vec<f32>> = vec![Vec::new(); model.layers.len()];
    for x in calib {
        conv::forward_collect(model, x, &mut |i, t| pools[i].extend_from_slice(&t.data))?;
    }
    pools
        .iter()
        .map(|p| QuantGrid::asymmetric_per_tensor(p, bits, clip_percentile))
        .collect()
}

/// Quantize every layer of a model: unfold, grid, sweep.
pub fn quantize_model(
    model: &DecoderModel,
    hessians: &[WeightedHessian],
    act_grids: Vec<QuantGrid>,
    weight_bits: u8,
    mode: CompensationMode,
) -> Result<QuantizedModel> {
    if hessians.len() != model.layers.len() || act_grids.len() != model.layers.len() {
        return Err(Error::ShapeMismatch {
            context: "quantize_model",
            expected: format!("{} hessians/grids", model.layers.len()),
            got: format!("{}/{}", hessians.len(), act_grids.len()),
        });
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for ((layer, h), act_grid) in model.layers.iter().zip(hessians).zip(act_grids) {
        let w_mat = unfold_for_spec(&layer.spec, &layer.weights);
        let (ci, co, k) = (
            layer.weights.in_channels,
            layer.weights.out_channels,
            layer.weights.kh,
        );
        let grid = QuantGrid::symmetric_per_out_channel(&w_mat, ci * k * k, co, weight_bits)?;
        let q = gptq_quantize_layer(&w_mat, ci, k, co, h, &grid, mode)?;
        layers.push(QuantizedModelLayer {
            spec: layer.spec,
            weights: q,
            bias: layer.bias.clone(),
            act_grid: Some(act_grid),
        });
    }
    Ok(QuantizedModel {
        layers,
        input_transform: model.input_transform.clone(),
    })
}

/// Round-to-nearest variant of [`quantize_model`].
pub fn quantize_model_rtn(
    model: &DecoderModel,
    act_grids: Vec<QuantGrid>,
    weight_bits: u8,
) -> Result<QuantizedModel> {
    let mut layers = Vec::with_capacity(model.layers.len());
    for (layer, act_grid) in model.layers.iter().zip(act_grids) {
        let w_mat = unfold_for_spec(&layer.spec, &layer.weights);
        let (ci, co, k) = (
            layer.weights.in_channels,
            layer.weights.out_channels,
            layer.weights.kh,
        );
        let grid = QuantGrid::symmetric_per_out_channel(&w_mat, ci * k * k, co, weight_bits)?;
        layers.push(QuantizedModelLayer {
            spec: layer.spec,
            weights: rtn_quantize_layer(&w_mat, ci, k, co, &grid),
            bias: layer.bias.clone(),
            act_grid: Some(act_grid),
        });
    }
    Ok(QuantizedModel {
        layers,
        input_transform: model.input_transform.clone(),
    })
}
