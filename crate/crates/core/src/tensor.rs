//! Dense tensor types for decoder activations and weights.
//!
//! `Tensor3` is a channel-major activation map, `WeightTensor` a 4-D
//! convolution kernel stored in (in, out, kh, kw) order. Both are plain
//! `Vec<f32>` buffers with explicit shape metadata; all operations on them
//! are pure functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major activation tensor: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                context: "Tensor3::new",
                expected: format!("{} values", channels * height * width),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Tensor3::new"));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// Row `y` of channel `c` as a contiguous slice.
    #[inline]
    pub fn row(&self, c: usize, y: usize) -> &[f32] {
        let start = (c * self.height + y) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.height * self.width;
        &self.data[c * len..(c + 1) * len]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Convolution kernel in (in, out, kh, kw) order:
/// `data[((ci * out_channels + co) * kh + u) * kw + v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != in_channels * out_channels * kh * kw {
            return Err(Error::ShapeMismatch {
                context: "WeightTensor::new",
                expected: format!("{} values", in_channels * out_channels * kh * kw),
                got: format!("{}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("WeightTensor::new"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kh,
            kw,
            data: vec![0.0; in_channels * out_channels * kh * kw],
        }
    }

    #[inline]
    pub fn at(&self, ci: usize, co: usize, u: usize, v: usize) -> f32 {
        self.data[((ci * self.out_channels + co) * self.kh + u) * self.kw + v]
    }

    #[inline]
    pub fn at_mut(&mut self, ci: usize, co: usize, u: usize, v: usize) -> &mut f32 {
        &mut self.data[((ci * self.out_channels + co) * self.kh + u) * self.kw + v]
    }

    /// Max |w| over the (out, kh, kw) slice of input channel `ci`.
    pub fn max_abs_in_slice(&self, ci: usize) -> f32 {
        let len = self.out_channels * self.kh * self.kw;
        self.data[ci * len..(ci + 1) * len]
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// Geometry and activation of one decoder layer. Kernels and activations are
/// square; the slope, when present, is the LeakyReLU negative slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation_slope: Option<f32>,
}

impl LayerSpec {
    pub fn new(
        kind: LayerKind,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation_slope: Option<f32>,
    ) -> Result<Self> {
        if kernel < 1 {
            return Err(Error::InvalidLayer("kernel must be >= 1".into()));
        }
        if stride < 1 {
            return Err(Error::InvalidLayer("stride must be >= 1".into()));
        }
        if let Some(slope) = activation_slope {
            // Positive slope is required by the scale-fusing identity.
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::InvalidLayer(format!(
                    "activation slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(Self {
            kind,
            kernel,
            stride,
            padding,
            activation_slope,
        })
    }

    /// Spatial output size for a square input of width `w`.
    pub fn output_width(&self, w: usize) -> Result<usize> {
        match self.kind {
            LayerKind::ConvTranspose => {
                // (W-1)S - 2P + K, via the inserted width so degenerate
                // geometry surfaces as an error instead of wrapping.
                let inserted =
                    crate::conv::zero_insert_width(w, self.kernel, self.padding, self.stride)?;
                if inserted < self.kernel {
                    return Err(Error::KernelTooLarge {
                        kernel: self.kernel,
                        map: inserted,
                    });
                }
                Ok(inserted - self.kernel + 1)
            }
            LayerKind::Conv => {
                let padded = w + 2 * self.padding;
                if padded < self.kernel {
                    return Err(Error::KernelTooLarge {
                        kernel: self.kernel,
                        map: padded,
                    });
                }
                Ok((padded - self.kernel) / self.stride + 1)
            }
        }
    }
}

/// One layer: geometry, kernel and per-output-channel bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub spec: LayerSpec,
    pub weights: WeightTensor,
    pub bias: Vec<f32>,
}

impl DecoderLayer {
    pub fn new(spec: LayerSpec, weights: WeightTensor, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weights.out_channels {
            return Err(Error::ShapeMismatch {
                context: "DecoderLayer::new",
                expected: format!("{} bias values", weights.out_channels),
                got: format!("{}", bias.len()),
            });
        }
        if weights.kh != spec.kernel || weights.kw != spec.kernel {
            return Err(Error::ShapeMismatch {
                context: "DecoderLayer::new",
                expected: format!("square {0}x{0} kernel", spec.kernel),
                got: format!("{}x{}", weights.kh, weights.kw),
            });
        }
        Ok(Self {
            spec,
            weights,
            bias,
        })
    }
}

/// Ordered stack of layers plus an optional per-channel transform applied to
/// the model input. The transform is where first-layer smoothing scales land,
/// since that layer has no predecessor to fuse into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderModel {
    pub layers: Vec<DecoderLayer>,
    pub input_transform: Option<Vec<f32>>,
}

impl DecoderModel {
    pub fn new(layers: Vec<DecoderLayer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weights.out_channels != pair[1].weights.in_channels {
                return Err(Error::ShapeMismatch {
                    context: "DecoderModel::new",
                    expected: format!(
                        "layer {} in_channels = layer {} out_channels ({})",
                        i + 1,
                        i,
                        pair[0].weights.out_channels
                    ),
                    got: format!("{}", pair[1].weights.in_channels),
                });
            }
        }
        Ok(Self {
            layers,
            input_transform: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.in_channels)
    }

    /// Chained spatial sizes, starting from the given input width.
    pub fn spatial_chain(&self, input_width: usize) -> Result<Vec<usize>> {
        let mut widths = vec![input_width];
        let mut w = input_width;
        for layer in &self.layers {
            w = layer.spec.output_width(w)?;
            widths.push(w);
        }
        Ok(widths)
    }
}

/// Unfold a kernel into the GEMM weight matrix of shape
/// `(in_channels * k * k) x out_channels`, row index `(ci * k + u) * k + v`.
///
/// Rows are ordered channel-major, then kernel row, then kernel column, and
/// the kernel is flipped in both spatial axes so that a unit-stride
/// correlation over the zero-inserted map reproduces the scatter-form
/// transposed convolution.
pub fn unfold_weights(w: &WeightTensor) -> Vec<f32> {
    let k = w.kh;
    let d = w.in_channels * k * k;
    let mut out = vec![0.0f32; d * w.out_channels];
    for ci in 0..w.in_channels {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                for co in 0..w.out_channels {
                    out[row * w.out_channels + co] = w.at(ci, co, k - 1 - u, k - 1 - v);
                }
            }
        }
    }
    out
}

/// Inverse of [`unfold_weights`].
pub fn fold_weights(
    mat: &[f32],
    in_channels: usize,
    out_channels: usize,
    k: usize,
) -> Result<WeightTensor> {
    let d = in_channels * k * k;
    if mat.len() != d * out_channels {
        return Err(Error::ShapeMismatch {
            context: "fold_weights",
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
                    *w.at_mut(ci, co, k - 1 - u, k - 1 - v) = mat[row * out_channels + co];
                }
            }
        }
    }
    Ok(w)
}
