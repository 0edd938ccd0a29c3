//! UV hit-count importance maps.
//!
//! Vertex UV coordinates are binned onto the texture grid; the hit counts
//! are normalized to `[0, w_max]` with zero-hit texels pinned to exactly 0.
//! Maps are broadcast across channels when they weight activations, and
//! area-average pooled down to each layer's input size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-vertex texture coordinates, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UVVertexSet {
    /// Flattened (u, v) pairs: `coords[2*i]`, `coords[2*i + 1]`.
    pub coords: Vec<f32>,
}

impl UVVertexSet {
    pub fn new(coords: Vec<f32>) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "UVVertexSet::new",
                expected: "even number of coordinates".into(),
                got: format!("{}", coords.len()),
            });
        }
        for pair in coords.chunks_exact(2) {
            let (u, v) = (pair[0], pair[1]);
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(Error::UvCoordOutOfRange { u, v });
            }
        }
        Ok(Self { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Spatial importance weights in `[0, w_max]`; zero exactly where no vertex
/// hit the texel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UVImportanceMap {
    pub height: usize,
    pub width: usize,
    pub w_max: f32,
    pub weights: Vec<f32>,
}

impl UVImportanceMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.width + x]
    }

    /// Map of constant weight 1 (identity weighting).
    pub fn uniform(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            w_max: 1.0,
            weights: vec![1.0; height * width],
        }
    }

    pub fn max_weight(&self) -> f32 {
        self.weights.iter().fold(0.0f32, |m, v| m.max(*v))
    }
}

/// Accumulate the vertex hit-count map and normalize it to `[0, w_max]`.
/// A coordinate of exactly 1.0 clamps to the last texel.
pub fn build_uv_map(verts: &UVVertexSet, height: usize, width: usize, w_max: f32) -> Result<UVImportanceMap> {
    if verts.is_empty() {
        return Err(Error::EmptySamples);
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidLayer("UV map dims must be >= 1".into()));
    }
    if !w_max.is_finite() || w_max <= 0.0 {
        return Err(Error::InvalidLayer(format!(
            "w_max must be a positive finite real, got {w_max}"
        )));
    }
    let mut hits = vec![0u64; height * width];
    for pair in verts.coords.chunks_exact(2) {
        let m = ((pair[0] as f64 * height as f64).floor() as usize).min(height - 1);
        let n = ((pair[1] as f64 * width as f64).floor() as usize).min(width - 1);
        hits[m * width + n] += 1;
    }
    let max_hits = *hits.iter().max().unwrap();
    let weights = hits
        .iter()
        .map(|&a| {
            if a == 0 {
                0.0
            } else {
                (a as f64 / max_hits as f64 * w_max as f64) as f32
            }
        })
        .collect();
    Ok(UVImportanceMap {
        height,
        width,
        w_max,
        weights,
    })
}

/// Area-average pooling onto a target grid. Each output cell averages the
/// input over its exact fractional footprint, so identity dimensions return
/// the identical map and constant maps stay constant at any size. The result
/// is re-clamped to `w_max`.
pub fn downsample_uv(map: &UVImportanceMap, height: usize, width: usize) -> Result<UVImportanceMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidLayer("target dims must be >= 1".into()));
    }
    if height == map.height && width == map.width {
        return Ok(map.clone());
    }
    let row_overlap = axis_overlaps(map.height, height);
    let col_overlap = axis_overlaps(map.width, width);
    let mut weights = vec![0.0f32; height * width];
    for (oy, row_bins) in row_overlap.iter().enumerate() {
        for (ox, col_bins) in col_overlap.iter().enumerate() {
            let mut acc = 0.0f64;
            let mut area = 0.0f64;
            for &(iy, wy) in row_bins {
                for &(ix, wx) in col_bins {
                    acc += map.at(iy, ix) as f64 * wy * wx;
                    area += wy * wx;
                }
            }
            weights[oy * width + ox] = ((acc / area) as f32).min(map.w_max);
        }
    }
    Ok(UVImportanceMap {
        height,
        width,
        w_max: map.w_max,
        weights,
    })
}

/// For each target index, the source indices it overlaps and the overlap
/// length, for an axis resampled from `src` to `dst` cells.
fn axis_overlaps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut bins = Vec::new();
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    bins.push((i, overlap));
                }
            }
            bins
        })
        .collect()
}
