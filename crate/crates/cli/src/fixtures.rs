//! Generated stand-ins for real facial assets: elliptical eye/mouth region
//! masks and a vertex UV set whose hits concentrate inside those regions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avq_core::smoothing::RegionMask;
use avq_core::uvmap::UVVertexSet;

/// (center_y, center_x, radius_y, radius_x) in unit coordinates. Compact
/// regions keep the coarse-layer downsampled maps close to uniform, so the
/// importance weighting acts where layer inputs can actually resolve the
/// regions.
const ELLIPSES: [(f64, f64, f64, f64); 3] = [
    (0.35, 0.29, 0.07, 0.10), // left eye
    (0.35, 0.71, 0.07, 0.10), // right eye
    (0.71, 0.50, 0.09, 0.16), // mouth
];

fn inside_any(u: f64, v: f64) -> bool {
    ELLIPSES.iter().any(|&(cy, cx, ry, rx)| {
        let dy = (u - cy) / ry;
        let dx = (v - cx) / rx;
        dy * dy + dx * dx <= 1.0
    })
}

/// Union of the eye and mouth ellipses on an H x W grid.
pub fn facial_region_mask(height: usize, width: usize) -> RegionMask {
    let membership = (0..height * width)
        .map(|i| {
            let y = (i / width) as f64 + 0.5;
            let x = (i % width) as f64 + 0.5;
            inside_any(y / height as f64, x / width as f64)
        })
        .collect();
    RegionMask::new(height, width, membership).unwrap()
}

/// Vertex UV set for a `grid x grid` texture: one vertex per texel center
/// (full coverage, so no texel is treated as invisible) plus
/// `count - grid^2` vertices concentrated inside the facial regions, which
/// concentrates importance there without zeroing the rest of the map.
pub fn facial_uv_vertices(seed: u64, grid: usize, count: usize) -> UVVertexSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(count.max(grid * grid) * 2);
    for y in 0..grid {
        for x in 0..grid {
            coords.push((y as f32 + 0.5) / grid as f32);
            coords.push((x as f32 + 0.5) / grid as f32);
        }
    }
    let extra = count.saturating_sub(grid * grid);
    for _ in 0..extra {
        // Rejection-sample a point inside one of the ellipses.
        let (cy, cx, ry, rx) = ELLIPSES[rng.random_range(0..ELLIPSES.len())];
        loop {
            let dy = rng.random_range(-1.0..1.0f64);
            let dx = rng.random_range(-1.0..1.0f64);
            if dy * dy + dx * dx <= 1.0 {
                let u = (cy + dy * ry).clamp(0.0, 1.0);
                let v = (cx + dx * rx).clamp(0.0, 1.0);
                coords.push(u as f32);
                coords.push(v as f32);
                break;
            }
        }
    }
    UVVertexSet::new(coords).unwrap()
}
