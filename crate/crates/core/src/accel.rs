//! Cycle-level model of the weight-stationary systolic array with
//! input-combining compaction of im2col activations.
//!
//! The im2col matrix is tiled 4x4. Zero-insertion makes every tile of a
//! transposed-convolution layer either fully zero or checkerboard-sparse; a
//! checkerboard tile's four rows pair into two packed rows with disjoint
//! per-column support, and fully zero tiles are discarded. Packing happens
//! per 4-column strip, strips padded to a common height so the packed
//! matrix is rectangular; a lane map records which original row supplied
//! each entry, which is what the dual-weight processing element selects on.
//!
//! Cycle accounting per weight block of the R x C array: R preload cycles,
//! N streamed columns, R + C - 1 skew/drain. An event-driven register-level
//! simulation of the same array pins the analytic formula exactly.

use serde::{Deserialize, Serialize};

use crate::conv::Im2colMatrix;
use crate::error::{Error, Result};

pub const LANE_NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileClass {
    AllZero,
    Checkerboard,
    Dense,
}

/// Classification of one 4x4 tile; `pairing` maps the tile's four rows into
/// two packed row-pairs for checkerboard tiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileDescriptor {
    pub band: usize,
    pub group: usize,
    pub class: TileClass,
    pub pairing: Option<[(u8, u8); 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Int8,
    Int4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub precision: Precision,
    /// Cycle-count divisor under int4 execution.
    pub int4_multiplier: u32,
    pub combining: bool,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 16,
            precision: Precision::Int8,
            int4_multiplier: 4,
            combining: false,
        }
    }
}

impl ArrayConfig {
    pub fn cycle_divisor(&self) -> f64 {
        match self.precision {
            Precision::Int8 => 1.0,
            Precision::Int4 => self.int4_multiplier as f64,
        }
    }
}

const PAIRINGS: [[(u8, u8); 2]; 3] = [
    [(0, 1), (2, 3)],
    [(0, 2), (1, 3)],
    [(0, 3), (1, 2)],
];

#[inline]
fn entry_nonzero(m: &Im2colMatrix, r: usize, c: usize) -> bool {
    r < m.rows && c < m.cols && m.nonzero_mask[r * m.cols + c]
}

/// Label every 4x4 tile of the (zero-padded) matrix. A pairing is valid when
/// no column sees both rows of a pair nonzero; a zero entry may stand in for
/// a nonzero one, so sparser-than-checkerboard tiles still pair.
pub fn classify_tiles(m: &Im2colMatrix) -> Vec<TileDescriptor> {
    let bands = m.rows.div_ceil(4);
    let groups = m.cols.div_ceil(4);
    let mut tiles = Vec::with_capacity(bands * groups);
    for band in 0..bands {
        for group in 0..groups {
            let mut nz = [[false; 4]; 4];
            let mut any = false;
            for (dr, row) in nz.iter_mut().enumerate() {
                for (dc, flag) in row.iter_mut().enumerate() {
                    let v = entry_nonzero(m, band * 4 + dr, group * 4 + dc);
                    *flag = v;
                    any |= v;
                }
            }
            if !any {
                tiles.push(TileDescriptor {
                    band,
                    group,
                    class: TileClass::AllZero,
                    pairing: None,
                });
                continue;
            }
            let pairing = PAIRINGS.iter().find(|p| {
                p.iter().all(|&(a, b)| {
                    (0..4).all(|c| !(nz[a as usize][c] && nz[b as usize][c]))
                })
            });
            match pairing {
                Some(p) => tiles.push(TileDescriptor {
                    band,
                    group,
                    class: TileClass::Checkerboard,
                    pairing: Some(*p),
                }),
                None => tiles.push(TileDescriptor {
                    band,
                    group,
                    class: TileClass::Dense,
                    pairing: None,
                }),
            }
        }
    }
    tiles
}

/// Rectangular packed activation. `values`/`lanes` are `packed_rows x cols`;
/// `lanes` holds the original row index feeding each entry or [`LANE_NONE`]
/// for padding. `pair_rows` records, per (packed row, column group), the
/// original row pair the dual-weight lane would preload.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactedActivation {
    pub original_rows: usize,
    pub cols: usize,
    pub packed_rows: usize,
    pub values: Vec<f32>,
    pub lanes: Vec<u32>,
    pub pair_rows: Vec<(u32, u32)>,
    /// Packed rows actually occupied in each 4-column strip.
    pub strip_heights: Vec<usize>,
}

impl CompactedActivation {
    #[inline]
    pub fn value(&self, pk: usize, col: usize) -> f32 {
        self.values[pk * self.cols + col]
    }

    #[inline]
    pub fn lane(&self, pk: usize, col: usize) -> u32 {
        self.lanes[pk * self.cols + col]
    }

    /// Reconstruct the original matrix exactly.
    pub fn expand(&self) -> Im2colMatrix {
        let mut data = vec![0.0f32; self.original_rows * self.cols];
        for pk in 0..self.packed_rows {
            for col in 0..self.cols {
                let lane = self.lane(pk, col);
                if lane != LANE_NONE && (lane as usize) < self.original_rows {
                    data[lane as usize * self.cols + col] = self.value(pk, col);
                }
            }
        }
        let nonzero_mask = data.iter().map(|v| *v != 0.0).collect();
        Im2colMatrix {
            rows: self.original_rows,
            cols: self.cols,
            data,
            nonzero_mask,
        }
    }
}

/// Discard fully zero tiles and stack the remaining checkerboard tiles per
/// 4-column strip, two packed rows per retained tile, preserving the
/// original top-to-bottom band order. Strips are padded to the tallest
/// strip so the packed matrix stays rectangular. Fails on any dense tile;
/// the caller falls back to the uncompacted path.
pub fn compact(m: &Im2colMatrix, tiles: &[TileDescriptor]) -> Result<CompactedActivation> {
    let groups = m.cols.div_ceil(4);
    let bands = m.rows.div_ceil(4);
    for t in tiles {
        if t.class == TileClass::Dense {
            return Err(Error::CompactionInfeasible {
                band: t.band,
                group: t.group,
            });
        }
    }
    let tile_at = |band: usize, group: usize| -> &TileDescriptor { &tiles[band * groups + group] };
    let mut retained: Vec<Vec<&TileDescriptor>> = vec![Vec::new(); groups];
    for g in 0..groups {
        for b in 0..bands {
            let t = tile_at(b, g);
            if t.class == TileClass::Checkerboard {
                retained[g].push(t);
            }
        }
    }
    let strip_heights: Vec<usize> = retained.iter().map(|r| 2 * r.len()).collect();
    let packed_rows = strip_heights.iter().copied().max().unwrap_or(0);
    let mut values = vec![0.0f32; packed_rows * m.cols];
    let mut lanes = vec![LANE_NONE; packed_rows * m.cols];
    let mut pair_rows = vec![(LANE_NONE, LANE_NONE); packed_rows * groups];
    for (g, tiles_in_strip) in retained.iter().enumerate() {
        let col_lo = g * 4;
        let col_hi = (col_lo + 4).min(m.cols);
        for (ti, t) in tiles_in_strip.iter().enumerate() {
            let pairing = t.pairing.expect("checkerboard tile carries a pairing");
            for (pi, &(a, b)) in pairing.iter().enumerate() {
                let pk = ti * 2 + pi;
                let row_a = t.band * 4 + a as usize;
                let row_b = t.band * 4 + b as usize;
                pair_rows[pk * groups + g] = (row_a as u32, row_b as u32);
                for col in col_lo..col_hi {
                    let va = if row_a < m.rows { m.at(row_a, col) } else { 0.0 };
                    let vb = if row_b < m.rows { m.at(row_b, col) } else { 0.0 };
                    // Disjoint support; prefer lane A when both are zero.
                    let (val, lane) = if va != 0.0 { (va, row_a) } else if vb != 0.0 { (vb, row_b) } else { (0.0, row_a) };
                    values[pk * m.cols + col] = val;
                    lanes[pk * m.cols + col] = lane as u32;
                }
            }
        }
    }
    Ok(CompactedActivation {
        original_rows: m.rows,
        cols: m.cols,
        packed_rows,
        values,
        lanes,
        pair_rows,
        strip_heights,
    })
}

fn to_int(v: f32) -> i64 {
    v.round() as i64
}

/// Integer GEMM over the dense matrix: `y[co][col] = sum_r w[r][co] * x[r][col]`.
pub fn gemm_int_dense(w_q: &[i32], out_channels: usize, m: &Im2colMatrix) -> Result<Vec<i64>> {
    if w_q.len() != m.rows * out_channels {
        return Err(Error::ShapeMismatch {
            context: "gemm_int_dense",
            expected: format!("{} weights", m.rows * out_channels),
            got: format!("{}", w_q.len()),
        });
    }
    let mut y = vec![0i64; out_channels * m.cols];
    for r in 0..m.rows {
        let w_row = &w_q[r * out_channels..(r + 1) * out_channels];
        let x_row = &m.data[r * m.cols..(r + 1) * m.cols];
        for (co, &w) in w_row.iter().enumerate() {
            if w == 0 {
                continue;
            }
            let out = &mut y[co * m.cols..(co + 1) * m.cols];
            for (o, x) in out.iter_mut().zip(x_row.iter()) {
                *o += w as i64 * to_int(*x);
            }
        }
    }
    Ok(y)
}

/// Integer GEMM over the packed matrix via the lane map. Bit-identical to
/// [`gemm_int_dense`] on the expanded matrix: compaction is lossless.
pub fn gemm_int_compacted(
    w_q: &[i32],
    out_channels: usize,
    c: &CompactedActivation,
) -> Result<Vec<i64>> {
    if w_q.len() != c.original_rows * out_channels {
        return Err(Error::ShapeMismatch {
            context: "gemm_int_compacted",
            expected: format!("{} weights", c.original_rows * out_channels),
            got: format!("{}", w_q.len()),
        });
    }
    let mut y = vec![0i64; out_channels * c.cols];
    for pk in 0..c.packed_rows {
        for col in 0..c.cols {
            let lane = c.lane(pk, col);
            if lane == LANE_NONE {
                continue;
            }
            let lane = lane as usize;
            if lane >= c.original_rows {
                return Err(Error::LaneMapMismatch {
                    row: lane,
                    rows: c.original_rows,
                });
            }
            let v = to_int(c.value(pk, col));
            if v == 0 {
                continue;
            }
            for co in 0..out_channels {
                y[co * c.cols + col] += w_q[lane * out_channels + co] as i64 * v;
            }
        }
    }
    Ok(y)
}

/// Activation operand for a GEMM simulation.
pub enum ActivationInput<'a> {
    Dense(&'a Im2colMatrix),
    Compacted(&'a CompactedActivation),
}

impl ActivationInput<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        match self {
            ActivationInput::Dense(m) => (m.rows, m.rows, m.cols),
            ActivationInput::Compacted(c) => (c.original_rows, c.packed_rows, c.cols),
        }
    }
}

/// Cycle and MAC accounting of one GEMM on the array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemmReport {
    pub d: usize,
    pub d_eff: usize,
    pub n: usize,
    pub out_channels: usize,
    /// Cycle count before the precision divisor.
    pub int8_cycles: u64,
    /// Reported cycles after the int4 throughput divisor.
    pub cycles: f64,
    pub macs: u64,
    pub skipped_macs: u64,
    pub utilization: f64,
    pub combining: bool,
}

/// The analytic weight-stationary cycle count:
/// `ceil(d_eff/R) * ceil(C_out/C)` blocks, each `R + N + (R + C - 1)` cycles.
pub fn analytic_cycles(d_eff: usize, n: usize, out_channels: usize, rows: usize, cols: usize) -> u64 {
    if d_eff == 0 || n == 0 || out_channels == 0 {
        return 0;
    }
    let blocks = d_eff.div_ceil(rows) as u64 * out_channels.div_ceil(cols) as u64;
    blocks * (rows + n + rows + cols - 1) as u64
}

/// Simulate one layer GEMM: `d x out_channels` stationary weights against
/// the streamed activation, combining mode implied by the operand.
pub fn simulate_gemm(
    d: usize,
    out_channels: usize,
    act: &ActivationInput,
    cfg: &ArrayConfig,
) -> Result<GemmReport> {
    let (act_d, d_eff, n) = act.dims();
    if act_d != d {
        return Err(Error::LaneMapMismatch { row: act_d, rows: d });
    }
    let combining = matches!(act, ActivationInput::Compacted(_));
    let int8_cycles = analytic_cycles(d_eff, n, out_channels, cfg.rows, cfg.cols);
    let macs = (d_eff * n * out_channels) as u64;
    let skipped_macs = if combining {
        ((d - d_eff) * n * out_channels) as u64
    } else {
        0
    };
    let peak = int8_cycles.saturating_mul((cfg.rows * cfg.cols) as u64);
    let utilization = if peak == 0 { 0.0 } else { macs as f64 / peak as f64 };
    Ok(GemmReport {
        d,
        d_eff,
        n,
        out_channels,
        int8_cycles,
        cycles: int8_cycles as f64 / cfg.cycle_divisor(),
        macs,
        skipped_macs,
        utilization,
        combining,
    })
}

/// Event-driven register-level simulation of the same array. Activations
/// enter the left edge staggered one cycle per row, partial sums accumulate
/// downward, and finished sums drain rightward along the bottom to exit at
/// the last physical column. Returns the cycle count and the computed
/// integer GEMM result; both must match the analytic formula and the direct
/// GEMM exactly.
pub fn event_simulate_gemm(
    w_q: &[i32],
    out_channels: usize,
    act: &ActivationInput,
    cfg: &ArrayConfig,
) -> Result<(u64, Vec<i64>)> {
    let (d, d_eff, n) = act.dims();
    if w_q.len() != d * out_channels {
        return Err(Error::ShapeMismatch {
            context: "event_simulate_gemm",
            expected: format!("{} weights", d * out_channels),
            got: format!("{}", w_q.len()),
        });
    }
    // Stream operand for packed row `i`, column `j`: (value, weight row).
    let operand = |i: usize, j: usize| -> (i64, usize) {
        match act {
            ActivationInput::Dense(m) => (to_int(m.at(i, j)), i),
            ActivationInput::Compacted(c) => {
                let lane = c.lane(i, j);
                if lane == LANE_NONE {
                    (0, 0)
                } else {
                    (to_int(c.value(i, j)), lane as usize)
                }
            }
        }
    };
    let (rows, cols) = (cfg.rows, cfg.cols);
    let mut y = vec![0i64; out_channels * n];
    let mut total_cycles = 0u64;
    if d_eff == 0 || n == 0 || out_channels == 0 {
        return Ok((0, y));
    }
    for block_r in 0..d_eff.div_ceil(rows) {
        for block_c in 0..out_channels.div_ceil(cols) {
            // Weight preload: one array row per cycle.
            total_cycles += rows as u64;
            let co_base = block_c * cols;
            let r_base = block_r * rows;
            // Pipeline registers.
            let mut a_val = vec![vec![0i64; cols]; rows];
            let mut a_lane = vec![vec![0usize; cols]; rows];
            let mut psum = vec![vec![0i64; cols]; rows];
            // (value, output column j, cycles until exit)
            let mut draining: Vec<(i64, usize, usize, usize)> = Vec::new();
            let mut collected = 0usize;
            let active_cols = cols.min(out_channels - co_base);
            let target = n * active_cols;
            let mut t = 0u64;
            while collected < target {
                // Advance the drain chain first: slots pushed in earlier
                // cycles move one column per cycle and latch out at zero.
                for slot in &mut draining {
                    slot.3 -= 1;
                }
                draining.retain(|&(v, j, co, left)| {
                    if left == 0 {
                        y[co * n + j] += v;
                        collected += 1;
                        false
                    } else {
                        true
                    }
                });
                // Shift activations right; inject at the left edge.
                for i in (0..rows).rev() {
                    for k in (1..cols).rev() {
                        a_val[i][k] = a_val[i][k - 1];
                        a_lane[i][k] = a_lane[i][k - 1];
                    }
                    let j = t as i64 - i as i64;
                    if j >= 0 && (j as usize) < n && r_base + i < d_eff {
                        let (v, lane) = operand(r_base + i, j as usize);
                        a_val[i][0] = v;
                        a_lane[i][0] = lane;
                    } else {
                        a_val[i][0] = 0;
                        a_lane[i][0] = 0;
                    }
                }
                // Partial sums move down one row, accumulating the local MAC.
                for k in 0..cols {
                    for i in (0..rows).rev() {
                        let upstream = if i == 0 { 0 } else { psum[i - 1][k] };
                        let w = if co_base + k < out_channels {
                            w_q[a_lane[i][k] * out_channels + co_base + k] as i64
                        } else {
                            0
                        };
                        psum[i][k] = upstream + w * a_val[i][k];
                    }
                }
                // Bottom-row completions enter the drain chain with one hop
                // per remaining column plus the exit latch.
                let j_done = t as i64 - (rows as i64 - 1);
                for k in 0..active_cols {
                    let j = j_done - k as i64;
                    if j >= 0 && (j as usize) < n {
                        draining.push((psum[rows - 1][k], j as usize, co_base + k, cols - k));
                    }
                }
                t += 1;
            }
            total_cycles += t;
        }
    }
    Ok((total_cycles, y))
}

/// Per-layer slice of a decoder simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSim {
    pub layer: usize,
    pub d: usize,
    pub d_eff: usize,
    pub n: usize,
    pub out_channels: usize,
    pub int8_cycles: u64,
    pub cycles: f64,
    pub macs: u64,
    pub skipped_macs: u64,
    pub utilization: f64,
    pub mac_reduction: f64,
    pub fallback_dense: bool,
}

/// Aggregate simulation report; `utilization` is useful MACs over the peak
/// MAC slots of the undivided cycle count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_cycles: f64,
    pub total_int8_cycles: u64,
    pub macs: u64,
    pub skipped_macs: u64,
    pub utilization: f64,
    pub clock_hz: f64,
    pub latency_ms: f64,
    pub combining: bool,
    pub per_layer: Vec<LayerSim>,
}

/// Simulate one layer's GEMM given its input activation, with whole-layer
/// fallback to the dense path when any tile is dense.
fn simulate_layer(
    layer: usize,
    spec: &crate::tensor::LayerSpec,
    input: &crate::tensor::Tensor3,
    out_channels: usize,
    cfg: &ArrayConfig,
) -> Result<LayerSim> {
    let x_col = match spec.kind {
        crate::tensor::LayerKind::ConvTranspose => {
            let inserted = crate::conv::zero_insert(input, spec)?;
            crate::conv::im2col(&inserted, spec.kernel)?
        }
        crate::tensor::LayerKind::Conv => {
            crate::conv::im2col_strided(input, spec.kernel, spec.stride, spec.padding)?
        }
    };
    let d = x_col.rows;
    let mut fallback_dense = false;
    let report = if cfg.combining {
        let tiles = classify_tiles(&x_col);
        match compact(&x_col, &tiles) {
            Ok(packed) => simulate_gemm(d, out_channels, &ActivationInput::Compacted(&packed), cfg)?,
            Err(Error::CompactionInfeasible { .. }) => {
                fallback_dense = true;
                simulate_gemm(d, out_channels, &ActivationInput::Dense(&x_col), cfg)?
            }
            Err(e) => return Err(e),
        }
    } else {
        simulate_gemm(d, out_channels, &ActivationInput::Dense(&x_col), cfg)?
    };
    let mac_reduction = if d == 0 {
        0.0
    } else {
        1.0 - report.d_eff as f64 / d as f64
    };
    Ok(LayerSim {
        layer,
        d,
        d_eff: report.d_eff,
        n: report.n,
        out_channels,
        int8_cycles: report.int8_cycles,
        cycles: report.cycles,
        macs: report.macs,
        skipped_macs: report.skipped_macs,
        utilization: report.utilization,
        mac_reduction,
        fallback_dense,
    })
}

fn aggregate(per_layer: Vec<LayerSim>, cfg: &ArrayConfig, clock_hz: f64) -> SimReport {
    let total_int8: u64 = per_layer.iter().map(|l| l.int8_cycles).sum();
    let total_cycles: f64 = per_layer.iter().map(|l| l.cycles).sum();
    let macs: u64 = per_layer.iter().map(|l| l.macs).sum();
    let skipped: u64 = per_layer.iter().map(|l| l.skipped_macs).sum();
    let peak = total_int8.saturating_mul((cfg.rows * cfg.cols) as u64);
    SimReport {
        total_cycles,
        total_int8_cycles: total_int8,
        macs,
        skipped_macs: skipped,
        utilization: if peak == 0 { 0.0 } else { macs as f64 / peak as f64 },
        clock_hz,
        latency_ms: total_cycles / clock_hz * 1e3,
        combining: cfg.combining,
        per_layer,
    }
}

/// Simulate every layer of a float model on the array, streaming the real
/// activations produced by a forward pass from `x`.
pub fn simulate_decoder(
    model: &crate::tensor::DecoderModel,
    x: &crate::tensor::Tensor3,
    cfg: &ArrayConfig,
    clock_hz: f64,
) -> Result<SimReport> {
    let mut inputs: Vec<crate::tensor::Tensor3> = Vec::with_capacity(model.layers.len());
    crate::conv::forward_collect(model, x, &mut |_, t| inputs.push(t.clone()))?;
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for (i, (layer, input)) in model.layers.iter().zip(&inputs).enumerate() {
        per_layer.push(simulate_layer(
            i,
            &layer.spec,
            input,
            layer.weights.out_channels,
            cfg,
        )?);
    }
    Ok(aggregate(per_layer, cfg, clock_hz))
}


/// Simulate a quantized model, streaming its fake-quant activations.
pub fn simulate_decoder_quantized(
    qmodel: &crate::quant::QuantizedModel,
    x: &crate::tensor::Tensor3,
    cfg: &ArrayConfig,
    clock_hz: f64,
) -> Result<SimReport> {
    let mut cur = x.clone();
    if let Some(t) = &qmodel.input_transform {
        let plane = cur.height * cur.width;
        for (c, s) in t.iter().enumerate() {
            for v in &mut cur.data[c * plane..(c + 1) * plane] {
                *v *= s;
            }
        }
    }
    let mut per_layer = Vec::with_capacity(qmodel.layers.len());
    for (i, layer) in qmodel.layers.iter().enumerate() {
        let grid = layer
            .act_grid
            .as_ref()
            .ok_or(Error::UncalibratedActivationGrid { layer: i })?;
        let xq = grid.fake_quant_tensor(&cur);
        per_layer.push(simulate_layer(
            i,
            &layer.spec,
            &xq,
            layer.weights.out_channels,
            cfg,
        )?);
        let w = layer.dequantized_weights()?;
        let mut y = match layer.spec.kind {
            crate::tensor::LayerKind::ConvTranspose => {
                crate::conv::conv_transpose_direct(&xq, &w, &layer.bias, &layer.spec)?
            }
            crate::tensor::LayerKind::Conv => {
                crate::conv::conv2d(&xq, &w, &layer.bias, &layer.spec)?
            }
        };
        if let Some(slope) = layer.spec.activation_slope {
            y = crate::conv::leaky_relu(&y, slope);
        }
        cur = y;
    }
    Ok(aggregate(per_layer, cfg, clock_hz))
}
