//! Run configuration: one JSON file, flag overrides on top.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use avq_core::accel::{ArrayConfig, Precision};
use avq_core::pipeline::StageLatencies;
use avq_core::quant::CompensationMode;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// The built-in seeded decoder.
    Canonical { seed: u64, outlier_injection: bool },
    /// A model directory written by this tool.
    File { path: PathBuf },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Canonical {
            seed: 0,
            outlier_injection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSource,
    /// Calibration sample count for scales and activation grids.
    pub calibration_samples: usize,
    /// Subset of the calibration set accumulated into the layer Hessians.
    pub hessian_samples: usize,
    pub eval_samples: usize,
    /// Migration-strength exponent of the smoothing scales.
    pub alpha: f32,
    /// Percentage of channels exempted from smoothing per layer.
    pub k_percent: f64,
    /// Upper bound of the UV importance map.
    pub w_max: f32,
    /// Hessian damping as a fraction of the mean diagonal.
    pub lambda_frac: f64,
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Percentile clip of |activations| during grid calibration.
    pub clip_percentile: Option<f64>,
    pub compensation: CompensationMode,
    /// Texture resolution the UV map is built at.
    pub texture_size: usize,
    /// Vertex count of the generated UV fixture.
    pub uv_vertices: usize,
    /// Mask file (TAR1 u8); generated fixture when absent.
    pub mask_file: Option<PathBuf>,
    /// Vertex UV file (TAR1 f32, V x 2); generated fixture when absent.
    pub uv_file: Option<PathBuf>,
    pub array_rows: usize,
    pub array_cols: usize,
    pub int4_multiplier: u32,
    pub clock_hz: f64,
    pub pipeline: StageLatencies,
    pub pipeline_frames: usize,
    /// Master seed for calibration/evaluation data and fixtures.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            calibration_samples: 512,
            hessian_samples: 64,
            eval_samples: 8,
            alpha: 0.8,
            k_percent: 75.0,
            w_max: 1.0,
            lambda_frac: 0.01,
            weight_bits: 4,
            act_bits: 4,
            clip_percentile: Some(99.9),
            compensation: CompensationMode::InverseCholesky,
            texture_size: 128,
            uv_vertices: 18432,
            mask_file: None,
            uv_file: None,
            array_rows: 16,
            array_cols: 16,
            int4_multiplier: 4,
            clock_hz: 1e9,
            pipeline: StageLatencies {
                sensor_ms: 1.0,
                encode_ms: 3.0,
                transmit_ms: 5.0,
                decode_ms: 3.0,
                render_ms: 9.5,
            },
            pipeline_frames: 64,
            seed: 0,
            output_dir: PathBuf::from("avq-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::Io)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let err = |msg: String| Err(CliError::Config(msg));
        if self.calibration_samples == 0 {
            return err("calibration_samples must be >= 1".into());
        }
        if self.hessian_samples == 0 {
            return err("hessian_samples must be >= 1".into());
        }
        if self.eval_samples == 0 {
            return err("eval_samples must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return err(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=100.0).contains(&self.k_percent) {
            return err(format!("k_percent must lie in [0, 100], got {}", self.k_percent));
        }
        if !(self.w_max > 0.0) {
            return err(format!("w_max must be positive, got {}", self.w_max));
        }
        if self.lambda_frac < 0.0 {
            return err(format!("lambda_frac must be >= 0, got {}", self.lambda_frac));
        }
        if ![4u8, 8].contains(&self.weight_bits) {
            return err(format!("weight_bits must be 4 or 8, got {}", self.weight_bits));
        }
        if ![4u8, 8].contains(&self.act_bits) {
            return err(format!("act_bits must be 4 or 8, got {}", self.act_bits));
        }
        if let Some(p) = self.clip_percentile {
            if !(0.0..=100.0).contains(&p) {
                return err(format!("clip_percentile must lie in [0, 100], got {p}"));
            }
        }
        if self.texture_size == 0 || self.uv_vertices == 0 {
            return err("texture_size and uv_vertices must be >= 1".into());
        }
        if self.uv_file.is_none() && self.uv_vertices < self.texture_size * self.texture_size {
            return err(format!(
                "uv_vertices ({}) must cover the texture: >= texture_size^2 ({})",
                self.uv_vertices,
                self.texture_size * self.texture_size
            ));
        }
        if self.array_rows == 0 || self.array_cols == 0 || self.int4_multiplier == 0 {
            return err("array dimensions and int4_multiplier must be >= 1".into());
        }
        if !(self.clock_hz > 0.0) {
            return err(format!("clock_hz must be positive, got {}", self.clock_hz));
        }
        if self.pipeline_frames == 0 {
            return err("pipeline_frames must be >= 1".into());
        }
        for p in [&self.mask_file, &self.uv_file].into_iter().flatten() {
            if !p.exists() {
                return err(format!("referenced file does not exist: {p:?}"));
            }
        }
        if let ModelSource::File { path } = &self.model {
            if !path.exists() {
                return err(format!("model path does not exist: {path:?}"));
            }
        }
        Ok(())
    }

    pub fn array_config(&self, precision: Precision, combining: bool) -> ArrayConfig {
        ArrayConfig {
            rows: self.array_rows,
            cols: self.array_cols,
            precision,
            int4_multiplier: self.int4_multiplier,
            combining,
        }
    }
}
