//! Evaluation report, run manifest and schema validation.
//!
//! The PSNR reference peak is the max-abs of the float reference outputs
//! over the evaluation set of the run; it is recorded in the report header
//! so PSNR values are reproducible from the numbers alone.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub index: usize,
    pub mse_full: f64,
    pub psnr_full: f64,
    pub mse_rtn: f64,
    pub psnr_rtn: f64,
    pub mse_gptq_unweighted: f64,
    pub uvw_mse_full: f64,
    pub uvw_mse_unweighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub mean_mse_full: f64,
    pub mean_mse_rtn: f64,
    pub mean_psnr_full: f64,
    pub mean_psnr_rtn: f64,
    pub mean_uvw_mse_full: f64,
    pub mean_uvw_mse_unweighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeightError {
    pub layer: usize,
    pub mse_swept: f64,
    pub mse_rtn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub cycles: f64,
    pub macs: u64,
    pub skipped_macs: u64,
    pub utilization: f64,
    pub latency_ms: f64,
}

impl From<&avq_core::accel::SimReport> for SimSummary {
    fn from(r: &avq_core::accel::SimReport) -> Self {
        Self {
            cycles: r.total_cycles,
            macs: r.macs,
            skipped_macs: r.skipped_macs,
            utilization: r.utilization,
            latency_ms: r.latency_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorReport {
    pub int8_baseline: SimSummary,
    pub int8_combining: SimSummary,
    pub int4_baseline: SimSummary,
    pub int4_combining: SimSummary,
    pub speedup_combining: f64,
    pub int4_speedup_over_int8_combining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub steady_state_interval_ms: f64,
    pub fps: f64,
    pub single_frame_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_peak_reference: f64,
    pub views: Vec<ViewReport>,
    pub summary: SummaryReport,
    pub per_layer_weight_error: Vec<LayerWeightError>,
    pub simulator: SimulatorReport,
    pub pipeline: PipelineReport,
}

/// Everything needed to reproduce a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub calibration_seed: u64,
    pub evaluation_seed: u64,
    pub uv_seed: u64,
}

impl Manifest {
    pub fn for_config(cfg: &RunConfig) -> Self {
        Self {
            config: cfg.clone(),
            calibration_seed: calibration_seed(cfg.seed),
            evaluation_seed: evaluation_seed(cfg.seed),
            uv_seed: uv_seed(cfg.seed),
        }
    }
}

pub fn calibration_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1)
}

pub fn evaluation_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(2)
}

pub fn uv_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(3)
}

/// Validate the report against the schema shipped in the repository.
pub fn validate_report(report: &EvalReport) -> CliResult<()> {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA)?;
    let value = serde_json::to_value(report)?;
    let mut errors = Vec::new();
    validate_value(&value, &schema, &schema, "$", &mut errors);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Format(format!(
            "report does not satisfy its schema: {}",
            errors.join("; ")
        )))
    }
}

/// Small structural validator covering the subset of JSON Schema the report
/// schema uses: type, required, properties, items and local $ref.
pub fn validate_value(
    value: &Value,
    schema: &Value,
    root: &Value,
    path: &str,
    errors: &mut Vec<String>,
) {
    let schema = if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        match resolve_ref(root, r) {
            Some(s) => s,
            None => {
                errors.push(format!("{path}: unresolvable $ref {r}"));
                return;
            }
        }
    } else {
        schema
    };
    if let Some(ty) = schema.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => true,
        };
        if !ok {
            errors.push(format!("{path}: expected {ty}"));
            return;
        }
    }
    if let Some(required) = schema.get("required").and_then(Value::as_array) {
        for key in required.iter().filter_map(Value::as_str) {
            if value.get(key).is_none() {
                errors.push(format!("{path}: missing required field {key}"));
            }
        }
    }
    if let (Some(props), Some(obj)) = (
        schema.get("properties").and_then(Value::as_object),
        value.as_object(),
    ) {
        for (key, sub) in props {
            if let Some(v) = obj.get(key) {
                validate_value(v, sub, root, &format!("{path}.{key}"), errors);
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            validate_value(v, items, root, &format!("{path}[{i}]"), errors);
        }
    }
}

fn resolve_ref<'a>(root: &'a Value, reference: &str) -> Option<&'a Value> {
    let path = reference.strip_prefix("#/")?;
    let mut cur = root;
    for part in path.split('/') {
        cur = cur.get(part)?;
    }
    Some(cur)
}
