//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid geometry: K - P - 1 = {interior} is negative (K={kernel}, P={padding})")]
    NegativeInteriorPad {
        kernel: usize,
        padding: usize,
        interior: isize,
    },

    #[error("invalid layer parameter: {0}")]
    InvalidLayer(String),

    #[error("kernel size {kernel} exceeds map size {map}")]
    KernelTooLarge { kernel: usize, map: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("region mask has no member pixels")]
    EmptyMask,

    #[error("sample set is empty")]
    EmptySamples,

    #[error("scale for layer {layer} channel {channel} is not a positive finite real: {value}")]
    NonPositiveScale {
        layer: usize,
        channel: usize,
        value: f32,
    },

    #[error("layer {layer} cannot be smoothed: preceding layer has no positively homogeneous activation")]
    MissingActivation { layer: usize },

    #[error("UV coordinate ({u}, {v}) outside [0, 1]")]
    UvCoordOutOfRange { u: f32, v: f32 },

    #[error("weighted Hessian is singular: all-zero inputs with zero damping")]
    SingularHessian,

    #[error("Cholesky factorization failed at pivot {pivot}: matrix not positive definite")]
    CholeskyFailed { pivot: usize },

    #[error("activation grid for layer {layer} is not calibrated")]
    UncalibratedActivationGrid { layer: usize },

    #[error("compaction infeasible: dense tile at band {band}, column group {group}")]
    CompactionInfeasible { band: usize, group: usize },

    #[error("lane map inconsistent with weight layout: original row {row} out of range {rows}")]
    LaneMapMismatch { row: usize, rows: usize },

    #[error("schedule horizon {frames} too short, need at least {min} frames")]
    HorizonTooShort { frames: usize, min: usize },

    #[error("tensor archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
