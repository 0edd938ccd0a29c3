//! Post-training quantization and accelerator simulation for
//! transposed-convolution avatar decoders.
//!
//! The crate is organized around a small dense-tensor core:
//!
//! - [`tensor`] / [`conv`] — reference decoder math: transposed convolution
//!   (scatter and im2col/GEMM paths), LeakyReLU and model forward passes.
//! - [`smoothing`] — per-input-channel activation smoothing with
//!   variance-ranked channel exemption, fused offline into adjacent layers.
//! - [`uvmap`] / [`quant`] — UV hit-count importance maps, importance-weighted
//!   Hessians, and greedy column-compensated integer weight quantization.
//! - [`accel`] — cycle-level model of a weight-stationary systolic array with
//!   checkerboard tile compaction of im2col activations.
//! - [`pipeline`] — discrete-event schedule of the five-stage telepresence
//!   loop and its steady-state frame rate.
//! - [`tar1`] — the little-endian tensor container used for all file I/O.

pub mod accel;
pub mod conv;
pub mod error;
pub mod linalg;
pub mod pipeline;
pub mod quant;
pub mod smoothing;
pub mod tar1;
pub mod tensor;
pub mod uvmap;

pub use error::{Error, Result};
