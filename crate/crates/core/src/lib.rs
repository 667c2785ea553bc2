//! Integer quantization toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`quant`]: affine and scale range mapping (quantize, dequantize, fake quantize).
//! - [`calib`]: activation histograms and the max / entropy / percentile calibrators.
//! - [`data`]: labelled datasets and their binary format.
//! - [`kernels`]: integer matrix multiplication with factored scales, the affine
//!   three-term decomposition, and im2col convolution.
//! - [`graph`]: chain models, fp32 and int8 execution, batch-norm folding, and the
//!   on-disk model format.
//! - [`qat`]: fake quantization with the straight-through estimator, learned ranges,
//!   and SGD fine-tuning.
//! - [`toy`]: seeded synthetic datasets and small models.
//! - [`workflow`]: datasets, evaluation, PTQ sweeps, sensitivity analysis and
//!   partial quantization.

pub mod calib;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod qat;
pub mod quant;
pub mod tensor;
pub mod toy;
pub mod workflow;

pub use calib::{CalibrationCache, CalibrationMethod, Histogram};
pub use data::{Dataset, Labels};
pub use error::{Error, Result};
pub use graph::{Layer, LayerKind, Model, QuantConfig, WeightGranularity};
pub use workflow::{Metric, PtqReport, SensitivityReport};
pub use quant::{Granularity, QuantParams, QuantizedTensor, RangeSpec, Scheme};
pub use tensor::Tensor;

/// Toolkit version string written into run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
