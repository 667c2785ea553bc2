use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty range: alpha == beta == {0}")]
    EmptyRange(f64),
    #[error("invalid range [{beta}, {alpha}]")]
    InvalidRange { beta: f64, alpha: f64 },
    #[error("non-positive range: alpha = {0}")]
    NonPositiveRange(f64),
    #[error("bit width {0} outside supported range 2..=8")]
    BitWidth(u32),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation")]
    NonFinite,
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("degenerate tensor{}", name_suffix(.0))]
    DegenerateTensor(Option<String>),
    #[error("percentile fraction {0} outside (0, 1]")]
    Fraction(f64),
    #[error("inner dimension too large: {0} > 32768")]
    InnerDimensionTooLarge(usize),
    #[error("activation scales must be per-tensor for integer matmul")]
    Granularity,
    #[error("per-axis affine weights are not supported by the quantized execution path")]
    AffinePerAxis,
    #[error("missing calibration for tensor `{0}`")]
    MissingCalibration(String),
    #[error("missing weight tensor `{0}`")]
    MissingTensor(String),
    #[error("batch norm `{0}` does not follow a linear or conv2d layer")]
    UnfoldableBatchNorm(String),
    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no calibration methods given")]
    EmptyMethodList,
    #[error("target accuracy {target} unreachable; trajectory {trajectory:?}")]
    Unreachable {
        target: f64,
        trajectory: Vec<(usize, f64)>,
    },
    #[error("calibration of `{tensor}` failed: {source}")]
    Calibration {
        tensor: String,
        #[source]
        source: Box<Error>,
    },
}

fn name_suffix(name: &Option<String>) -> String {
    match name {
        Some(n) => format!(" `{n}`"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
