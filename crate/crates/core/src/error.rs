use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("schema error at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("point {index} of `{image}` at ({x}, {y}) lies outside {width}x{height}")]
    OutOfBoundsPoint { image: String, index: usize, x: f64, y: f64, width: usize, height: usize },

    #[error("kernel sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),

    #[error("could only place {placed} of the required {required} heads")]
    InfeasiblePacking { placed: usize, required: usize },

    #[error("shift must be non-negative, got {0}")]
    NegativeShift(i64),

    #[error("blend ratio must lie in [0, 1], got {0}")]
    InvalidBlend(f64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("upsampling {from_h}x{from_w} to {to_h}x{to_w} is not an integer factor")]
    NonIntegerFactor { from_h: usize, from_w: usize, to_h: usize, to_w: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("bad dimensions: {0}")]
    BadDims(String),

    #[error("crop {crop_h}x{crop_w} does not fit image {height}x{width}")]
    CropTooLarge { crop_h: usize, crop_w: usize, height: usize, width: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("training diverged: {0}")]
    DivergedTraining(String),

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake-case name of the variant, used in machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing_file",
            Error::Schema { .. } => "schema",
            Error::OutOfBoundsPoint { .. } => "out_of_bounds_point",
            Error::InvalidSigma(_) => "invalid_sigma",
            Error::InfeasiblePacking { .. } => "infeasible_packing",
            Error::NegativeShift(_) => "negative_shift",
            Error::InvalidBlend(_) => "invalid_blend",
            Error::Shape(_) => "shape",
            Error::NonIntegerFactor { .. } => "non_integer_factor",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::UnknownStrategy(_) => "unknown_strategy",
            Error::BadDims(_) => "bad_dims",
            Error::CropTooLarge { .. } => "crop_too_large",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::DivergedTraining(_) => "diverged_training",
            Error::EmptyEvalSet => "empty_eval_set",
            Error::ModelNotLoaded(_) => "model_not_loaded",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema { field: field.into(), message: message.into() }
    }
}
