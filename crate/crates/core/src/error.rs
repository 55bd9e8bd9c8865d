//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; [`Error::code`] gives a stable
//! module-qualified identifier used by the CLI for diagnostics and exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("invalid shape: {context}")]
    InvalidShape { context: String },

    #[error("non-finite value at index {index}: {context}")]
    NonFinite { index: usize, context: String },

    #[error("value {value} outside declared range [{lo}, {hi}]")]
    OutOfRange { value: i32, lo: i32, hi: i32 },

    #[error("int32 accumulator overflow at output index {index} (value {value})")]
    AccOverflow { index: usize, value: i64 },

    #[error("blob error in {path}: {context}")]
    Blob { path: String, context: String },

    #[error("manifest error: {context}")]
    Manifest { context: String },

    #[error("missing tensor blob {blob} referenced by {name}")]
    MissingBlob { name: String, blob: String },

    #[error("node {node} references undefined id {target}")]
    DanglingRef { node: String, target: String },

    #[error("graph validation failed: {context}")]
    GraphInvalid { context: String },

    #[error("batch-norm node {node} cannot be folded: {context}")]
    UnfoldableBn { node: String, context: String },

    #[error("degenerate number set (range is zero) for {context}")]
    DegenerateRange { context: String },

    #[error("bit-width {bits} outside supported range [{lo}, {hi}]")]
    BitsOutOfRange { bits: u8, lo: u8, hi: u8 },

    #[error("zero-point must be 0 for the symmetric integer path, found {zero_point} on {context}")]
    ZeroPointNotZero { zero_point: i32, context: String },

    #[error("quantized graph is inconsistent: {context}")]
    QuantizedGraphInvalid { context: String },

    #[error("fake-quant exactness window exceeded on {node}: worst-case accumulator {bound} >= 2^24")]
    FakeQuantWindow { node: String, bound: i64 },

    #[error("evaluation dataset is empty")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} output classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable module-qualified code, e.g. `tensor/shape-mismatch`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "tensor/shape-mismatch",
            Error::InvalidShape { .. } => "tensor/invalid-shape",
            Error::NonFinite { .. } => "tensor/non-finite",
            Error::OutOfRange { .. } => "tensor/out-of-range",
            Error::AccOverflow { .. } => "tensor/acc-overflow",
            Error::Blob { .. } => "tensor/blob",
            Error::Manifest { .. } => "graph/manifest",
            Error::MissingBlob { .. } => "graph/missing-blob",
            Error::DanglingRef { .. } => "graph/dangling-ref",
            Error::GraphInvalid { .. } => "graph/invalid",
            Error::UnfoldableBn { .. } => "bnfold/unfoldable",
            Error::DegenerateRange { .. } => "quantizer/degenerate-range",
            Error::BitsOutOfRange { .. } => "quantizer/bits-out-of-range",
            Error::ZeroPointNotZero { .. } => "engine/zero-point-not-zero",
            Error::QuantizedGraphInvalid { .. } => "engine/quantized-graph-invalid",
            Error::FakeQuantWindow { .. } => "engine/fake-quant-window",
            Error::EmptyDataset => "metrics/empty-dataset",
            Error::LabelOutOfRange { .. } => "metrics/label-out-of-range",
            Error::Io { .. } => "io/failure",
            Error::Json(_) => "io/json",
        }
    }

    /// True for errors caused by bad user input (missing files, malformed
    /// manifests) rather than internal failures. The CLI maps these to exit
    /// code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Manifest { .. }
                | Error::MissingBlob { .. }
                | Error::DanglingRef { .. }
                | Error::GraphInvalid { .. }
                | Error::Blob { .. }
                | Error::BitsOutOfRange { .. }
                | Error::EmptyDataset
                | Error::LabelOutOfRange { .. }
                | Error::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
