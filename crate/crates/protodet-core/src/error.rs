use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: product of shape {shape:?} does not match {len} values")]
    ShapeData {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("tape already consumed by a backward pass; record a new tape")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("row {row} has nonpositive sum {sum}")]
    DegenerateRow { row: usize, sum: f64 },
    #[error("unknown category `{name}`; known names: {known}")]
    UnknownCategory { name: String, known: String },
    #[error("token `{0}` not present in the embedding table")]
    MissingToken(String),
    #[error("embedding parse error at line {line}: {reason}")]
    EmbeddingParse { line: usize, reason: String },
    #[error("zero-norm embedding for token `{0}`")]
    ZeroNorm(String),
    #[error("category `{0}` has no support entries")]
    NoSupport(String),
    #[error("prototype set has no refined prototypes")]
    Unrefined,
    #[error("foreground RoI {0} has no regression target")]
    MissingTarget(usize),
    #[error("insufficient instances for K={k}: {counts}")]
    InsufficientInstances { k: usize, counts: String },
    #[error("invalid box ({xmin}, {ymin}, {xmax}, {ymax})")]
    InvalidBox { xmin: f64, ymin: f64, xmax: f64, ymax: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: l_cls={l_cls} l_box={l_box} l_meta={l_meta}")]
    NonFiniteLoss {
        step: usize,
        l_cls: f64,
        l_box: f64,
        l_meta: f64,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
