//! Desk-scale promptable image segmentation, CPU only.
//!
//! The crate implements the full pipeline: a dense-tensor engine with
//! reverse-mode autodiff, ReLU linear attention in reference and reordered
//! forms, a five-stage convolution/attention image encoder with feature
//! fusion, a SAM-style prompt encoder and three-mask decoder, two-phase
//! training (embedding distillation, then end-to-end prompt-supervised
//! training), the farthest-from-boundary click evaluation protocol, and
//! analytic MACs/parameter accounting.

pub mod attention;
pub mod backbone;
pub mod cost;
pub mod data;
pub mod eval;
pub mod model;
pub mod params;
pub mod rng;
pub mod samhead;
pub mod tensor;
pub mod train;

pub use rng::Rng;
pub use tensor::{Tape, Tensor, Value};

use std::fmt;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// configuration problems, numeric/runtime failures, and malformed files.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch in a tensor operation.
    Shape(String),
    /// NaN or Inf produced or consumed where finite values are required.
    NonFinite(String),
    /// Invalid argument or state (empty mask, degenerate box, zero divisor...).
    Invalid(String),
    /// Config file parse or validation failure, with 1-based line number
    /// where one applies (0 means no specific line).
    Config { line: usize, msg: String },
    /// Checkpoint file unreadable or structurally broken.
    CorruptCheckpoint(String),
    /// Checkpoint format version not supported.
    CheckpointVersion(u32),
    /// A checkpoint tensor does not match the shape the model expects.
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
            Error::Config { line: 0, msg } => write!(f, "config error: {msg}"),
            Error::Config { line, msg } => write!(f, "config error at line {line}: {msg}"),
            Error::CorruptCheckpoint(m) => write!(f, "corrupt checkpoint: {m}"),
            Error::CheckpointVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            Error::CheckpointShape {
                name,
                expected,
                found,
            } => write!(
                f,
                "checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}"
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
