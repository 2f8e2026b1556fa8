//! Error type shared by all modules.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Failure modes of tensor ops, model assembly, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes; carries both offending shapes.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Index range outside a tensor's extent.
    Bounds {
        op: &'static str,
        from: usize,
        to: usize,
        extent: usize,
    },
    /// Non-finite input, zero-norm row, or similar numeric violation.
    Numeric(String),
    /// API contract broken (non-scalar loss, step out of range, ...).
    Contract(String),
    /// Invalid encoder or training configuration.
    Config(String),
    /// Prompt schedule violates a construction invariant.
    Schedule(String),
    /// Token id outside the vocabulary.
    Vocab { id: usize, vocab_size: usize },
    /// Dataset inconsistency (label range, insufficient shots, geometry).
    Data(String),
    /// Loss became non-finite during training; carries the failing step.
    TrainingDiverged { step: usize },
    /// An evaluator passed to the gradient checker was not deterministic.
    NonDeterministic(String),
    /// A failure inside an encoder layer, tagged with the 1-based layer
    /// number it occurred in.
    InLayer { layer: usize, source: Box<Error> },
}

impl Error {
    /// Wrap this error with the 1-based layer number it surfaced in.
    /// Already-wrapped errors keep their innermost layer tag.
    pub fn in_layer(self, layer: usize) -> Error {
        match self {
            Error::InLayer { .. } => self,
            other => Error::InLayer { layer, source: Box::new(other) },
        }
    }

    /// The underlying error, unwrapping any layer tag.
    pub fn root(&self) -> &Error {
        match self {
            Error::InLayer { source, .. } => source.root(),
            other => other,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Bounds { op, from, to, extent } => {
                write!(f, "{op}: range {from}..{to} out of bounds for extent {extent}")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Schedule(msg) => write!(f, "invalid schedule: {msg}"),
            Error::Vocab { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocabulary of size {vocab_size}")
            }
            Error::Data(msg) => write!(f, "dataset error: {msg}"),
            Error::TrainingDiverged { step } => {
                write!(f, "training aborted: non-finite loss at step {step}")
            }
            Error::NonDeterministic(msg) => {
                write!(f, "non-deterministic evaluator: {msg}")
            }
            Error::InLayer { layer, source } => write!(f, "layer {layer}: {source}"),
        }
    }
}

impl core::error::Error for Error {}
