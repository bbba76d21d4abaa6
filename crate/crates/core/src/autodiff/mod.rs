//! Reverse-mode automatic differentiation over dense f64 arrays — just
//! enough machinery for the encoder-decoder and the copy layer, verified
//! against a central-difference oracle.

mod adam;
mod array;
mod checkpoint;
mod gradcheck;
mod graph;

pub use adam::Adam;
pub use array::Array;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, NodeId};

use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    ShapeMismatch { op: &'static str, a: Vec<usize>, b: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange { op: &'static str, index: usize, size: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    BadArray(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
