//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! - [`Tensor`]: row-major value type, generic over [`Element`] (`f32`/`f64`).
//! - [`Graph`]: the operation tape. Ops record their operands and a backward
//!   rule; [`Graph::backward`] sweeps the tape once in reverse.
//! - [`gradcheck`]: central finite-difference oracle for any scalar function
//!   built on a graph.
//! - [`io`]: little-endian tensor blobs used by checkpoints.

pub mod element;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod suite;
pub mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use graph::{BatchStats, Binary, CustomOp, Graph, Reduction, Unary, Var};
pub use tensor::Tensor;
