//! A small reverse-mode automatic differentiation engine.
//!
//! Values are dense row-major matrices. A [`Graph`] records every operation as a
//! node; [`Graph::backward`] walks the nodes in reverse creation order, which is
//! a valid reverse topological order because parents always precede children.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod graph;
pub mod mlp;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, MlpOutput, MlpSpec, OutputHead};
pub use params::{BoundParams, ParameterSet};
pub use tensor::Tensor;
