//! Minimal dense tensors with a reverse-mode autodiff tape.
//!
//! Values are NHWC for images, row-major throughout. The tape is eager:
//! building an op computes its value, and [`Graph::backward`] walks the
//! recorded nodes in reverse. Generic over [`Real`] so the same code runs in
//! `f32` for training and `f64` for gradient checks.

mod adam;
mod conv;
mod error;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use error::{GraphError, OptimError, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
