//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations the model and the losses need are provided. There is
//! no general broadcasting; the single exception is adding a bias row to
//! every row of a matrix.

mod fd;
pub mod ops;
mod tape;
mod tensor;

pub use fd::{finite_difference_grad, max_relative_error};
pub use ops::{ImageGeom, LOG_EPS};
pub use tape::{Tape, Var};
pub use tensor::{argmax, argmin, Tensor};
