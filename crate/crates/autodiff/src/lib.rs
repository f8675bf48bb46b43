//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! ```
//! use tco_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```
//!
//! Tapes are rebuilt for every evaluation (define-by-run). A [`Var`] borrows
//! its tape, so values cannot outlive or cross tapes.

mod error;
pub mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use error::{AdError, Result};
pub use ops::{concat, stack, ARCCOS_CLAMP};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};
