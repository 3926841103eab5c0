//! Dense real-valued tensors and a tape-based reverse-mode autodiff graph.
//!
//! ```
//! use empt_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
//! let y = tape.leaf(Tensor::vector(vec![3.0, 4.0]), true);
//! let xy = tape.mul(x, y).unwrap();
//! let loss = tape.sum(xy);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod functional;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use real::{gemm, DType, Real};
pub use tape::{Tape, Var};
pub use tensor::{rows_cols, Tensor};
