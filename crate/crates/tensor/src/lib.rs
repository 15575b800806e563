//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! The op set is what a small convolutional embedder plus a vision-transformer
//! stack needs: matmul, same-padded 3×3 convolution, max and adaptive average
//! pooling, batch and layer normalization, relu/leaky-relu/gelu, softmax,
//! multi-head self-attention, row normalization, segmented top-k sums and
//! cross-entropy. [`Adam`] updates parameters and [`grad_check`] verifies the
//! adjoints against central differences.
//!
//! ```
//! use ldca_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
//! ```

mod adam;
mod conv;
mod error;
mod gemm;
mod gradcheck;
pub mod nn;
mod pool;
pub mod suite;
mod tape;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use pool::adaptive_bounds;
pub use tape::{top_k_indices, Activation, BatchStats, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
