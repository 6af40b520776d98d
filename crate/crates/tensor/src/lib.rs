//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: row-major storage, exact-shape elementwise
//! ops, matmul, 2-d convolution, global average pooling, softmax, and an SGD
//! optimizer with momentum. Gradients accumulate across `backward` calls until
//! cleared with [`Tensor::zero_grad`].

mod conv;
mod error;
mod gemm;
pub mod gradcheck;
mod ops;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Sgd, SgdConfig};
pub use tensor::Tensor;
