//! Dense tensors and a reverse-mode tape.
//!
//! Values are plain row-major [`Tensor`]s. Differentiable computation is
//! expressed on a [`Graph`], which records each op so that
//! [`Graph::backward`] can replay it in reverse. [`gradcheck`] provides the
//! finite-difference oracle used to verify every backward rule.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, check_projected_gradients, finite_diff_grad, relative_error, GradCheckReport};
pub use graph::{Binary, Graph, Unary, Var};
pub use io::{read_tensor, write_tensor};
pub use scalar::{gemm, DType, Scalar};
pub use tensor::Tensor;
