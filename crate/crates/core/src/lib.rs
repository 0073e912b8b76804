//! Layer-wise post-training compression of weight matrices.
//!
//! Given a layer's weights W and a sample of its inputs X, the solvers here
//! find sparse or quantized weights minimizing ||WX - What X||^2 by exact
//! greedy second-order updates: one weight (or block) at a time, with a
//! closed-form compensation of everything still free, made tractable by
//! rank-one elimination of the working inverse Hessian. A knapsack-style
//! allocator then assigns one compression level per layer under a global
//! cost budget, and a statistics-correction pass patches up layer output
//! moments after stitching.
//!
//! The numeric kernels are generic over the scalar type; the on-disk
//! contract (NPY files, JSON metadata) and the CLI work in f64, per the
//! aliases at the crate root.

pub mod allocator;
pub mod correction;
pub mod error;
pub mod hessian;
pub mod matrix;
pub mod npy;
pub mod oracle;
pub mod quant;
pub mod scalar;
pub mod sparse;

pub use error::{Error, Result};
pub use hessian::Damp;
pub use scalar::Scalar;

/// Working precision of the file formats and the CLI.
pub type Matrix64 = matrix::Matrix<f64>;
pub type LayerProblem64 = matrix::LayerProblem<f64>;
pub type InverseHessianState64 = hessian::InverseHessianState<f64>;
pub type QuantGrid64 = quant::QuantGrid<f64>;
pub type LossLedger64 = sparse::LossLedger<f64>;
