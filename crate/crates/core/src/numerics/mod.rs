//! Dense tensors, a reproducible RNG, and the linear-algebra kernel.

mod linalg;
mod pca;
mod rng;
mod tensor;

pub use linalg::{
    cholesky, covariance, default_ridge, inverse_spd, matmul, matmul_transpose_b, softmax_in_place,
    softmax_rows, token_variance, transpose,
};
pub use pca::Pca;
pub use rng::{derive_seed, Rng};
pub use tensor::Tensor;
