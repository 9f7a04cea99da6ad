//! Neural tangent kernels and generalization bounds for wide, deep ReLU networks.
//!
//! The crate covers the full pipeline used to study over-parameterized
//! fully connected ReLU networks near their Gaussian initialization:
//!
//! * [`dataset`]: unit-sphere binary datasets (MNIST IDX loading, label
//!   flipping, synthetic kernel-realizable data).
//! * [`network`]: the width-`m`, depth-`L` network `f(x) = √m·W_L σ(…σ(W_1 x))`
//!   with He-style initialization and rank-one factored gradients.
//! * [`ntk`]: the infinite-width kernel recursion, finite-width Gram
//!   matrices and a jittered Cholesky solver.
//! * [`ntrf`]: the random-feature linearization around initialization,
//!   its projected-SGD fit and the minimum-distance interpolant.
//! * [`sgd`]: one-pass online SGD with uniformly drawn output iterate.
//! * [`bounds`]: the two generalization-bound expressions and their sweeps.
//! * [`verify`]: empirical checks of the near-initialization structure
//!   (linearization, almost-convexity, norms, activation stability).

pub mod bounds;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod network;
pub mod ntk;
pub mod ntrf;
pub mod output;
pub mod seed;
pub mod sgd;
pub mod verify;

pub use error::{Error, Result};
