//! Randomly sketched predictive variance for kernel ridge regression.
//!
//! The exact predictive variance of KRR at a point `x`,
//! `V1(x) = sigma^2 / n^2 k(x)^T (K + lambda I)^{-2} k(x)`, needs an `O(n^3)`
//! factorization. Rewriting `(K + lambda I)^{-1}` with the binomial inverse
//! theorem and projecting the middle factor through an `m x n` random sketch `S`
//! gives `V2(x)`, which costs `O(n^2 m)` once and `O(nm)` per query.
//!
//! - [`kernels`]: kernel functions, the scaled kernel matrix and its eigensystem.
//! - [`sketch`]: seeded sub-Gaussian sketches and the sketch-condition diagnostics.
//! - [`exact_krr`]: exact KRR and `V1`.
//! - [`sketched_krr`]: sketched KRR, `V2`, `V3` and the gap diagnostics.
//! - [`active_learning`]: variance-weighted acquisition with incremental `S K`.
//! - [`experiments`]: generators, sweeps, benchmarks and CSV I/O.

pub mod active_learning;
pub mod error;
pub mod exact_krr;
pub mod experiments;
pub mod kernels;
pub mod sketch;
pub mod sketched_krr;

pub use error::{Error, Result};
pub use exact_krr::{estimate_sigma, fit, woodbury_rhs, Estimator, ExactFit, ExactKrr, VarianceEstimate};
pub use kernels::{
    build_kernel_matrix, cross_kernel, decompose, effective_dimension, evaluate_kernel, kernel_vector, Dataset,
    KernelMatrix, KernelSpec, SpectralDecomposition,
};
pub use sketch::{check_assumption, AssumptionReport, SketchDistribution, SketchMatrix};
pub use sketched_krr::{gap_diagnostics, sketched_fit, GapDiagnostics, SketchedFit};
