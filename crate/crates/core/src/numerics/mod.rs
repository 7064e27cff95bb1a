//! Dense matrix arithmetic, seeded random generation, and the small-scale
//! factorizations (Cholesky, one-sided Jacobi SVD) everything else is built
//! on. All values are f64; all operations are pure and deterministic.

pub mod cholesky;
pub mod matrix;
pub mod rng;
pub mod svd;

pub use cholesky::{cholesky_factor, cholesky_solve};
pub use matrix::{Matrix, GMAT_MAGIC};
pub use rng::{derive_seed, Rng};
pub use svd::{nuclear_norm, rank_truncate, svd, Svd};
