//! Out-of-core solvers for dense unconstrained quadratic programs
//!
//! ```text
//! minimize f(x) = ½ xᵗPx − xᵗq + r,   P symmetric positive definite
//! ```
//!
//! The centerpiece is greedy block coordinate descent (GBCD): `P` is split
//! into row blocks stored contiguously on disk, the full gradient is kept up
//! to date incrementally, and every iteration updates the block with the
//! largest guaranteed decrease in `||x − x_opt||_P²`. Each iteration loads a
//! single block, so memory stays at `O(nd)` and per-iteration work at `O(nd)`.
//!
//! Alongside it live the classical baselines (block Kaczmarz, cyclic and
//! randomized BCD, steepest descent, conjugate gradient), convergence-rate
//! bound calculators for a given partition, and a benchmark harness.

pub mod bench;
pub mod blockstore;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod partition;
pub mod problem;
pub mod solvers;
pub mod trace;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SpdMatrix};
pub use partition::{HdcLimits, Partition};
pub use problem::{Oracle, UqpProblem};
