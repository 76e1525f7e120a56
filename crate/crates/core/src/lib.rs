//! Bounded-ratio policy improvement on exactly solvable tabular MDPs.
//!
//! [`mdp`] evaluates finite MDPs by dense linear solves, [`analytic`] builds the
//! closed-form optimal bounded-ratio policies, [`oracle`] holds independent
//! brute-force solvers used to certify them, and [`theory`] turns the
//! improvement guarantees into executable checks.

pub mod analytic;
pub mod error;
pub mod mdp;
mod mdp_json;
pub mod oracle;
pub mod random;
pub mod seed;
pub mod theory;

pub use analytic::{BoundKind, BrrlSolution, RatioBounds, SignSolution, SignStatus};
pub use error::{BrrlError, Result};
pub use mdp::{ExactEvaluation, TabularMdp, TabularPolicy};
pub use oracle::OracleResult;
