//! Independent reference implementations and baselines, all in `f64`.
//!
//! These are deliberately simple: explicit Hessians assembled column by
//! column, dense pivoted solves, normal equations for the `K = 0` case, a
//! Fisher-approximate Newton step, plain SGD, and the two-parameter
//! quadratic used to contrast first- and second-order convergence.

mod fisher;
mod hessian;
pub mod linalg;
mod lsq;
mod sgd;
pub mod suite;
mod toy;

pub use fisher::{fisher_matrix, fisher_matvec, fisher_newton_step, fisher_optimize, per_sample_grads, FisherStep};
pub use hessian::{brute_hessian, direct_newton, fd_hessian, DenseSystem, DEFAULT_CAP};
pub use lsq::closed_form_k0;
pub use sgd::{sgd_baseline, write_sgd_csv, SgdOutcome, SgdRow};
pub use toy::{toy_quadratic, ToyQuadratic, ToyReport};
