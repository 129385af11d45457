//! Dense numerical core: matrices, stable scalar primitives, sparse products,
//! a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod matrix;
mod rng;
mod sparse;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{kernel_threads, log_sigmoid, logsumexp, logsumexp_rows, matmul, sigmoid, softmax, Matrix};
pub(crate) use matrix::gemm;
pub use rng::{RngState, RngStream};
pub use sparse::CsrMatrix;
pub use tape::{clamped_log_sigmoid, Gradients, Tape, Var, PROB_CLAMP};
