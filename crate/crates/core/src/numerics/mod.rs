//! Dense linear algebra, losses, RNG and the finite-difference checker.

mod gradcheck;
mod loss;
mod matrix;
mod rng;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use loss::softmax_xent;
pub use matrix::{dot, l2_normalize_rows, norm, Matrix};
pub use rng::{streams, Rng, RngState};
