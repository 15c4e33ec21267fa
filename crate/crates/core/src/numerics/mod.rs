//! Dense `f64` tensor math used by every other module.

mod gradcheck;
mod linalg;
mod ops;
mod tensor;

pub use gradcheck::{check_gradient, FD_STEP};
pub use linalg::{symmetric_eigen, SymmetricEigen};
pub use ops::{cosine_rows, instance_normalize, kl_divergence, softmax, IN_EPS, PROB_FLOOR};
pub use tensor::{dot, sq_dist, Tensor};
