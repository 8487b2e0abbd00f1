//! Dense linear algebra, reverse-mode gradients, Adam and finite-difference checks.

mod adam;
mod dense;
mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use dense::Dense;
pub use gradcheck::{grad_check, numeric_gradient, relative_error, GroupCheck, FINE_STEP_RATIO, RELATIVE_ERROR_FLOOR};
pub use matrix::{relu, sigmoid, sigmoid_scalar, Matrix};
pub use param::{ParamGroup, Parameterized};
pub use tape::{bce_scalar, Gradients, Tape, Var, PROB_CLAMP};
