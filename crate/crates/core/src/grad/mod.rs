//! Numeric substrate: taped reverse-mode differentiation, SGD and the
//! polynomial learning-rate schedule.

pub mod check;
pub mod optim;
pub mod tape;

pub use check::finite_diff_check;
pub use optim::{poly_lr, OptimizerState, SgdConfig};
pub use tape::{log_sum_exp, softmax_rows, CeOutput, Gradients, MseOutput, Tape, Var};
