//! Loss, learning-rate schedule, optimizers and finite-difference gradient
//! checking.

mod gradcheck;
mod loss;
mod optimizer;
mod schedule;

pub use gradcheck::{
    analytic_gradients, check_against, gradient_check, GradCheckOptions, GradCheckReport,
};
pub use loss::cross_entropy_loss;
pub use optimizer::{OptimizerKind, OptimizerState, ParamStore};
pub use schedule::LrSchedule;
