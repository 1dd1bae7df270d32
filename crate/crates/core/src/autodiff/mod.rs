//! Reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{CustomBackward, Gradients, Tape, Var, PROB_CLAMP};
