//! Minimal reverse-mode differentiation engine with the Adam optimizer.
//!
//! Only the primitives the encoder/decoder networks need are provided. All
//! arithmetic is `f64` and every reduction runs in a fixed order, so a tape
//! replayed from the same leaves reproduces its values bit for bit.

mod adam;
mod array;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, lr_at_epoch, AdamConfig};
pub use array::Array;
pub use gradcheck::{
    finite_diff_check, finite_diff_report, finite_diff_report_with, FiniteDiffOptions,
    FiniteDiffReport,
};
pub use params::{Param, ParameterStore};
pub use tape::{Activation, Gradients, Mode, Prim, Tape, Var, BATCHNORM_EPS};
