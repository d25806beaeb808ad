//! Reverse-mode differentiation, parameters, Adam, and the finite-difference oracle.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{finite_diff_check, relative_error, GradCheck};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{AggregateMode, ParamGrads, ReduceAxis, Reduction, Tape, Var};
