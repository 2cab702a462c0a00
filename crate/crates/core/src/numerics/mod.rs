//! Dense tensors, tape-based reverse-mode differentiation, AdamW, and the
//! learning-rate schedule.

mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod opsuite;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use batch::{batch_gradients, BatchGrads, ExampleOutput};
pub use gradcheck::{finite_diff_check, FdOptions, FdReport};
pub use opsuite::{op_suite, OpCheck};
pub use optim::{adamw_step, adamw_step_filtered, AdamWConfig, OptimizerState};
pub use params::{ParamVars, Params};
pub use schedule::{lr_at_step, LrSchedule};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
