//! Quantized-depth auxiliary supervision for a flow-matching manipulation
//! policy, trained end to end on a synthetic tabletop world.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::type_complexity
)]

pub mod codec;
pub mod config;
pub mod cotrain;
pub mod error;
pub mod experts;
pub mod io;
pub mod mask;
pub mod numerics;
pub mod par;
pub mod synthworld;

pub use error::{Error, Result};
