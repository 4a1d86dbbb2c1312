//! NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod params;
pub mod pipeline;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
