#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bilevel;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod surrogate;
pub mod tensor;

pub use error::{Error, Result};
