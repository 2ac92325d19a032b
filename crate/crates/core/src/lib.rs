#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod compare;
pub mod config;
pub mod data;
pub mod distributed;
pub mod error;
pub mod model;
pub mod quant;
pub mod sparse;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
