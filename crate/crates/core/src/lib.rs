#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bases;
pub mod config;
pub mod error;
pub mod exec;
pub mod gmrf;
pub mod inference;
pub mod io;
pub mod model;
pub mod numeric;
pub mod partition;
pub mod priors;
pub mod standardize;
pub mod stats;
pub mod tree;

pub use error::{Error, Result};
