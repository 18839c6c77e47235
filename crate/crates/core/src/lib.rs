#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod appearance;
pub mod comparators;
pub mod deepekf;
pub mod ekf;
pub mod error;
pub mod evaluation;
pub mod fuser;
pub mod greedy;
pub mod io;
pub mod mht;
pub mod model;
pub mod nn;
pub mod visual;

pub use error::{Error, Result};
