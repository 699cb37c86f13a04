#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batchnorm;
pub mod disentangle;
pub mod dynamics;
pub mod error;
pub mod hull;
pub mod lp;
pub mod oracle;
pub mod scenario;
pub mod teacher;

pub use error::{Error, Result};
