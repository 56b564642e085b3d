//! Training and calibration lab for SGD, SAM and CSAM on small MLPs.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod posthoc;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
