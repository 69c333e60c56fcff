//! Gridless multi-snapshot line spectral estimation from quantized samples.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod crb;
pub mod ep;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod mvalse;
pub mod quantizer;
pub mod special;

pub use error::{QlseError, Result};

pub use nalgebra;
pub use num_complex;
