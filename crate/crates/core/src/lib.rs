// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geo;
pub mod ingest;
pub mod lagrank;
pub mod mask;
pub mod predict;
pub mod raster;
pub mod split;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
