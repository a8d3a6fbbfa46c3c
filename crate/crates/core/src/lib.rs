// `!(x > 0.0)` is used on purpose so that NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod alignment;
pub mod batch;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod guide;
pub mod latent;
pub mod losses;
pub mod optimizer;
pub mod persist;
pub mod pipeline;
pub mod raster;
pub mod semantics;
pub mod toy;

pub use error::{Error, Result};
