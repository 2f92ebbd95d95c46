//! Column-level adaptive K-Means weight quantization.
//!
//! Each column of a weight matrix gets its own K-Means codebook. Columns
//! are ranked by their share of outliers (elements above a multiple of the
//! matrix mean magnitude); the ranking steers which columns receive a wider
//! codebook and where full-precision outliers are kept. Quantization error
//! is compensated column by column through the inverse calibration Hessian.

pub mod alloc;
pub mod cli;
pub mod error;
pub mod kmeans;
pub mod outlier;
pub mod quantizer;
pub mod synthetic;
pub mod tensor_store;

pub use error::{ClaqError, Result};
