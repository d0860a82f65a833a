//! Long-tailed volumetric classification: residual model, class-balanced
//! losses, post-hoc temperature adjustment, data pipeline, optimizers and
//! metrics.

pub mod calibration;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optimizers;
pub mod scores;

pub use error::{Error, Result};
pub use medconv_tensor as tensor;
