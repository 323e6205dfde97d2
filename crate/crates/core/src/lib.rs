//! Calibration weights for a non-probability sample by uniform calibration
//! of functions in a tensor-product Sobolev RKHS against a reference
//! probability sample.

pub mod calibrate;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod rng;
pub mod simulate;
pub mod variance;

pub use data::TwoSampleData;
pub use error::{Error, Result};
