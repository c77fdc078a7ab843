//! Membership-inference auditing: train small classifiers, extract membership
//! signals, run threshold / difficulty-calibration / LiRA-offline / scoring-model
//! attacks, and evaluate them at low false-positive rates.

pub mod attacks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod signals;

pub use error::{Error, Result};
