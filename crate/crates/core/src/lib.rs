//! Background-conditioned alpha matting for stage captures: image types,
//! synthetic data, metrics, networks, training and QC.

pub mod config;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod net;
pub mod qc;
pub mod stage_sim;
pub mod training;

pub use error::{Error, ErrorClass, Result};
