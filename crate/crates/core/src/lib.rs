#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
