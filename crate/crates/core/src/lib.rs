//! Desk-scale laboratory for studying how bounded errors in mixture-of-experts
//! expert parameters affect inference accuracy.

pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod model;
pub mod offload;
pub mod perturbation;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod workbench;

pub use error::{Error, Result};
