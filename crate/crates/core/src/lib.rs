pub mod base;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod editor;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod params;
pub mod requests;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
