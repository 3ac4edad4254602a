//! Spectral-wise implicit neural representation (SINR) for coded-aperture
//! snapshot spectral imaging.

pub mod baseline;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod hsb;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod optics;
pub mod params;
pub mod scene;
pub mod sinr;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, InterpPlan, Tape, Tensor, Var};
