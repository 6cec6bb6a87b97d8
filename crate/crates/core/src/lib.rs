//! Infrared/visible image fusion with an illumination-gated mixture of chiral
//! transformer experts.

pub mod error;
pub mod par;
pub mod tensor;

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod fusion;
pub mod gate;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
