pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod traj;

pub use error::{Error, Result};
