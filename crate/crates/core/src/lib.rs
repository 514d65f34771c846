//! Core library for the teleoperated-driving behavior generator: numerics,
//! simulation, scripted drivers, dataset construction, generative models,
//! training pipeline, and evaluation statistics.

pub mod checkpoint;
pub mod cvae;
pub mod drivers;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod sim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
