//! Replaced-token-detection pretraining with a prioritized memory replay
//! buffer between the generator and the discriminator.

pub mod cli;
pub mod config;
pub mod error;
pub mod nn;
pub mod probe;
pub mod replay;
pub mod rng;
pub mod strategies;
pub mod text;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
