//! Structured state space (SSD) world model for model-based reinforcement
//! learning at desk scale.

pub mod bench;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod gridworld;
pub mod imagination;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod ssd;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod world_model;

pub use error::{Error, Result};
