//! Memory Aware Synapses and importance-regularized continual learning.

pub mod analysis;
pub mod continual;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod nn;
pub mod portable;
pub mod tasks;

pub use error::{Error, Result};
