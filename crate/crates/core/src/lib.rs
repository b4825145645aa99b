pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffcore;
mod error;
pub mod metrics;
pub mod model;
pub mod mutexloss;
pub mod rng;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
