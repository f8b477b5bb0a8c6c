pub mod analysis;
pub mod changegen;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{MasonError, Result};
