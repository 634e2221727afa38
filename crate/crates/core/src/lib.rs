pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod aligner;
pub mod audit;
pub mod objective;
pub mod rng;
pub mod synthworld;
pub mod toydiffusion;
pub mod trainer;
