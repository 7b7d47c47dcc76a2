pub mod acquisition;
pub mod baselines;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod world;

pub use error::{Error, Result};
