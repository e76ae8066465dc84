pub mod error;
pub mod graph;
pub mod harness;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod runtime;
pub mod trainer;

pub use error::{Error, Result};
