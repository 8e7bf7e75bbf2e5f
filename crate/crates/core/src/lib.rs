pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod format;
pub mod head;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod sampler;
pub mod search;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
