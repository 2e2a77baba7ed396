pub mod encoder;
pub mod error;
pub mod graph;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod retriever;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result, ScorerError};
