//! Hope-speech detection for English, Tamil and Malayalam comments: corpus
//! handling, annotator agreement, text encoders, classification heads,
//! training, evaluation and a command-line front end.

pub mod agreement;
pub mod autograd;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fsutil;
pub mod heads;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
