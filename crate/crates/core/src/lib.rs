pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod harness;
mod layers;
pub mod lm;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
