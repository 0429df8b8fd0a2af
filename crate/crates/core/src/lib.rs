//! Single-stream vision-and-language Transformer: joint text/region input
//! construction, grounded pre-training objectives, task heads, attention
//! probes, a synthetic grounded-scene generator, and training orchestration.

pub mod embeddings;
pub mod encoder;
pub mod error;
mod init;
pub mod harness;
pub mod model;
pub mod objectives;
pub mod probes;
pub mod synthdata;
pub mod tasks;

pub use error::{Error, Result};
