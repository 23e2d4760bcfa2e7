//! Switchable, distributable elastic CNNs.
//!
//! A single weight store holds a "wide" network. A switch such as
//! `[0.5,0.25,0.25]x` slices it into independent sub-networks that can run on
//! separate devices; their partial logits are summed to produce the output.

pub mod arch;
pub mod checkpoint;
pub mod autograd;
pub mod complexity;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod model;
pub mod norm;
pub mod optim;
pub mod runtime;
pub mod switch;
pub mod tensor;
pub mod trainer;

pub use arch::Architecture;
pub use error::{Error, Result};
pub use model::{ElasticModel, NormMode};
pub use switch::SwitchSpec;
pub use tensor::Tensor;
