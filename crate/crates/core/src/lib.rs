//! Block-diffusion and autoregressive policies for a deterministic,
//! token-level tool-use workflow.

pub mod agent;
pub mod analytics;
pub mod corruption;
pub mod data;
pub mod decoding;
pub mod error;
pub mod masks;
pub mod model;
pub mod pipeline;
pub mod runtime;
pub mod training;

pub use error::{Error, Result};
