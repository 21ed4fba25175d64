//! Traceable voice conversion: hide a speaker embedding inside converted
//! speech with an invertible flow vocoder, push it through a lossy channel and
//! recover it for verification.

pub mod audio;
pub mod channel;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod id_vae;
pub mod nn;
pub mod restoration;
pub mod pipeline;
pub mod rng;
pub mod speaker;
pub mod synth;
pub mod tracing;
pub mod training;
pub mod vc;

pub use error::{Error, Result};
