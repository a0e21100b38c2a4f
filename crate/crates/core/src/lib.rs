//! Pixel-space flow-matching depth estimation at desk scale.

pub mod codec;
pub mod config;
pub mod dit;
pub mod encoder;
mod error;
pub mod flow;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
