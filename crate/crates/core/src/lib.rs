pub mod error;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
pub mod attention;
pub mod checkpoint;
pub mod consistency;
pub mod controlnet;
pub mod diffusion;
pub mod motion;
pub mod nn;
pub mod train;
pub mod vae;
