//! Retrieval-augmented differentially private diffusion training, desk scale.

pub mod accountant;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod dp;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod io;
pub mod kb;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
