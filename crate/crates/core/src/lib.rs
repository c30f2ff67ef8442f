//! Reference-based sketch colorization with a latent diffusion model,
//! mask-gated background injection, style modulation and split
//! cross-attention.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod inference;
pub mod injection;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use image::ImageTensor;
