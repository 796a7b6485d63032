//! Latent-space image compositing.
//!
//! Reference images are embedded into a split latent space (a spatial
//! structure tensor at one generator block plus per-block style vectors for
//! the rest), aligned to a target segmentation mask, and blended into one
//! composite. The generator, segmenter and feature extractor sit behind the
//! traits in [`backend`]; a small seeded toy world implements all three.

pub mod align;
pub mod archive;
pub mod autodiff;
pub mod backend;
pub mod blend;
pub mod embed;
pub mod error;
pub mod image;
pub mod latent;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod progress;
pub mod resample;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{GridShape, Tensor};
