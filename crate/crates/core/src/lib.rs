//! Diffusion MRI scalar maps, image similarity, a desk-scale CycleGAN and
//! demons registration, with synthetic phantoms as ground truth.

pub mod autodiff;
pub mod cli;
pub mod cyclegan;
pub mod dti;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod register;
pub mod volume;

pub use error::{Error, Result};
