//! Equivariant diffusion policy over spherical Fourier features.

pub mod autodiff;
pub mod bench;
pub mod canonical;
pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod pipeline;
pub mod sdtu;
pub mod so3;
pub mod verify;

pub use error::{Error, Result};
