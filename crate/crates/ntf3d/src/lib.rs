//! Desk-scale text-conditioned 3D generation with noisy text fields.
//!
//! The crate trains a small textured-mesh GAN whose conditioning passes
//! through a *noisy text field*: a caption embedding expanded into a
//! stochastic neighborhood with a learned, clamped per-dimension noise
//! scale. Supervision combines 2.5D image/mask discriminators, a
//! point-cloud discriminator, and contrastive alignment losses, all
//! expressed on an f64 autodiff tape so every gradient path is
//! finite-difference checkable.
//!
//! See the `book/` directory for a guided tour.

pub mod cli;
pub mod data;
pub mod discriminate;
pub mod embed;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod mesh;
pub mod nn;
pub mod ntf;
pub mod render;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
