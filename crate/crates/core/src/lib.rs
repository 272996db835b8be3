//! Watermarking toolkit for 3D Gaussian splatting models.
//!
//! The pipeline embeds a fixed-length copyright message into a pretrained
//! Gaussian cloud without touching the original Gaussians: per-Gaussian
//! uncertainty (diagonal Fisher information of the rendered images) selects
//! which Gaussians can tolerate perturbation, those are densified into
//! trainable "marker" Gaussians, and the markers are optimized so a frozen
//! image decoder reads the message from renders while the renders stay close
//! to the originals. A point-set decoder is then trained to read the message
//! straight from the Gaussian parameters, with distortion layers in both
//! domains for robustness.
//!
//! Module map:
//! - [`gscloud`] — Gaussian data model and PLY serialization
//! - [`splatter`] — differentiable pinhole splatting renderer
//! - [`fisher`] — diagonal Fisher information / uncertainty maps
//! - [`marker`] — marker densification and message embedding (phase 1)
//! - [`wm2d`] — image watermark codec and 2D distortion layer
//! - [`wm3d`] — point-set message decoder, discriminator, 3D distortions (phase 2)
//! - [`metrics`] — PSNR / SSIM / bit accuracy / geometry difference
//! - [`scenes`] — procedural toy scenes and a minimal photometric fitter

pub mod error;
pub mod fisher;
pub mod gscloud;
pub mod marker;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scenes;
pub mod splatter;
pub mod wm2d;
pub mod wm3d;

pub use error::{Error, Result};
