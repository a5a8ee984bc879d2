//! Reference-based super-resolution at desk scale.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`image`] — raster container, PNG/PNM I/O, bicubic resampling, bilinear warping
//! - [`degrade`] — seeded synthetic degradation producing LR inputs from HR ground truth
//! - [`matching`] — dense correspondence between the upscaled LR image and a reference,
//!   plus warping and certainty compositing
//! - [`tiling`] — sliding-window tiling and blended stitching for large images
//! - [`flowmodel`] — the tri-branch rectified-flow denoiser with cross-branch
//!   key/value attention and an Euler ODE sampler
//! - [`train`] — staged training with hand-written backward passes and gradient
//!   verification
//! - [`datagen`] — procedural paired-viewpoint scenes with known homographies
//! - [`metrics`] — PSNR / SSIM and dataset evaluation reports
//! - [`pipeline`] — end-to-end super-resolution orchestration used by the CLI

pub mod config;
pub mod datagen;
pub mod degrade;
pub mod error;
pub mod flowmodel;
pub mod image;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tiling;
pub mod train;

pub use error::{Error, Result};
pub use image::{ImageBuffer, Rect};
pub use rng::RngState;
