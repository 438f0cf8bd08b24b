//! Real-world super-resolution toolkit.
//!
//! The crate covers the whole path from a focal-length zoom pair to a
//! scored super-resolved image:
//!
//! * [`lens`]: thin-lens magnification and the focal-ratio scale prior.
//! * [`registration`]: luminance-adjusted affine alignment solved by IRLS,
//!   coarse to fine.
//! * [`pyramid`]: three-level Laplacian pyramid with exact reconstruction.
//! * [`kpn`]: per-pixel kernel application, its adjoint, and the
//!   pyramid-level composite.
//! * [`nn`]: a small from-scratch network that predicts the kernel tensors,
//!   with Adam training.
//! * [`metrics`]: PSNR and SSIM on the Y channel.
//! * [`synth`]: synthetic degradations with known ground truth.
//! * [`container`] and [`config`]: on-disk formats used by the CLI.

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod image;
pub mod kpn;
pub mod lens;
pub mod metrics;
pub mod nn;
pub mod pyramid;
pub mod registration;
pub mod synth;

pub use error::{Error, Result};
pub use image::{ImagePlane, RgbImage};
