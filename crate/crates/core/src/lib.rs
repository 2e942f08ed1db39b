//! `rnvc`: a desk-scale recurrent learned video codec.
//!
//! P-frames are coded by estimating optical flow against the previous
//! reconstruction, compressing the flow and the motion-compensated residual
//! with recurrent auto-encoders, and entropy coding both latent streams with
//! a range coder driven by per-element discretized logistic PMFs. From the
//! second P-frame on, those PMFs come from a recurrent probability model
//! conditioned on all previously decoded latents, so no side information is
//! transmitted.
//!
//! Module map:
//! * [`tensor`]: dense tensors, reverse-mode tape, weight files
//! * [`layers`]: convolutions, ConvLSTM, GDN/IGDN
//! * [`motion`]: flow pyramid, warping, motion compensation
//! * [`rae`]: recurrent auto-encoders and the latent quantizer
//! * [`rpm`]: recurrent probability model and the factorized model
//! * [`coder`]: quantized CDFs and the range coder
//! * [`codec`]: frame/GOP coding and the bitstream container
//! * [`train`]: synthetic data, losses, Adam, staged training
//! * [`metrics`]: PSNR, MS-SSIM, BD-rate

pub mod codec;
pub mod coder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod rae;
pub mod rpm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
