//! Face image quality regression on a small Vision Transformer.
//!
//! A tape autodiff engine drives a pre-norm ViT whose extra token (variant T)
//! or face embedding (variant C) feeds a scalar quality head, trained with
//! CosFace plus a Smooth-L1 fit to a detached classifiability target. The
//! crate also holds the PPM data pipeline, AdamW training with checkpoints,
//! and Error-versus-Discard evaluation (FNMR at a fixed FMR threshold, AUC,
//! pAUC).

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod infer;
pub mod model;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
