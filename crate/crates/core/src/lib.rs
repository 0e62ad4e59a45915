//! Skin-lesion classification on dermoscopic images: data preparation,
//! class balancing and augmentation, an attention-augmented CNN trained in
//! three fine-tuning stages, evaluation metrics and visual explanations.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalx;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
