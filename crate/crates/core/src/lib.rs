//! Cross-domain semi-supervised audio event classification.
//!
//! A target classifier is trained jointly with an NT-Xent contrastive
//! regularizer. The regularizer is fed by unlabeled audio from a different
//! class distribution, augmented with batch-split SNR mixing and colored noise.

pub mod audio;
pub mod augment;
pub mod error;
pub mod features;
pub mod harness;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod noise;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
