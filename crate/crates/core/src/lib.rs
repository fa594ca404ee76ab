//! Zero-shot underwater gesture recognition.
//!
//! A two-stage pipeline: a gated cross-attention transformer turns backbone
//! feature maps and auxiliary image tokens into gesture features, then a
//! class-conditional WGAN-GP learns to synthesize features from class
//! semantics so a softmax classifier can be trained for classes that have no
//! training images.

pub mod archive;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod featgen;
pub mod gcat;
pub mod nn;
pub mod pipeline;
pub mod providers;
pub mod tape;
pub mod tensor_io;
pub mod zsl;

pub use error::{Error, Result};
