//! Text-to-image person retrieval at desk scale.
//!
//! Dual-stream transformer encoders project images and captions into a joint
//! space; training combines similarity distribution matching, an identity
//! classifier and masked-token prediction over a fused image/text encoder.
//! The fused branch exists only at training time: retrieval compares one
//! global embedding per image and per caption.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
