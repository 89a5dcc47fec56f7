//! Explanation bottleneck models at desk scale.
//!
//! The pipeline: a procedural world ([`worldgen`]) supplies images, captions
//! and masks; a captioning encoder-decoder is pretrained on it and then
//! fine-tuned through a generated-text bottleneck ([`training`]) so that a
//! classifier only sees the image through the explanation it produced.
//! [`interpret`] and [`metrics`] turn a trained bundle into explanations,
//! heatmaps and evaluation reports.

pub mod autodiff;
pub mod decoding;
pub mod error;
pub mod interpret;
pub mod io;
pub mod metrics;
pub mod nn;
mod par;
pub mod rng;
pub mod training;
pub mod worldgen;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Result, XbmError};
