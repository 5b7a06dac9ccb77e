//! Desk-scale diagnostic-quality assessment (DQA) of fundus photographs.
//!
//! The crate provides, from the ground up:
//!
//! - [`tensor`]: a dense `f32` tensor type and the differentiable operations
//!   (forward plus reverse-mode gradients via a [`tensor::GradientTape`])
//!   needed by small convolutional networks.
//! - [`backbones`]: micro-scale, configurable analogs of DenseNet and
//!   EfficientNet with an appended fully-connected head, plus a binary
//!   checkpoint format.
//! - [`hierarchy`]: a two-stage hierarchical classifier built from three
//!   binary stage models (high-vs-low, good-vs-usable, usable-vs-unusable),
//!   together with a flat three-class baseline for comparison.
//! - [`explain`]: Grad-CAM saliency maps with heat-map and transparency-map
//!   overlay rendering.
//! - [`metrics`]: confusion matrices, accuracy, macro precision/recall,
//!   F-score, and class-conditional scenario selection.
//! - [`data`]: manifest ingestion, image preprocessing, and a seeded
//!   synthetic fundus-image generator whose labels follow the three-way
//!   grading rule (good / usable / unusable).
//!
//! The `fundus-dqa-cli` crate wires these into operator-facing commands.

pub mod backbones;
pub mod data;
pub mod error;
pub mod explain;
pub mod hierarchy;
pub mod imgio;
pub mod label;
pub mod metrics;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use label::QualityLabel;
