//! Language-assisted multi-person pose estimation at desk scale.
//!
//! The pipeline: a convolutional backbone produces a global feature map,
//! per-person features are decoupled with spatial and channel attention,
//! generated text prompts (instance attributes and joint names) are embedded
//! by a frozen text encoder, and three text-image alignment losses join the
//! contrastive instance loss and focal heatmap loss for training. Evaluation
//! decodes keypoints from heatmaps and scores them with OKS-based AP/AR.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod skeleton;
pub mod text;
pub mod train;
pub mod types;
pub mod viz;

pub use error::{Error, Result};
pub use skeleton::SkeletonSpec;
