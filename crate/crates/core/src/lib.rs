//! Gaze-assisted natural-language video grounding.
//!
//! The pipeline has three stages: a gaze estimator pretrained with a
//! contrastive + KL objective against gaze heatmaps, a grounding network
//! that fuses estimated gaze and query text into video features and scores
//! a multi-scale feature pyramid, and an inference stack (Soft-NMS, recall
//! metrics, prediction-file ensembling). A synthetic data harness plants a
//! gaze-correlated localization signal so the whole pipeline is testable
//! end to end without any external dataset.

pub mod checkpoint;
pub mod error;
pub mod gaze;
pub mod heatmap;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sequence;
pub mod tensor;

pub use error::{Error, Result};
