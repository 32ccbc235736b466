//! Fluorescence angiography frame analysis.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`synthkit`] renders synthetic colon frames with known labels and perfusion fronts.
//! - [`dataset`] holds the labeled frame manifest, video ingestion and crop augmentation.
//! - [`classifier`] trains and runs the residual-network fluorescence classifier.
//! - [`evaluation`] computes confusion counts and recall/precision/accuracy/F1, and
//!   reconciles published rates back to integer confusion matrices.
//! - [`saliency`] produces class-activation maps and red overlays.
//! - [`boundary`] tiles a frame into strips along the colon and locates the perfusion boundary.
//!
//! The convolutional network itself lives in [`nn`], a small CPU engine with
//! explicit forward and backward passes.

pub mod boundary;
pub mod classifier;
pub mod dataset;
pub mod evaluation;
pub mod imaging;
pub mod nn;
pub mod saliency;
pub mod synthkit;
mod types;

pub use boundary::{BoundaryError, BoundaryEstimate, BoundaryOptions, StripClassification};
pub use classifier::{ClassificationResult, ClassifierError, ModelArtifact, TrainConfig};
pub use dataset::{CropSpec, DatasetError, DatasetManifest, FrameRecord};
pub use evaluation::{ConfusionCounts, EvalError, MetricsReport, Rate, Stratum};
pub use saliency::{SaliencyError, SaliencyMap};
pub use synthkit::{SynthFrame, SynthParams};
pub use types::{Axis, CameraId, DistalDirection, Label, Split};
