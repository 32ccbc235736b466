//! Binary fluorescence classifier: artifact format, preprocessing, inference
//! and the decision threshold. Training lives in [`train`].

mod artifact;
mod train;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CropSpec, DatasetError};
use crate::imaging::{decode_image, resize_center_crop};
use crate::nn::{Act, ResNet, WeightsError};
use crate::types::Label;

pub use artifact::{ModelArtifact, ModelDescriptor, Preprocessing, ResizePolicy, TrainingSummary};
pub use train::{train, train_with_progress, EpochReport, TrainingReport};

/// Probability a frame must strictly exceed to be called fluorescent.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Output index of the fluorescent class in the two-logit head.
pub const FLUORESCENT_CLASS: usize = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("train split must contain both classes (found only {0})")]
    SingleClassDataset(Label),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("model artifact is corrupt: {0}")]
    ArtifactCorrupt(String),
    #[error("cannot load base weights: {0}")]
    BaseWeights(#[from] WeightsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    /// Probability of the fluorescent class.
    pub probability: f64,
    pub label: Label,
    pub threshold: f64,
    pub model_version: String,
}

/// Fluorescent iff `probability > threshold` (strict).
pub fn apply_threshold(probability: f64, threshold: f64) -> Label {
    if probability > threshold {
        Label::Fluorescent
    } else {
        Label::NotFluorescent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub internal_val_fraction: f64,
    pub crop: CropSpec,
    pub batch_size: usize,
    /// Peak rate of the one-cycle schedule.
    pub learning_rate: f64,
    pub seed: u64,
    pub architecture_id: String,
    /// Network input side; training crops are resized to it.
    pub input_size: u32,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
    pub optimizer: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            internal_val_fraction: 0.2,
            crop: CropSpec::default(),
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            architecture_id: "residual-34".into(),
            input_size: crate::dataset::DEFAULT_CROP_SIZE,
            class_weighting: true,
            optimizer: "adamw-one-cycle".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: String| Err(ClassifierError::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.internal_val_fraction > 0.0 && self.internal_val_fraction < 1.0) {
            return bad(format!(
                "internal_val_fraction {} outside (0, 1)",
                self.internal_val_fraction
            ));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.input_size < 32 {
            return bad(format!(
                "input_size {} below the network minimum of 32",
                self.input_size
            ));
        }
        if self.crop.crop_size == 0 {
            return bad("crop_size must be positive".into());
        }
        if crate::nn::ResNetSpec::from_architecture_id(&self.architecture_id).is_none() {
            return bad(format!("unknown architecture `{}`", self.architecture_id));
        }
        Ok(())
    }
}

/// Converts an RGB image into a normalized single-item network input.
pub(crate) fn to_input(image: &RgbImage, pre: &Preprocessing) -> Act {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut act = Act::zeros(3, 1, h, w);
    let plane = w * h;
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            act.data[c * plane + i] = (px.0[c] as f32 / 255.0 - pre.mean[c]) / pre.std[c];
        }
    }
    act
}

/// Stacks equally sized images into one batch.
pub(crate) fn to_batch(images: &[RgbImage], pre: &Preprocessing) -> Act {
    let (w, h) = images[0].dimensions();
    let (w, h) = (w as usize, h as usize);
    let n = images.len();
    let plane = w * h;
    let mut act = Act::zeros(3, n, h, w);
    for (b, img) in images.iter().enumerate() {
        assert_eq!(
            img.dimensions(),
            (w as u32, h as u32),
            "batch images differ in size"
        );
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                act.data[(c * n + b) * plane + i] = (px.0[c] as f32 / 255.0 - pre.mean[c]) / pre.std[c];
            }
        }
    }
    act
}

/// Probability of the fluorescent class from two logits.
pub(crate) fn fluorescent_probability(logits: &[f32]) -> f64 {
    let probs = crate::nn::softmax(logits);
    probs[FLUORESCENT_CLASS]
}

pub(crate) fn infer_probability(
    network: &ResNet,
    input_size: u32,
    pre: &Preprocessing,
    image: &RgbImage,
) -> f64 {
    let prepared = match pre.resize {
        ResizePolicy::ShortestSideCenterCrop => resize_center_crop(image, input_size),
    };
    fluorescent_probability(&network.forward(&to_input(&prepared, pre)))
}

impl ModelArtifact {
    pub fn threshold(&self) -> f64 {
        self.descriptor.threshold
    }

    pub fn version(&self) -> &str {
        &self.descriptor.version
    }

    pub fn network(&self) -> &ResNet {
        &self.network
    }

    /// Fluorescent-class probability after inference preprocessing.
    pub fn probability(&self, image: &RgbImage) -> f64 {
        infer_probability(
            &self.network,
            self.descriptor.input_size,
            &self.descriptor.preprocessing,
            image,
        )
    }

    pub fn predict(&self, image: &RgbImage) -> ClassificationResult {
        self.predict_with_threshold(image, self.threshold())
    }

    pub fn predict_with_threshold(&self, image: &RgbImage, threshold: f64) -> ClassificationResult {
        let probability = self.probability(image);
        ClassificationResult {
            probability,
            label: apply_threshold(probability, threshold),
            threshold,
            model_version: self.descriptor.version.clone(),
        }
    }

    /// Decodes PNG/JPEG bytes and predicts.
    pub fn predict_bytes(&self, bytes: &[u8]) -> Result<ClassificationResult, ClassifierError> {
        let image = decode_image(bytes).map_err(|e| ClassifierError::Decode(e.to_string()))?;
        Ok(self.predict(&image))
    }

    /// Order-preserving batch prediction; undecodable items become errors in place.
    pub fn predict_batch<B: AsRef<[u8]>>(
        &self,
        images: &[B],
    ) -> Vec<Result<ClassificationResult, ClassifierError>> {
        images.iter().map(|b| self.predict_bytes(b.as_ref())).collect()
    }
}
