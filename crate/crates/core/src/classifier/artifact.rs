//! On-disk model artifact: a JSON descriptor next to a safetensors weights blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifierError, TrainConfig, DEFAULT_THRESHOLD};
use crate::nn::{ResNet, ResNetSpec};

pub const DESCRIPTOR_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Resize the shorter side to the input size, then crop the centre square.
    ShortestSideCenterCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub resize: ResizePolicy,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Shorter-side resolution at which saliency maps are computed.
    pub saliency_side: u32,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            resize: ResizePolicy::ShortestSideCenterCrop,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            saliency_side: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub fit_frames: usize,
    pub internal_val_frames: usize,
    pub final_train_loss: f64,
    pub final_internal_val_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub architecture_id: String,
    pub input_size: u32,
    pub preprocessing: Preprocessing,
    pub threshold: f64,
    pub training_config: TrainConfig,
    pub version: String,
    pub weights: String,
    pub weights_sha256: String,
    #[serde(default)]
    pub training_summary: Option<TrainingSummary>,
}

/// A loaded, immutable model.
#[derive(Debug, Clone)]
pub struct ModelArtifact {
    pub descriptor: ModelDescriptor,
    pub(crate) network: ResNet,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelArtifact {
    /// Wraps a network; the version is derived from the weight bytes.
    pub fn from_network(
        network: ResNet,
        config: TrainConfig,
        preprocessing: Preprocessing,
        summary: Option<TrainingSummary>,
    ) -> Self {
        let digest = sha256_hex(&network.to_safetensors());
        let descriptor = ModelDescriptor {
            architecture_id: config.architecture_id.clone(),
            input_size: config.input_size,
            preprocessing,
            threshold: DEFAULT_THRESHOLD,
            version: format!("{}-{}", config.architecture_id, &digest[..12]),
            training_config: config,
            weights: WEIGHTS_FILE.into(),
            weights_sha256: digest,
            training_summary: summary,
        };
        Self { descriptor, network }
    }

    pub fn save(&self, dir: &Path) -> Result<(), ClassifierError> {
        fs::create_dir_all(dir)?;
        let weights = self.network.to_safetensors();
        fs::write(dir.join(&self.descriptor.weights), &weights)?;
        let json = serde_json::to_string_pretty(&self.descriptor).map_err(std::io::Error::other)?;
        fs::write(dir.join(DESCRIPTOR_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ClassifierError> {
        let corrupt = |m: String| ClassifierError::ArtifactCorrupt(m);
        let text = fs::read_to_string(dir.join(DESCRIPTOR_FILE))
            .map_err(|e| corrupt(format!("{}: {e}", dir.join(DESCRIPTOR_FILE).display())))?;
        let descriptor: ModelDescriptor =
            serde_json::from_str(&text).map_err(|e| corrupt(format!("descriptor: {e}")))?;
        if !(descriptor.threshold > 0.0 && descriptor.threshold < 1.0) {
            return Err(corrupt(format!(
                "threshold {} outside (0, 1)",
                descriptor.threshold
            )));
        }
        if descriptor.input_size == 0 {
            return Err(corrupt("input_size is zero".into()));
        }
        let spec = ResNetSpec::from_architecture_id(&descriptor.architecture_id)
            .ok_or_else(|| corrupt(format!("unknown architecture `{}`", descriptor.architecture_id)))?;
        let weights_path = dir.join(&descriptor.weights);
        let bytes =
            fs::read(&weights_path).map_err(|e| corrupt(format!("{}: {e}", weights_path.display())))?;
        let digest = sha256_hex(&bytes);
        if digest != descriptor.weights_sha256 {
            return Err(corrupt(format!(
                "weights checksum {digest} does not match descriptor {}",
                descriptor.weights_sha256
            )));
        }
        let mut network = ResNet::new(spec);
        network
            .load_safetensors(&bytes, true)
            .map_err(|e| corrupt(e.to_string()))?;
        Ok(Self { descriptor, network })
    }
}
