//! Fixtures shared by the benchmarks.

use fa_core::classifier::{ModelArtifact, Preprocessing, TrainConfig};
use fa_core::nn::{ResNet, ResNetSpec};
use fa_core::synthkit::{generate_frame, SynthParams};
use image::RgbImage;

/// Randomly initialised artifact; inference cost does not depend on the weights.
pub fn artifact(architecture_id: &str, input_size: u32) -> ModelArtifact {
    let mut net = ResNet::new(ResNetSpec::from_architecture_id(architecture_id).expect("known architecture"));
    net.init(1);
    let config = TrainConfig {
        architecture_id: architecture_id.into(),
        input_size,
        ..TrainConfig::default()
    };
    ModelArtifact::from_network(net, config, Preprocessing::default(), None)
}

/// Full-size synthetic frame with a front in the middle.
pub fn frame() -> RgbImage {
    generate_frame(&SynthParams {
        boundary_x: Some(720),
        seed: 3,
        ..SynthParams::default()
    })
    .expect("default params are valid")
    .image
}
