//! Synthetic fluorescence angiography frames with known ground truth.
//!
//! A frame is a horizontal colon band lying on bright swabs. Perfused tissue
//! is rendered green over a pink base; the fluorescence field follows a
//! logistic front along x, saturated on the proximal side and vanishing
//! distally. Every frame is a pure function of its [`SynthParams`].

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_manifest, DatasetError, DatasetManifest, FrameRecord};
use crate::imaging::{derive_seed, save_png};
use crate::types::{CameraId, DistalDirection, Label, Split};

/// Mean fluorescence (fraction of saturation) a strip must exceed to count as emitting.
pub const EMISSION_FLOOR: f64 = 0.05;

/// Width of the window used to decide a frame's truth label.
pub const TRUTH_STRIP_WIDTH: u32 = 100;

/// The front is `1 / (1 + exp(FRONT_STEEPNESS * d / falloff_width))`, so the field is
/// above 0.98 one falloff width proximal of the boundary and below 0.02 one width distal.
const FRONT_STEEPNESS: f64 = 4.0;

const FLUORESCENT_RGB: [f64; 3] = [70.0, 235.0, 95.0];
/// Share of dataset frames shot with dim reflected light.
const DIM_FRAME_FRACTION: f64 = 0.15;
const TISSUE_RGB: [f64; 3] = [205.0, 112.0, 124.0];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error("failed to write frame {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Manifest(#[from] DatasetError),
}

/// Vertical pixel interval `[top, bottom)` occupied by the colon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColonBand {
    pub top: u32,
    pub bottom: u32,
}

impl ColonBand {
    pub fn contains(&self, y: u32) -> bool {
        y >= self.top && y < self.bottom
    }

    pub fn height(&self) -> u32 {
        self.bottom - self.top
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub width: u32,
    pub height: u32,
    pub colon_band: ColonBand,
    /// Centre of the perfusion front; `None` renders a uniform field.
    pub boundary_x: Option<u32>,
    pub falloff_width: f64,
    pub fluorescence_gain: f64,
    pub noise_sigma: f64,
    pub background_brightness: u8,
    /// Scales reflected light only; fluorescent emission is unaffected, so
    /// `0` gives a fluorescence-only view on black.
    #[serde(default = "full_exposure")]
    pub exposure: f64,
    pub distal_direction: DistalDirection,
    pub seed: u64,
}

fn full_exposure() -> f64 {
    1.0
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 1440,
            height: 1080,
            colon_band: ColonBand {
                top: 310,
                bottom: 770,
            },
            boundary_x: None,
            falloff_width: 40.0,
            fluorescence_gain: 1.0,
            noise_sigma: 4.0,
            background_brightness: 235,
            exposure: 1.0,
            distal_direction: DistalDirection::IncreasingX,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidParams(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty frame {}x{}", self.width, self.height));
        }
        if !(self.falloff_width > 0.0 && self.falloff_width < self.width as f64) {
            return bad(format!(
                "falloff_width {} outside (0, {})",
                self.falloff_width, self.width
            ));
        }
        if let Some(b) = self.boundary_x {
            if b >= self.width {
                return bad(format!("boundary_x {b} outside [0, {})", self.width));
            }
        }
        let band = self.colon_band;
        if !(band.top > 0 && band.top < band.bottom && band.bottom < self.height) {
            return bad(format!(
                "colon band [{}, {}) not strictly inside [0, {})",
                band.top, band.bottom, self.height
            ));
        }
        if !(0.0..=1.0).contains(&self.fluorescence_gain) {
            return bad(format!(
                "fluorescence_gain {} outside [0, 1]",
                self.fluorescence_gain
            ));
        }
        if !(0.0..=1.0).contains(&self.exposure) {
            return bad(format!("exposure {} outside [0, 1]", self.exposure));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        Ok(())
    }

    /// Noiseless fluorescence per column, as a fraction of saturation.
    pub fn emission_profile(&self) -> Vec<f64> {
        (0..self.width).map(|x| self.emission_at(x)).collect()
    }

    fn emission_at(&self, x: u32) -> f64 {
        let front = match self.boundary_x {
            None => 1.0,
            Some(b) => {
                let centre = x as f64 + 0.5;
                let distal_distance = match self.distal_direction {
                    DistalDirection::IncreasingX => centre - b as f64,
                    DistalDirection::DecreasingX => b as f64 - centre,
                };
                1.0 / (1.0 + (FRONT_STEEPNESS * distal_distance / self.falloff_width).exp())
            }
        };
        self.fluorescence_gain * front
    }

    /// Fluorescent iff some strip-wide window of the band emits above [`EMISSION_FLOOR`].
    pub fn truth_label(&self) -> Label {
        let profile = self.emission_profile();
        let window = (TRUTH_STRIP_WIDTH.min(self.width)) as usize;
        let mut sum: f64 = profile[..window].iter().sum();
        let mut best = sum;
        for i in window..profile.len() {
            sum += profile[i] - profile[i - window];
            best = best.max(sum);
        }
        if best / window as f64 > EMISSION_FLOOR {
            Label::Fluorescent
        } else {
            Label::NotFluorescent
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub image: RgbImage,
    pub truth_label: Label,
    pub truth_boundary_x: Option<u32>,
    pub params: SynthParams,
}

impl SynthFrame {
    /// Whether pixel (x, y) lies in colon tissue emitting above the floor.
    pub fn is_fluorescent_pixel(&self, x: u32, y: u32) -> bool {
        self.params.colon_band.contains(y) && self.params.emission_at(x) > EMISSION_FLOOR
    }
}

pub fn generate_frame(params: &SynthParams) -> Result<SynthFrame, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
    let tissue: [f64; 3] = std::array::from_fn(|c| TISSUE_RGB[c] + tint[c]);
    let bg = params.background_brightness as f64;
    let e = params.exposure;
    let background = [e * bg, e * bg, e * (bg - 4.0)];
    let profile = params.emission_profile();

    let band = params.colon_band;
    let centre = (band.top + band.bottom) as f64 / 2.0;
    let half = band.height() as f64 / 2.0;
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma validated");
    let noisy = params.noise_sigma > 0.0;

    let mut image = RgbImage::new(params.width, params.height);
    for y in 0..params.height {
        let in_band = band.contains(y);
        let shade = if in_band {
            let u = ((y as f64 + 0.5 - centre) / half).clamp(-1.0, 1.0);
            0.72 + 0.28 * (1.0 - u * u).sqrt()
        } else {
            1.0
        };
        for x in 0..params.width {
            let f = profile[x as usize];
            let mut px = [0u8; 3];
            for c in 0..3 {
                let clean = if in_band {
                    shade * ((1.0 - f) * e * tissue[c] + f * FLUORESCENT_RGB[c])
                } else {
                    background[c]
                };
                let n = if noisy { noise.sample(&mut rng) } else { 0.0 };
                px[c] = (clean + n).round().clamp(0.0, 255.0) as u8;
            }
            image.put_pixel(x, y, Rgb(px));
        }
    }

    Ok(SynthFrame {
        image,
        truth_label: params.truth_label(),
        truth_boundary_x: params.boundary_x,
        params: params.clone(),
    })
}

/// Shape of a synthetic dataset. Patients are numbered from zero and their ids
/// embed the seed so datasets built with different seeds never share patients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub n_patients: usize,
    pub frames_per_patient: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    pub split: Split,
    pub width: u32,
    pub height: u32,
}

impl DatasetPlan {
    pub fn new(n_patients: usize, frames_per_patient: usize, positive_fraction: f64, seed: u64) -> Self {
        Self {
            n_patients,
            frames_per_patient,
            positive_fraction,
            seed,
            split: Split::Train,
            width: 1440,
            height: 1080,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn total_frames(&self) -> usize {
        self.n_patients * self.frames_per_patient
    }

    pub fn positive_count(&self) -> usize {
        (self.positive_fraction * self.total_frames() as f64 + 0.5).floor() as usize
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_patients < 2 {
            return Err(SynthError::InvalidParams(format!(
                "need at least 2 patients, got {}",
                self.n_patients
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(SynthError::InvalidParams(format!(
                "positive_fraction {} outside [0, 1]",
                self.positive_fraction
            )));
        }
        if self.width < TRUTH_STRIP_WIDTH || self.height < 16 {
            return Err(SynthError::InvalidParams(format!(
                "frame {}x{} too small",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn patient_id(&self, patient: usize) -> String {
        format!("synth-{}-p{:02}", self.seed, patient)
    }

    /// Per-patient appearance, jittered from the seed.
    pub fn patient_params(&self, patient: usize) -> PatientStyle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x5041_5449, patient as u64]));
        let h = self.height as f64;
        let half = rng.random_range(0.20 * h..0.26 * h);
        let centre = h / 2.0 + rng.random_range(-0.04 * h..0.04 * h);
        PatientStyle {
            colon_band: ColonBand {
                top: (centre - half).round().max(1.0) as u32,
                bottom: ((centre + half).round() as u32).min(self.height - 1),
            },
            noise_sigma: rng.random_range(2.0..6.0),
            background_brightness: rng.random_range(218..=245),
            gain: rng.random_range(0.85..=1.0),
            falloff_width: rng.random_range(15.0..50.0),
            distal_direction: if rng.random_bool(0.5) {
                DistalDirection::IncreasingX
            } else {
                DistalDirection::DecreasingX
            },
        }
    }

    /// Parameters of one frame; `positive` selects a perfused frame.
    pub fn frame_params(&self, patient: usize, frame: usize, positive: bool) -> SynthParams {
        let style = self.patient_params(patient);
        let seed = derive_seed(self.seed, &[patient as u64, frame as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4652_4d45]));
        let (boundary_x, gain) = if positive {
            let boundary = if rng.random_bool(0.25) {
                None
            } else {
                // fraction of the frame on the perfused side
                let perfused = rng.random_range(0.4..0.9);
                let x = match style.distal_direction {
                    DistalDirection::IncreasingX => perfused * self.width as f64,
                    DistalDirection::DecreasingX => (1.0 - perfused) * self.width as f64,
                };
                Some((x.round() as u32).min(self.width - 1))
            };
            (boundary, style.gain)
        } else {
            (None, rng.random_range(0.0..0.03))
        };
        // own stream so the draws above don't depend on it
        let mut light = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x4c49_4748]));
        let exposure = if light.random_bool(DIM_FRAME_FRACTION) {
            light.random_range(0.0..0.3)
        } else {
            1.0
        };
        SynthParams {
            width: self.width,
            height: self.height,
            colon_band: style.colon_band,
            boundary_x,
            falloff_width: style.falloff_width.min(self.width as f64 / 4.0),
            fluorescence_gain: gain,
            noise_sigma: style.noise_sigma,
            background_brightness: style.background_brightness,
            exposure,
            distal_direction: style.distal_direction,
            seed,
        }
    }

    /// Which frames (patient-major order) are positive.
    pub fn positive_mask(&self) -> Vec<bool> {
        let total = self.total_frames();
        let mut order: Vec<usize> = (0..total).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[0x504f_5349]));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut mask = vec![false; total];
        for &i in &order[..self.positive_count()] {
            mask[i] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientStyle {
    pub colon_band: ColonBand,
    pub noise_sigma: f64,
    pub background_brightness: u8,
    pub gain: f64,
    pub falloff_width: f64,
    pub distal_direction: DistalDirection,
}

/// Renders every frame of `plan` as PNG under `out_dir/frames` and returns the
/// manifest. Record paths are `out_dir/frames/<frame_id>.png`.
pub fn generate_dataset(plan: &DatasetPlan, out_dir: &Path) -> Result<DatasetManifest, SynthError> {
    plan.validate()?;
    let frames_dir = out_dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let mask = plan.positive_mask();
    let mut records = Vec::with_capacity(plan.total_frames());
    for patient in 0..plan.n_patients {
        let patient_id = plan.patient_id(patient);
        for frame in 0..plan.frames_per_patient {
            let positive = mask[patient * plan.frames_per_patient + frame];
            let params = plan.frame_params(patient, frame, positive);
            let rendered = generate_frame(&params)?;
            let frame_id = format!("{patient_id}-f{frame:04}");
            let rel = PathBuf::from("frames").join(format!("{frame_id}.png"));
            let path = out_dir.join(&rel);
            save_png(&rendered.image, &path).map_err(|source| SynthError::Write {
                path: path.clone(),
                source,
            })?;
            records.push(FrameRecord {
                frame_id,
                patient_id: patient_id.clone(),
                camera_id: CameraId::Synthetic,
                path,
                label: Some(rendered.truth_label),
                split: plan.split,
                width: plan.width,
                height: plan.height,
                truth_boundary_x: rendered.truth_boundary_x,
            });
        }
    }
    Ok(build_manifest(records)?)
}
