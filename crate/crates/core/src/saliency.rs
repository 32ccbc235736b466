//! Class-activation saliency maps and red overlays.
//!
//! The map weights the final residual block's channels by the gradient of the
//! predicted class's logit margin, as in Grad-CAM. With global average
//! pooling followed by one linear layer that gradient is constant over the
//! grid, `(w[k][c] - w[other][c]) / (h * w)`, so no backward pass is needed.
//!
//! The default method subtracts the activations of a flat image of the
//! input's mean colour before weighting. Zero padding makes even a featureless
//! image light up along its borders; the baseline cancels that, so only
//! structure in the input itself contributes.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{to_input, ModelArtifact, FLUORESCENT_CLASS};
use crate::imaging::{decode_image, resize_shortest_side};
use crate::nn::Act;

pub const METHOD_GRADCAM: &str = "gradcam";
pub const METHOD_GRADCAM_BASELINE: &str = "gradcam-baseline";

#[derive(Debug, Error, PartialEq)]
pub enum SaliencyError {
    #[error("saliency map is {map_width}x{map_height} but the image is {image_width}x{image_height}")]
    DimensionMismatch {
        map_width: u32,
        map_height: u32,
        image_width: u32,
        image_height: u32,
    },
    #[error("opacity {0} outside [0, 1]")]
    InvalidOpacity(f64),
    #[error("cannot decode image: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMethod {
    GradCam,
    #[default]
    GradCamBaseline,
}

impl SaliencyMethod {
    pub fn id(self) -> &'static str {
        match self {
            SaliencyMethod::GradCam => METHOD_GRADCAM,
            SaliencyMethod::GradCamBaseline => METHOD_GRADCAM_BASELINE,
        }
    }
}

/// Row-major field of `width * height` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub values: Vec<f32>,
    pub width: u32,
    pub height: u32,
    pub frame_id: Option<String>,
    pub model_version: String,
    pub method_id: String,
}

impl SaliencyMap {
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Mean value over pixels where `mask(x, y)` holds, and over the rest.
    pub fn mean_inside_outside(&self, mask: impl Fn(u32, u32) -> bool) -> (f64, f64) {
        let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y) as f64;
                if mask(x, y) {
                    sum_in += v;
                    n_in += 1;
                } else {
                    sum_out += v;
                    n_out += 1;
                }
            }
        }
        (sum_in / n_in.max(1) as f64, sum_out / n_out.max(1) as f64)
    }
}

pub fn compute_saliency(artifact: &ModelArtifact, image: &RgbImage, frame_id: Option<&str>) -> SaliencyMap {
    compute_saliency_with(artifact, image, frame_id, SaliencyMethod::default())
}

pub fn compute_saliency_bytes(
    artifact: &ModelArtifact,
    bytes: &[u8],
    frame_id: Option<&str>,
) -> Result<SaliencyMap, SaliencyError> {
    let image = decode_image(bytes).map_err(|e| SaliencyError::Decode(e.to_string()))?;
    Ok(compute_saliency(artifact, &image, frame_id))
}

pub fn compute_saliency_with(
    artifact: &ModelArtifact,
    image: &RgbImage,
    frame_id: Option<&str>,
    method: SaliencyMethod,
) -> SaliencyMap {
    let pre = &artifact.descriptor.preprocessing;
    let net = artifact.network();
    let prepared = resize_shortest_side(image, pre.saliency_side);
    let features = net.features(&to_input(&prepared, pre));
    let logits = net.head(&features);
    let predicted = if logits[FLUORESCENT_CLASS] > logits[1 - FLUORESCENT_CLASS] {
        FLUORESCENT_CLASS
    } else {
        1 - FLUORESCENT_CLASS
    };

    let baseline = match method {
        SaliencyMethod::GradCam => None,
        SaliencyMethod::GradCamBaseline => {
            let flat = RgbImage::from_pixel(prepared.width(), prepared.height(), mean_colour(&prepared));
            Some(net.features(&to_input(&flat, pre)))
        }
    };

    let head = net.head_weights();
    let channels = features.c;
    let grid = features.plane_len();
    let mut cam = vec![0.0f64; grid];
    for c in 0..channels {
        let weight =
            (head[predicted * channels + c] - head[(1 - predicted) * channels + c]) as f64 / grid as f64;
        let plane = features.map(c, 0);
        match &baseline {
            Some(b) => {
                for ((acc, &a), &a0) in cam.iter_mut().zip(plane).zip(b.map(c, 0)) {
                    *acc += weight * (a - a0) as f64;
                }
            }
            None => {
                for (acc, &a) in cam.iter_mut().zip(plane) {
                    *acc += weight * a as f64;
                }
            }
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }

    let values = normalize(upsample_bilinear(&cam, &features, image.width(), image.height()));
    SaliencyMap {
        values,
        width: image.width(),
        height: image.height(),
        frame_id: frame_id.map(str::to_string),
        model_version: artifact.version().to_string(),
        method_id: method.id().to_string(),
    }
}

fn mean_colour(image: &RgbImage) -> Rgb<u8> {
    let mut sum = [0u64; 3];
    for px in image.pixels() {
        for (s, &v) in sum.iter_mut().zip(&px.0) {
            *s += v as u64;
        }
    }
    let n = (image.width() as u64 * image.height() as u64).max(1);
    Rgb(sum.map(|s| ((s + n / 2) / n) as u8))
}

/// Half-pixel-centred bilinear interpolation from the activation grid.
fn upsample_bilinear(cam: &[f64], grid: &Act, width: u32, height: u32) -> Vec<f32> {
    let (gh, gw) = (grid.h, grid.w);
    let axis = |dst: u32, dst_len: u32, src_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src_len - 1), s - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, width, gw)).collect();
    let mut out = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        let (y0, y1, ty) = axis(y, height, gh);
        for &(x0, x1, tx) in &xs {
            let top = cam[y0 * gw + x0] * (1.0 - tx) + cam[y0 * gw + x1] * tx;
            let bottom = cam[y1 * gw + x0] * (1.0 - tx) + cam[y1 * gw + x1] * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; a flat field becomes all zeros.
fn normalize(mut values: Vec<f32>) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    // also catches NaN
    if range.is_nan() || range <= f32::EPSILON * hi.abs().max(1e-12) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return values;
    }
    for v in &mut values {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
    values
}

/// Blends pure red over the image with weight `opacity * v`. On the bright
/// swab and tissue background hotter pixels turn a denser, darker red.
///
/// The target is a fixed red rather than a ramp that darkens with `v`: that
/// way the red channel never falls and green and blue never rise as `v`
/// grows, so red dominance stays monotone even after rounding to 8 bits.
/// Pixels with zero weight are untouched.
pub fn render_overlay(image: &RgbImage, map: &SaliencyMap, opacity: f64) -> Result<RgbImage, SaliencyError> {
    if !(0.0..=1.0).contains(&opacity) {
        return Err(SaliencyError::InvalidOpacity(opacity));
    }
    if image.dimensions() != (map.width, map.height) {
        return Err(SaliencyError::DimensionMismatch {
            map_width: map.width,
            map_height: map.height,
            image_width: image.width(),
            image_height: image.height(),
        });
    }
    let mut out = image.clone();
    for (px, &v) in out.pixels_mut().zip(&map.values) {
        let v = v.clamp(0.0, 1.0) as f64;
        let alpha = opacity * v;
        if alpha <= 0.0 {
            continue;
        }
        let [r, g, b] = px.0.map(|c| c as f64 * (1.0 - alpha));
        *px = Rgb([
            (r + alpha * 255.0).round() as u8,
            g.round() as u8,
            b.round() as u8,
        ]);
    }
    Ok(out)
}

/// Greyscale rendering of the raw field.
pub fn map_to_image(map: &SaliencyMap) -> image::GrayImage {
    image::GrayImage::from_fn(map.width, map.height, |x, y| {
        image::Luma([(map.get(x, y) * 255.0).round() as u8])
    })
}
