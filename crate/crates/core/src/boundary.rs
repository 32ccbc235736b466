//! Perfusion boundary by strip-wise classification.
//!
//! The frame is cut into fixed-width strips along the colon's longitudinal
//! axis, every strip is classified on its own, and the boundary is placed at
//! the distal edge of the most distal fluorescent strip. Coordinates are
//! along the chosen axis: x for horizontal, y for vertical.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{apply_threshold, ModelArtifact};
use crate::imaging::save_jpeg;
use crate::types::{Axis, DistalDirection, Label};

pub const DEFAULT_STRIP_WIDTH: u32 = 100;

/// Quality of exported strip JPEGs.
const STRIP_JPEG_QUALITY: u8 = 95;

const FLUORESCENT_BOX: Rgb<u8> = Rgb([0, 200, 0]);
const DARK_BOX: Rgb<u8> = Rgb([128, 128, 128]);
const BOUNDARY_LINE: Rgb<u8> = Rgb([255, 255, 0]);
const LINE_WIDTH: u32 = 3;

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("image extent {extent} px along the axis is narrower than the strip width {strip_width} px")]
    ImageTooNarrow { extent: u32, strip_width: u32 },
    #[error("strip width must be at least 1 px")]
    InvalidStripWidth,
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("no strips to analyse")]
    EmptyInput,
    #[error("strip intervals are not ordered, disjoint and non-empty")]
    IncoherentStrips,
    /// Not a failure: no strip is fluorescent. Carries the full estimate
    /// (with `boundary_x` absent) so callers can still show the strips.
    #[error("no strip was classified as fluorescent")]
    NoFluorescentRegion(Box<BoundaryEstimate>),
    #[error("cannot export strip {path}: {reason}")]
    Export { path: PathBuf, reason: String },
}

/// One strip cut from a frame; `x0..x1` runs along the tiling axis.
#[derive(Debug, Clone)]
pub struct Strip {
    pub index: usize,
    pub x0: u32,
    pub x1: u32,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripClassification {
    pub index: usize,
    pub x0: u32,
    pub x1: u32,
    pub probability: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEstimate {
    pub boundary_x: Option<u32>,
    pub distal_direction: DistalDirection,
    /// Ordered from the proximal end; `index` counts from there.
    pub strips: Vec<StripClassification>,
    /// False when a non-fluorescent strip lies proximal of the boundary strip.
    pub contiguous: bool,
    /// Every strip is fluorescent, so the front may lie beyond the frame.
    pub saturated: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOptions {
    pub strip_width: u32,
    pub axis: Axis,
    pub distal_direction: DistalDirection,
    /// Falls back to the artifact's threshold.
    pub threshold: Option<f64>,
}

impl Default for BoundaryOptions {
    fn default() -> Self {
        Self {
            strip_width: DEFAULT_STRIP_WIDTH,
            axis: Axis::Horizontal,
            distal_direction: DistalDirection::IncreasingX,
            threshold: None,
        }
    }
}

/// Intervals partitioning `[0, extent)`: full strips, then a shorter
/// remainder strip when `extent` is not a multiple of `strip_width`.
pub fn tile_intervals(extent: u32, strip_width: u32) -> Result<Vec<(u32, u32)>, BoundaryError> {
    if strip_width == 0 {
        return Err(BoundaryError::InvalidStripWidth);
    }
    if extent < strip_width {
        return Err(BoundaryError::ImageTooNarrow { extent, strip_width });
    }
    Ok((0..extent.div_ceil(strip_width))
        .map(|i| (i * strip_width, ((i + 1) * strip_width).min(extent)))
        .collect())
}

pub fn tile(image: &RgbImage, strip_width: u32, axis: Axis) -> Result<Vec<Strip>, BoundaryError> {
    let (w, h) = image.dimensions();
    let extent = match axis {
        Axis::Horizontal => w,
        Axis::Vertical => h,
    };
    Ok(tile_intervals(extent, strip_width)?
        .into_iter()
        .enumerate()
        .map(|(index, (x0, x1))| {
            let view = match axis {
                Axis::Horizontal => imageops::crop_imm(image, x0, 0, x1 - x0, h),
                Axis::Vertical => imageops::crop_imm(image, 0, x0, w, x1 - x0),
            };
            Strip {
                index,
                x0,
                x1,
                image: view.to_image(),
            }
        })
        .collect())
}

/// Classifies every strip with the artifact's preprocessing. Order is preserved.
pub fn classify_strips(
    artifact: &ModelArtifact,
    strips: &[Strip],
    threshold: f64,
) -> Vec<StripClassification> {
    strips
        .iter()
        .map(|s| {
            let r = artifact.predict_with_threshold(&s.image, threshold);
            StripClassification {
                index: s.index,
                x0: s.x0,
                x1: s.x1,
                probability: r.probability,
                label: r.label,
            }
        })
        .collect()
}

/// Applies the most-distal rule. Strips are relabelled from their
/// probabilities with `threshold` (strict `>`), re-ordered and re-indexed from
/// the proximal end.
pub fn estimate_boundary(
    strips: &[StripClassification],
    distal_direction: DistalDirection,
    threshold: f64,
) -> Result<BoundaryEstimate, BoundaryError> {
    if strips.is_empty() {
        return Err(BoundaryError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(BoundaryError::InvalidThreshold(threshold));
    }
    let mut ordered: Vec<StripClassification> = strips.to_vec();
    ordered.sort_by_key(|s| s.x0);
    let coherent = ordered.iter().all(|s| s.x0 < s.x1) && ordered.windows(2).all(|p| p[0].x1 <= p[1].x0);
    if !coherent {
        return Err(BoundaryError::IncoherentStrips);
    }
    if distal_direction == DistalDirection::DecreasingX {
        ordered.reverse();
    }
    for (i, s) in ordered.iter_mut().enumerate() {
        s.index = i;
        s.label = apply_threshold(s.probability, threshold);
    }

    let last = ordered.iter().rposition(|s| s.label.is_positive());
    let mut estimate = BoundaryEstimate {
        boundary_x: None,
        distal_direction,
        contiguous: true,
        saturated: false,
        threshold,
        strips: ordered,
    };
    let Some(last) = last else {
        return Err(BoundaryError::NoFluorescentRegion(Box::new(estimate)));
    };
    let strip = &estimate.strips[last];
    estimate.boundary_x = Some(match distal_direction {
        DistalDirection::IncreasingX => strip.x1,
        DistalDirection::DecreasingX => strip.x0,
    });
    estimate.contiguous = estimate.strips[..last].iter().all(|s| s.label.is_positive());
    estimate.saturated = last + 1 == estimate.strips.len();
    Ok(estimate)
}

/// Tiles, classifies and estimates in one go.
pub fn analyze(
    artifact: &ModelArtifact,
    image: &RgbImage,
    options: &BoundaryOptions,
) -> Result<BoundaryEstimate, BoundaryError> {
    let threshold = options.threshold.unwrap_or(artifact.threshold());
    if !(0.0..=1.0).contains(&threshold) {
        return Err(BoundaryError::InvalidThreshold(threshold));
    }
    let strips = tile(image, options.strip_width, options.axis)?;
    let classified = classify_strips(artifact, &strips, threshold);
    estimate_boundary(&classified, options.distal_direction, threshold)
}

/// Writes each strip as `strip-NNN.jpg` (spatial order) and returns the paths.
pub fn export_strips(strips: &[Strip], dir: &Path) -> Result<Vec<PathBuf>, BoundaryError> {
    fs::create_dir_all(dir).map_err(|e| BoundaryError::Export {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    strips
        .iter()
        .map(|s| {
            let path = dir.join(format!("strip-{:03}.jpg", s.index));
            save_jpeg(&s.image, &path, STRIP_JPEG_QUALITY).map_err(|e| BoundaryError::Export {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            Ok(path)
        })
        .collect()
}

/// Draws green outlines around fluorescent strips, grey around the others,
/// and a yellow line across the frame at the boundary.
pub fn annotate(image: &RgbImage, estimate: &BoundaryEstimate, axis: Axis) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = out.dimensions();
    // (along, across) to (x, y)
    let to_xy = |a: u32, c: u32| match axis {
        Axis::Horizontal => (a, c),
        Axis::Vertical => (c, a),
    };
    let across = match axis {
        Axis::Horizontal => h,
        Axis::Vertical => w,
    };
    let put = |out: &mut RgbImage, a: u32, c: u32, colour: Rgb<u8>| {
        let (x, y) = to_xy(a, c);
        if x < w && y < h {
            out.put_pixel(x, y, colour);
        }
    };
    for s in &estimate.strips {
        let colour = if s.label.is_positive() {
            FLUORESCENT_BOX
        } else {
            DARK_BOX
        };
        let t = LINE_WIDTH.min((s.x1 - s.x0).div_ceil(2)).min(across.div_ceil(2));
        for a in s.x0..s.x1 {
            for c in 0..across {
                let edge = a < s.x0 + t || a >= s.x1 - t || c < t || c >= across - t;
                if edge {
                    put(&mut out, a, c, colour);
                }
            }
        }
    }
    if let Some(b) = estimate.boundary_x {
        let start = b.saturating_sub(LINE_WIDTH / 2 + 1);
        for a in start..start + LINE_WIDTH {
            for c in 0..across {
                put(&mut out, a, c, BOUNDARY_LINE);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn strips_from(probs: &[f64], width: u32) -> Vec<StripClassification> {
        probs
            .iter()
            .enumerate()
            .map(|(i, &p)| StripClassification {
                index: i,
                x0: i as u32 * width,
                x1: (i as u32 + 1) * width,
                probability: p,
                label: apply_threshold(p, 0.8),
            })
            .collect()
    }

    #[test]
    fn tiling_keeps_a_remainder_strip() {
        let iv = tile_intervals(1440, 100).unwrap();
        assert_eq!(iv.len(), 15);
        assert_eq!(iv[13], (1300, 1400));
        assert_eq!(iv[14], (1400, 1440));
        assert_eq!(
            tile_intervals(300, 100).unwrap(),
            vec![(0, 100), (100, 200), (200, 300)]
        );
        assert!(matches!(
            tile_intervals(90, 100),
            Err(BoundaryError::ImageTooNarrow {
                extent: 90,
                strip_width: 100
            })
        ));
        assert!(matches!(
            tile_intervals(90, 0),
            Err(BoundaryError::InvalidStripWidth)
        ));
    }

    #[test]
    fn tile_cuts_along_either_axis() {
        let img = RgbImage::from_fn(250, 120, |x, y| Rgb([x as u8, y as u8, 0]));
        let h = tile(&img, 100, Axis::Horizontal).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h[2].image.dimensions(), (50, 120));
        assert_eq!(*h[1].image.get_pixel(0, 7), Rgb([100, 7, 0]));
        let v = tile(&img, 100, Axis::Vertical).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v[1].image.dimensions(), (250, 20));
        assert_eq!(*v[1].image.get_pixel(3, 0), Rgb([3, 100, 0]));
    }

    #[test]
    fn most_distal_rule_examples() {
        let e = estimate_boundary(
            &strips_from(&[0.99, 0.95, 0.90, 0.85, 0.40, 0.20], 100),
            DistalDirection::IncreasingX,
            0.8,
        )
        .unwrap();
        assert_eq!(e.boundary_x, Some(400));
        assert!(e.contiguous && !e.saturated);

        let e = estimate_boundary(
            &strips_from(&[0.9, 0.2, 0.9, 0.1], 100),
            DistalDirection::IncreasingX,
            0.8,
        )
        .unwrap();
        assert_eq!(e.boundary_x, Some(300));
        assert!(!e.contiguous);

        match estimate_boundary(
            &strips_from(&[0.1, 0.2, 0.3], 100),
            DistalDirection::IncreasingX,
            0.8,
        ) {
            Err(BoundaryError::NoFluorescentRegion(e)) => {
                assert_eq!(e.boundary_x, None);
                assert_eq!(e.strips.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            estimate_boundary(&[], DistalDirection::IncreasingX, 0.8),
            Err(BoundaryError::EmptyInput)
        ));
    }

    #[test]
    fn relabeling_cached_probabilities() {
        // estimate_boundary relabels from the probabilities, so clients can re-threshold
        let strips = strips_from(&[0.99, 0.95, 0.90, 0.85, 0.40, 0.20], 100);
        let e = estimate_boundary(&strips, DistalDirection::IncreasingX, 0.97).unwrap();
        assert_eq!(e.boundary_x, Some(100));
        assert_eq!(e.strips.iter().filter(|s| s.label.is_positive()).count(), 1);
        assert!(matches!(
            estimate_boundary(&strips, DistalDirection::IncreasingX, 0.999),
            Err(BoundaryError::NoFluorescentRegion(_))
        ));
    }

    #[test]
    fn all_fluorescent_is_saturated() {
        let e =
            estimate_boundary(&strips_from(&[0.9, 0.95], 100), DistalDirection::IncreasingX, 0.8).unwrap();
        assert_eq!(e.boundary_x, Some(200));
        assert!(e.saturated && e.contiguous);
        let e =
            estimate_boundary(&strips_from(&[0.9, 0.95], 100), DistalDirection::DecreasingX, 0.8).unwrap();
        assert_eq!(e.boundary_x, Some(0));
    }

    #[test]
    fn decreasing_direction_reindexes_from_the_proximal_end() {
        let e = estimate_boundary(
            &strips_from(&[0.1, 0.2, 0.9, 0.95], 100),
            DistalDirection::DecreasingX,
            0.8,
        )
        .unwrap();
        assert_eq!(e.boundary_x, Some(200));
        assert_eq!(e.strips[0].x0, 300);
        assert_eq!(
            e.strips.iter().map(|s| s.index).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        assert!(e.contiguous);
    }

    #[test]
    fn threshold_is_applied_strictly() {
        let strips = strips_from(&[0.8, 0.1], 100);
        assert!(matches!(
            estimate_boundary(&strips, DistalDirection::IncreasingX, 0.8),
            Err(BoundaryError::NoFluorescentRegion(_))
        ));
        let e = estimate_boundary(&strips, DistalDirection::IncreasingX, 0.79).unwrap();
        assert_eq!(e.boundary_x, Some(100));
    }

    #[test]
    fn overlapping_strips_are_rejected() {
        let mut s = strips_from(&[0.9, 0.9], 100);
        s[1].x0 = 50;
        assert!(matches!(
            estimate_boundary(&s, DistalDirection::IncreasingX, 0.8),
            Err(BoundaryError::IncoherentStrips)
        ));
    }

    #[test]
    fn annotation_marks_strips_and_boundary() {
        let img = RgbImage::from_pixel(300, 50, Rgb([10, 10, 10]));
        let e = estimate_boundary(
            &strips_from(&[0.9, 0.1, 0.1], 100),
            DistalDirection::IncreasingX,
            0.8,
        )
        .unwrap();
        let out = annotate(&img, &e, Axis::Horizontal);
        assert_eq!(*out.get_pixel(50, 0), FLUORESCENT_BOX);
        assert_eq!(*out.get_pixel(150, 49), DARK_BOX);
        assert_eq!(*out.get_pixel(99, 25), BOUNDARY_LINE);
        assert_eq!(*out.get_pixel(50, 25), Rgb([10, 10, 10]));
    }

    #[test]
    fn export_writes_one_jpeg_per_strip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(250, 40, Rgb([200, 100, 50]));
        let strips = tile(&img, 100, Axis::Horizontal).unwrap();
        let paths = export_strips(&strips, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        let last = image::open(&paths[2]).unwrap();
        assert_eq!((last.width(), last.height()), (50, 40));
    }

    proptest! {
        #[test]
        fn intervals_partition_the_extent(extent in 1u32..5000, strip_width in 1u32..600) {
            prop_assume!(strip_width <= extent);
            let iv = tile_intervals(extent, strip_width).unwrap();
            prop_assert_eq!(iv.len() as u32, extent.div_ceil(strip_width));
            prop_assert_eq!(iv[0].0, 0);
            prop_assert_eq!(iv.last().unwrap().1, extent);
            for pair in iv.windows(2) {
                prop_assert_eq!(pair[0].1, pair[1].0);
            }
            prop_assert!(iv.iter().all(|&(a, b)| a < b && b - a <= strip_width));
        }

        #[test]
        fn mirroring_flips_the_boundary(labels in prop::collection::vec(any::<bool>(), 1..20), width in 1u32..150) {
            let probs: Vec<f64> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
            let extent = width * probs.len() as u32;
            let strips = strips_from(&probs, width);
            let mirrored: Vec<StripClassification> = strips
                .iter()
                .map(|s| StripClassification { x0: extent - s.x1, x1: extent - s.x0, ..s.clone() })
                .collect();
            for dir in [DistalDirection::IncreasingX, DistalDirection::DecreasingX] {
                let a = estimate_boundary(&strips, dir, 0.8);
                let b = estimate_boundary(&mirrored, dir.flipped(), 0.8);
                match (a, b) {
                    (Ok(a), Ok(b)) => {
                        prop_assert_eq!(b.boundary_x, a.boundary_x.map(|x| extent - x));
                        prop_assert_eq!(a.contiguous, b.contiguous);
                    }
                    (Err(BoundaryError::NoFluorescentRegion(_)), Err(BoundaryError::NoFluorescentRegion(_))) => {}
                    (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
                }
            }
        }
    }
}
