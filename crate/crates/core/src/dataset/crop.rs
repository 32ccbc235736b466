use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::imaging::{derive_seed, fnv1a};

pub const DEFAULT_CROP_SIZE: u32 = 224;

/// Square random-crop augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub crop_size: u32,
    pub seed: u64,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            crop_size: DEFAULT_CROP_SIZE,
            seed: 0,
        }
    }
}

/// Top-left corner of the crop for one draw. Depends only on
/// `(seed, frame_id, draw_index)` and the frame size.
pub fn crop_offsets(
    spec: &CropSpec,
    width: u32,
    height: u32,
    frame_id: &str,
    draw_index: u64,
) -> Result<(u32, u32), DatasetError> {
    let size = spec.crop_size;
    if size == 0 || size > width || size > height {
        return Err(DatasetError::CropTooLarge {
            crop: size,
            width,
            height,
        });
    }
    let seed = derive_seed(spec.seed, &[fnv1a(frame_id.as_bytes()), draw_index]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rng.random_range(0..=width - size);
    let y = rng.random_range(0..=height - size);
    Ok((x, y))
}

pub fn random_crop(
    image: &RgbImage,
    spec: &CropSpec,
    frame_id: &str,
    draw_index: u64,
) -> Result<RgbImage, DatasetError> {
    let (w, h) = image.dimensions();
    let (x, y) = crop_offsets(spec, w, h, frame_id, draw_index)?;
    Ok(imageops::crop_imm(image, x, y, spec.crop_size, spec.crop_size).to_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn offsets_stay_in_bounds_for_full_frames() {
        let spec = CropSpec {
            crop_size: 224,
            seed: 3,
        };
        for draw in 0..500 {
            let (x, y) = crop_offsets(&spec, 1440, 1080, "f", draw).unwrap();
            assert!(x <= 1216 && y <= 856);
        }
    }

    #[test]
    fn full_size_crop_is_identity() {
        let img = RgbImage::from_fn(20, 20, |x, y| Rgb([x as u8, y as u8, 7]));
        let spec = CropSpec {
            crop_size: 20,
            seed: 1,
        };
        assert_eq!(crop_offsets(&spec, 20, 20, "a", 5).unwrap(), (0, 0));
        assert_eq!(random_crop(&img, &spec, "a", 5).unwrap(), img);
    }

    #[test]
    fn oversized_crop_fails() {
        let spec = CropSpec {
            crop_size: 2048,
            seed: 0,
        };
        assert!(matches!(
            crop_offsets(&spec, 1440, 1080, "f", 0),
            Err(DatasetError::CropTooLarge { crop: 2048, .. })
        ));
    }

    #[test]
    fn draws_are_reproducible_and_vary() {
        let spec = CropSpec {
            crop_size: 64,
            seed: 9,
        };
        let a = crop_offsets(&spec, 640, 480, "frame-1", 0).unwrap();
        assert_eq!(a, crop_offsets(&spec, 640, 480, "frame-1", 0).unwrap());
        let others: Vec<_> = (1..20)
            .map(|d| crop_offsets(&spec, 640, 480, "frame-1", d).unwrap())
            .collect();
        assert!(others.iter().any(|o| *o != a));
    }

    proptest! {
        #[test]
        fn crop_is_a_contiguous_subrectangle(
            w in 1u32..48, h in 1u32..48, size in 1u32..48, seed in any::<u64>(), draw in 0u64..1000
        ) {
            let img = RgbImage::from_fn(w, h, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
            let spec = CropSpec { crop_size: size, seed };
            match random_crop(&img, &spec, "p", draw) {
                Ok(crop) => {
                    prop_assert_eq!(crop.dimensions(), (size, size));
                    let (x0, y0) = crop_offsets(&spec, w, h, "p", draw).unwrap();
                    for (x, y, px) in crop.enumerate_pixels() {
                        prop_assert_eq!(*px, *img.get_pixel(x0 + x, y0 + y));
                    }
                }
                Err(DatasetError::CropTooLarge { .. }) => prop_assert!(size > w || size > h),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
