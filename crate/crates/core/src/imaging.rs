//! Image IO and resampling helpers shared by the pipeline stages.

use std::fs::File;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::{self, FilterType};
use image::{ImageEncoder, ImageReader, RgbImage};

/// Decodes PNG or JPEG bytes (format sniffed from the content).
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, image::ImageError> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    Ok(reader.decode()?.into_rgb8())
}

pub fn load_image(path: &Path) -> Result<RgbImage, image::ImageError> {
    Ok(ImageReader::open(path)?
        .with_guessed_format()?
        .decode()?
        .into_rgb8())
}

/// Writes a PNG with fast deflate settings. Training frames are large and
/// written once, so encode speed matters more than size.
pub fn save_png(image: &RgbImage, path: &Path) -> Result<(), image::ImageError> {
    let writer = BufWriter::new(File::create(path)?);
    let encoder = PngEncoder::new_with_quality(writer, CompressionType::Fast, PngFilter::Sub);
    encoder.write_image(
        image.as_raw(),
        image.width(),
        image.height(),
        image::ExtendedColorType::Rgb8,
    )
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(
        image.as_raw(),
        image.width(),
        image.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

pub fn save_jpeg(image: &RgbImage, path: &Path, quality: u8) -> Result<(), image::ImageError> {
    let writer = BufWriter::new(File::create(path)?);
    JpegEncoder::new_with_quality(writer, quality).encode_image(image)
}

/// Resizes so the shorter side equals `side`, keeping the aspect ratio.
pub fn resize_shortest_side(image: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let (nw, nh) = if w <= h {
        (side, scaled(h, side, w))
    } else {
        (scaled(w, side, h), side)
    };
    if (nw, nh) == (w, h) {
        return image.clone();
    }
    imageops::resize(image, nw, nh, FilterType::Triangle)
}

fn scaled(long: u32, side: u32, short: u32) -> u32 {
    ((long as f64 * side as f64 / short as f64).round() as u32).max(side)
}

/// Inference preprocessing: shortest side to `side`, then a centered `side`×`side` crop.
pub fn resize_center_crop(image: &RgbImage, side: u32) -> RgbImage {
    let resized = resize_shortest_side(image, side);
    let (w, h) = resized.dimensions();
    let x = (w - side) / 2;
    let y = (h - side) / 2;
    imageops::crop_imm(&resized, x, y, side, side).to_image()
}

/// Resizes to exactly `side`×`side` (used on square training crops).
pub fn resize_square(image: &RgbImage, side: u32) -> RgbImage {
    if image.dimensions() == (side, side) {
        return image.clone();
    }
    imageops::resize(image, side, side, FilterType::Triangle)
}

/// FNV-1a over bytes; stable across platforms and toolchains.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and a list of stream tags.
pub(crate) fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}
