//! Video to frame extraction.
//!
//! GIF and animated PNG are decoded natively. Other containers are handed to
//! an `ffmpeg` executable when one is on `PATH`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::gif::GifDecoder;
use image::codecs::png::PngDecoder;
use image::{AnimationDecoder, DynamicImage, Frames, RgbImage};

use super::{DatasetError, FrameRecord};
use crate::imaging::{load_image, save_png};
use crate::types::{CameraId, Split};

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub patient_id: String,
    pub camera_id: CameraId,
    /// Keep every `sample_stride`-th frame, starting with frame 0.
    pub sample_stride: usize,
    pub split: Split,
}

/// Extracts every `sample_stride`-th frame of `video` into `out_dir` as PNG.
/// Returned records are unlabeled.
pub fn ingest_video(
    video: &Path,
    options: &IngestOptions,
    out_dir: &Path,
) -> Result<Vec<FrameRecord>, DatasetError> {
    if options.sample_stride == 0 {
        return Err(DatasetError::InvalidStride);
    }
    fs::create_dir_all(out_dir)?;
    let stem = video
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let prefix = format!("{}-{}", options.patient_id, stem);

    let mut magic = [0u8; 8];
    let n = File::open(video)?.read(&mut magic)?;
    let magic = &magic[..n];

    let mut records = Vec::new();
    let mut sink = |index: usize, frame: RgbImage| -> Result<(), DatasetError> {
        let frame_id = format!("{prefix}-f{index:06}");
        let path = out_dir.join(format!("{frame_id}.png"));
        save_png(&frame, &path).map_err(|e| DatasetError::Decode {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        records.push(FrameRecord {
            frame_id,
            patient_id: options.patient_id.clone(),
            camera_id: options.camera_id,
            path,
            label: None,
            split: options.split,
            width: frame.width(),
            height: frame.height(),
            truth_boundary_x: None,
        });
        Ok(())
    };

    let decode_err = |e: image::ImageError| DatasetError::Decode {
        path: video.to_path_buf(),
        reason: e.to_string(),
    };
    if magic.starts_with(b"GIF8") {
        let decoder = GifDecoder::new(BufReader::new(File::open(video)?)).map_err(decode_err)?;
        sample_frames(decoder.into_frames(), options.sample_stride, video, &mut sink)?;
    } else if magic.starts_with(b"\x89PNG\r\n\x1a\n") {
        let decoder = PngDecoder::new(BufReader::new(File::open(video)?)).map_err(decode_err)?;
        if decoder.is_apng().map_err(decode_err)? {
            let frames = decoder.apng().map_err(decode_err)?.into_frames();
            sample_frames(frames, options.sample_stride, video, &mut sink)?;
        } else {
            let still = load_image(video).map_err(decode_err)?;
            sink(0, still)?;
        }
    } else {
        extract_with_ffmpeg(video, options.sample_stride, &mut sink)?;
    }

    if records.is_empty() {
        return Err(DatasetError::EmptyVideo(video.to_path_buf()));
    }
    Ok(records)
}

fn sample_frames(
    frames: Frames<'_>,
    stride: usize,
    video: &Path,
    sink: &mut dyn FnMut(usize, RgbImage) -> Result<(), DatasetError>,
) -> Result<(), DatasetError> {
    for (index, frame) in frames.enumerate() {
        let frame = frame.map_err(|e| DatasetError::Decode {
            path: video.to_path_buf(),
            reason: format!("frame {index}: {e}"),
        })?;
        if index % stride == 0 {
            sink(index, DynamicImage::ImageRgba8(frame.into_buffer()).into_rgb8())?;
        }
    }
    Ok(())
}

fn extract_with_ffmpeg(
    video: &Path,
    stride: usize,
    sink: &mut dyn FnMut(usize, RgbImage) -> Result<(), DatasetError>,
) -> Result<(), DatasetError> {
    let scratch = std::env::temp_dir().join(format!(
        "fa-ingest-{}-{}",
        std::process::id(),
        crate::imaging::fnv1a(video.to_string_lossy().as_bytes())
    ));
    fs::create_dir_all(&scratch)?;
    let result = run_ffmpeg(video, stride, &scratch).and_then(|_| {
        let mut files: Vec<PathBuf> = fs::read_dir(&scratch)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        files.sort();
        for (k, file) in files.iter().enumerate() {
            let img = load_image(file).map_err(|e| DatasetError::Decode {
                path: file.clone(),
                reason: e.to_string(),
            })?;
            sink(k * stride, img)?;
        }
        Ok(())
    });
    let _ = fs::remove_dir_all(&scratch);
    result
}

fn run_ffmpeg(video: &Path, stride: usize, scratch: &Path) -> Result<(), DatasetError> {
    let output = Command::new("ffmpeg")
        .args(["-v", "error", "-nostdin", "-i"])
        .arg(video)
        .args([
            "-vf",
            &format!("select=not(mod(n\\,{stride}))"),
            "-fps_mode",
            "vfr",
        ])
        .arg(scratch.join("%08d.png"))
        .output()
        .map_err(|e| DatasetError::Decode {
            path: video.to_path_buf(),
            reason: format!("unsupported container and ffmpeg unavailable: {e}"),
        })?;
    if !output.status.success() {
        return Err(DatasetError::Decode {
            path: video.to_path_buf(),
            reason: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(())
}

/// Writes records (labeled or not) as JSON Lines without manifest validation.
pub fn write_records_jsonl(records: &[FrameRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
