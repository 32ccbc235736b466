//! Labeled frame inventory with patient and camera provenance.
//!
//! A [`DatasetManifest`] can only be obtained through [`build_manifest`] (or
//! [`DatasetManifest::read_jsonl`], which calls it), so every manifest in
//! memory or on disk is patient-disjoint across splits and has unique,
//! labeled frames.

mod crop;
mod video;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CameraId, Label, Split};

pub use crop::{crop_offsets, random_crop, CropSpec, DEFAULT_CROP_SIZE};
pub use video::{ingest_video, write_records_jsonl, IngestOptions};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("patient `{patient_id}` appears in both train and holdout splits")]
    SplitLeakage { patient_id: String },
    #[error("frame `{frame_id}` has no label")]
    UnlabeledFrame { frame_id: String },
    #[error("duplicate frame id `{frame_id}`")]
    DuplicateFrameId { frame_id: String },
    #[error("fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("crop {crop}px does not fit a {width}x{height} frame")]
    CropTooLarge { crop: u32, width: u32, height: u32 },
    #[error("sample stride must be >= 1")]
    InvalidStride,
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("video {0} contains no frames")]
    EmptyVideo(PathBuf),
    #[error("manifest line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unsupported manifest schema version {0}")]
    SchemaVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub patient_id: String,
    pub camera_id: CameraId,
    pub path: PathBuf,
    /// Unset straight after ingestion; required for manifest inclusion.
    pub label: Option<Label>,
    pub split: Split,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_boundary_x: Option<u32>,
}

impl FrameRecord {
    /// Label of a record that passed manifest validation.
    pub fn label(&self) -> Label {
        self.label.expect("manifest records are labeled")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetManifest {
    schema_version: u32,
    records: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SplitSummary {
    pub patients: usize,
    pub frames: usize,
    pub positives: usize,
    /// `None` for an empty split.
    pub positive_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ManifestSummary {
    pub train: SplitSummary,
    pub holdout: SplitSummary,
}

/// Validates records into a manifest.
pub fn build_manifest(records: Vec<FrameRecord>) -> Result<DatasetManifest, DatasetError> {
    let mut ids = HashSet::with_capacity(records.len());
    let mut patient_split: HashMap<&str, Split> = HashMap::new();
    for r in &records {
        if r.label.is_none() {
            return Err(DatasetError::UnlabeledFrame {
                frame_id: r.frame_id.clone(),
            });
        }
        if !ids.insert(r.frame_id.as_str()) {
            return Err(DatasetError::DuplicateFrameId {
                frame_id: r.frame_id.clone(),
            });
        }
        match patient_split.insert(r.patient_id.as_str(), r.split) {
            Some(prev) if prev != r.split => {
                return Err(DatasetError::SplitLeakage {
                    patient_id: r.patient_id.clone(),
                })
            }
            _ => {}
        }
    }
    Ok(DatasetManifest {
        schema_version: SCHEMA_VERSION,
        records,
    })
}

impl DatasetManifest {
    pub fn empty() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            records: Vec::new(),
        }
    }

    pub fn schema_version(&self) -> u32 {
        self.schema_version
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FrameRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Concatenates two manifests, re-validating the result.
    pub fn merge(self, other: DatasetManifest) -> Result<DatasetManifest, DatasetError> {
        let mut records = self.records;
        records.extend(other.records);
        build_manifest(records)
    }

    pub fn summary(&self) -> ManifestSummary {
        let summarize = |split: Split| {
            let mut patients = BTreeSet::new();
            let mut frames = 0;
            let mut positives = 0;
            for r in self.split(split) {
                patients.insert(r.patient_id.as_str());
                frames += 1;
                positives += usize::from(r.label().is_positive());
            }
            SplitSummary {
                patients: patients.len(),
                frames,
                positives,
                positive_fraction: (frames > 0).then(|| positives as f64 / frames as f64),
            }
        };
        ManifestSummary {
            train: summarize(Split::Train),
            holdout: summarize(Split::Holdout),
        }
    }

    /// Cameras seen in the train split, i.e. the "internal" equipment.
    pub fn train_cameras(&self) -> BTreeSet<CameraId> {
        self.split(Split::Train).map(|r| r.camera_id).collect()
    }

    /// Writes the JSON Lines form: a `{"schema_version": N}` header, then one
    /// record per line. Paths under the manifest's directory are stored relative.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        let base = path.parent().unwrap_or(Path::new(""));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        let mut out = BufWriter::new(File::create(path)?);
        let header = serde_json::json!({ "schema_version": self.schema_version });
        writeln!(out, "{header}")?;
        for r in &self.records {
            let mut r = r.clone();
            let abs = r.path.canonicalize().unwrap_or_else(|_| r.path.clone());
            if let Ok(rel) = abs.strip_prefix(&base) {
                r.path = rel.to_path_buf();
            }
            let line = serde_json::to_string(&r).map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads and validates a JSON Lines manifest. Relative record paths are
    /// resolved against the manifest's directory.
    pub fn read_jsonl(path: &Path) -> Result<DatasetManifest, DatasetError> {
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            reason: "missing schema header".into(),
        })?;
        let header: serde_json::Value = serde_json::from_str(&header?).map_err(|e| DatasetError::Parse {
            line: 1,
            reason: e.to_string(),
        })?;
        let version = header
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or(DatasetError::Parse {
                line: 1,
                reason: "header lacks schema_version".into(),
            })? as u32;
        if version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion(version));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut r: FrameRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
            records.push(r);
        }
        build_manifest(records)
    }
}

/// Frame-level random partition of the train split into (fit, validation).
/// The validation part has `round(fraction * n)` frames; both parts keep
/// manifest order.
pub fn internal_split(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<FrameRecord>, Vec<FrameRecord>), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    let train: Vec<&FrameRecord> = manifest.split(Split::Train).collect();
    let n_val = (fraction * train.len() as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_set: BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut fit = Vec::with_capacity(train.len() - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, r) in train.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(r.clone());
        } else {
            fit.push(r.clone());
        }
    }
    Ok((fit, val))
}

/// Frame counts per patient, for reporting.
pub fn frames_per_patient(records: &[FrameRecord]) -> BTreeMap<&str, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.patient_id.as_str()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, patient: &str, split: Split, label: Label) -> FrameRecord {
        FrameRecord {
            frame_id: id.into(),
            patient_id: patient.into(),
            camera_id: CameraId::Pinpoint,
            path: PathBuf::from(format!("{id}.png")),
            label: Some(label),
            split,
            width: 1440,
            height: 1080,
            truth_boundary_x: None,
        }
    }

    /// Records shaped like the reported dataset: `frames` split across
    /// `patients`, the first `positives` of them fluorescent.
    fn cohort(
        prefix: &str,
        split: Split,
        patients: usize,
        frames: usize,
        positives: usize,
    ) -> Vec<FrameRecord> {
        (0..frames)
            .map(|i| {
                let label = if i < positives {
                    Label::Fluorescent
                } else {
                    Label::NotFluorescent
                };
                record(
                    &format!("{prefix}-{i}"),
                    &format!("{prefix}-p{}", i % patients),
                    split,
                    label,
                )
            })
            .collect()
    }

    #[test]
    fn reported_dataset_shape_summarizes() {
        let mut records = cohort("tr", Split::Train, 7, 1790, 351);
        records.extend(cohort("ho", Split::Holdout, 14, 30, 16));
        let manifest = build_manifest(records).unwrap();
        let s = manifest.summary();
        assert_eq!((s.train.patients, s.train.frames), (7, 1790));
        assert_eq!((s.holdout.patients, s.holdout.frames), (14, 30));
        let pct = |f: Option<f64>| (f.unwrap() * 1000.0).round() / 10.0;
        assert_eq!(pct(s.train.positive_fraction), 19.6);
        assert_eq!(pct(s.holdout.positive_fraction), 53.3);
    }

    #[test]
    fn leakage_duplicates_and_unlabeled_are_rejected() {
        let leak = vec![
            record("a", "p1", Split::Train, Label::Fluorescent),
            record("b", "p1", Split::Holdout, Label::Fluorescent),
        ];
        assert!(matches!(
            build_manifest(leak),
            Err(DatasetError::SplitLeakage { patient_id }) if patient_id == "p1"
        ));
        let dup = vec![
            record("a", "p1", Split::Train, Label::Fluorescent),
            record("a", "p2", Split::Train, Label::Fluorescent),
        ];
        assert!(matches!(
            build_manifest(dup),
            Err(DatasetError::DuplicateFrameId { .. })
        ));
        let mut unlabeled = record("a", "p1", Split::Train, Label::Fluorescent);
        unlabeled.label = None;
        assert!(matches!(
            build_manifest(vec![unlabeled]),
            Err(DatasetError::UnlabeledFrame { .. })
        ));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = build_manifest(Vec::new()).unwrap();
        assert!(m.is_empty());
        let s = m.summary();
        assert_eq!(s.train.frames + s.holdout.frames, 0);
        assert_eq!(s.train.positive_fraction, None);
    }

    #[test]
    fn internal_split_sizes_and_determinism() {
        let m = build_manifest(cohort("tr", Split::Train, 7, 1790, 351)).unwrap();
        let (fit, val) = internal_split(&m, 0.2, 7).unwrap();
        assert_eq!(val.len(), 358);
        assert_eq!(fit.len(), 1432);
        let again = internal_split(&m, 0.2, 7).unwrap();
        assert_eq!((fit.clone(), val.clone()), again);
        let other = internal_split(&m, 0.2, 8).unwrap();
        assert_ne!(val, other.1);

        let two = build_manifest(cohort("x", Split::Train, 2, 2, 1)).unwrap();
        let (a, b) = internal_split(&two, 0.5, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }

    #[test]
    fn internal_split_ignores_holdout_and_checks_fraction() {
        let mut records = cohort("tr", Split::Train, 2, 10, 3);
        records.extend(cohort("ho", Split::Holdout, 2, 5, 3));
        let m = build_manifest(records).unwrap();
        let (fit, val) = internal_split(&m, 0.3, 1).unwrap();
        assert_eq!(fit.len() + val.len(), 10);
        assert!(fit.iter().chain(&val).all(|r| r.split == Split::Train));
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(
                internal_split(&m, bad, 1),
                Err(DatasetError::InvalidFraction(_))
            ));
        }
    }

    #[test]
    fn jsonl_round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = cohort("tr", Split::Train, 2, 4, 1);
        for r in &mut records {
            r.path = dir.path().join("frames").join(r.path.file_name().unwrap());
        }
        records[0].truth_boundary_x = Some(700);
        let m = build_manifest(records).unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), r#"{"schema_version":1}"#);
        assert!(lines.next().unwrap().contains(r#""path":"frames/tr-0.png""#));
        let back = DatasetManifest::read_jsonl(&path).unwrap();
        assert_eq!(back.records().len(), 4);
        assert_eq!(back.records()[0].truth_boundary_x, Some(700));
        assert_eq!(back.records()[1].path, dir.path().join("frames/tr-1.png"));
    }

    #[test]
    fn reading_a_leaky_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let a = serde_json::to_string(&record("a", "p", Split::Train, Label::Fluorescent)).unwrap();
        let b = serde_json::to_string(&record("b", "p", Split::Holdout, Label::Fluorescent)).unwrap();
        std::fs::write(&path, format!("{{\"schema_version\":1}}\n{a}\n{b}\n")).unwrap();
        assert!(matches!(
            DatasetManifest::read_jsonl(&path),
            Err(DatasetError::SplitLeakage { .. })
        ));
        std::fs::write(&path, "{\"schema_version\":9}\n").unwrap();
        assert!(matches!(
            DatasetManifest::read_jsonl(&path),
            Err(DatasetError::SchemaVersion(9))
        ));
    }
}
