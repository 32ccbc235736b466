use std::error::Error;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fa_core::boundary::{self, BoundaryOptions, DEFAULT_STRIP_WIDTH};
use fa_core::classifier::{self, ModelArtifact, TrainConfig};
use fa_core::dataset::{
    ingest_video, write_records_jsonl, CropSpec, DatasetError, DatasetManifest, IngestOptions,
};
use fa_core::evaluation::{evaluate_split, format_table, row_label};
use fa_core::imaging::{load_image, save_png};
use fa_core::saliency::{compute_saliency, map_to_image, render_overlay};
use fa_core::synthkit::{generate_dataset, DatasetPlan};
use fa_core::{Axis, BoundaryError, BoundaryEstimate, CameraId, DistalDirection, Label, Split};
use fa_service::{ServiceConfig, DEFAULT_MAX_UPLOAD_BYTES};
use serde::Serialize;

const MANIFEST_FILE: &str = "manifest.jsonl";
const UNLABELED_FILE: &str = "unlabeled.jsonl";

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "fa", version, about = "Fluorescence angiography frame analysis")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true, conflicts_with = "table")]
    json: bool,
    /// Aligned plain-text output.
    #[arg(long, global = true)]
    table: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled dataset and write (or extend) its manifest.
    Synth {
        #[arg(long)]
        patients: usize,
        /// Frames per patient.
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0.2)]
        positive_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 1440)]
        width: u32,
        #[arg(long, default_value_t = 1080)]
        height: u32,
    },
    /// Extract frames from a video (GIF or APNG natively, anything else via ffmpeg).
    Ingest {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        camera: CameraId,
        /// Keep every n-th frame.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Label every extracted frame and add them to the manifest in OUT.
        /// Without it the frames are listed in unlabeled.jsonl.
        #[arg(long)]
        label: Option<LabelArg>,
    },
    /// Fine-tune the classifier on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        /// Random-crop side in source pixels.
        #[arg(long, default_value_t = 224)]
        crop: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Artifact directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Network input side; defaults to the crop size.
        #[arg(long)]
        input_size: Option<u32>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value = "residual-34")]
        arch: String,
        /// Backbone weights (safetensors, torchvision names). Random init without.
        #[arg(long)]
        base_weights: Option<PathBuf>,
        #[arg(long)]
        no_class_weights: bool,
    },
    /// Metrics of a trained model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "holdout")]
        split: Split,
        /// Separate rows for cameras seen (internal) and unseen (external) in training.
        #[arg(long)]
        by_camera: bool,
    },
    /// Classify one frame.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Locate the perfusion boundary along the colon.
    Boundary {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STRIP_WIDTH)]
        strip_width: u32,
        #[arg(long, default_value = "horizontal")]
        axis: Axis,
        /// Direction pointing away from the blood supply: increasing_x or decreasing_x.
        #[arg(long)]
        distal: DistalDirection,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write each strip as a JPEG here.
        #[arg(long, value_name = "DIR")]
        export_strips: Option<PathBuf>,
        /// Write the frame with strip boxes and the boundary line as PNG.
        #[arg(long, value_name = "PNG")]
        annotate: Option<PathBuf>,
    },
    /// Class-activation overlay for one frame.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Overlay PNG to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = fa_service::DEFAULT_OPACITY)]
        opacity: f64,
        /// Also write the raw map as a grayscale PNG.
        #[arg(long, value_name = "PNG")]
        map: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "FA_MODEL_DIR")]
        model_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Upload limit in bytes.
        #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD_BYTES)]
        max_upload: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Fluorescent,
    #[value(name = "not_fluorescent")]
    NotFluorescent,
}

impl From<LabelArg> for Label {
    fn from(l: LabelArg) -> Label {
        match l {
            LabelArg::Fluorescent => Label::Fluorescent,
            LabelArg::NotFluorescent => Label::NotFluorescent,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Format {
    Json,
    Table,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // single-frame commands feed scripts, the rest are read by people
    let default = match cli.command {
        Command::Classify { .. } | Command::Boundary { .. } | Command::Saliency { .. } => Format::Json,
        _ => Format::Table,
    };
    let format = match (cli.json, cli.table) {
        (true, _) => Format::Json,
        (_, true) => Format::Table,
        _ => default,
    };
    match run(cli.command, format) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn emit<T: Serialize>(format: Format, value: &T, table: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(value)?),
        Format::Table => print!("{}", table()),
    }
    Ok(())
}

/// Merges `new` into the manifest at `path`, creating it if needed.
fn extend_manifest(path: &Path, new: DatasetManifest) -> Result<DatasetManifest> {
    let manifest = if path.exists() {
        DatasetManifest::read_jsonl(path)?.merge(new)?
    } else {
        new
    };
    manifest.write_jsonl(path)?;
    Ok(manifest)
}

fn summary_table(manifest: &DatasetManifest, path: &Path) -> String {
    let s = manifest.summary();
    let mut out = format!("manifest {}\n", path.display());
    out += &format!(
        "{:<8} {:>8} {:>7} {:>9}\n",
        "split", "patients", "frames", "positive"
    );
    for (name, split) in [("train", s.train), ("holdout", s.holdout)] {
        out += &format!(
            "{:<8} {:>8} {:>7} {:>9}\n",
            name, split.patients, split.frames, split.positives
        );
    }
    out
}

fn run(command: Command, format: Format) -> Result<()> {
    match command {
        Command::Synth {
            patients,
            frames,
            positive_frac,
            seed,
            out,
            split,
            width,
            height,
        } => {
            let mut plan = DatasetPlan::new(patients, frames, positive_frac, seed).with_split(split);
            plan.width = width;
            plan.height = height;
            let path = out.join(MANIFEST_FILE);
            // refuse before any frame on disk is overwritten
            if path.exists() {
                let existing = DatasetManifest::read_jsonl(&path)?;
                let ids: Vec<String> = (0..patients).map(|p| plan.patient_id(p)).collect();
                if let Some(r) = existing.records().iter().find(|r| ids.contains(&r.patient_id)) {
                    return Err(if r.split != split {
                        DatasetError::SplitLeakage {
                            patient_id: r.patient_id.clone(),
                        }
                    } else {
                        DatasetError::DuplicateFrameId {
                            frame_id: r.frame_id.clone(),
                        }
                    }
                    .into());
                }
            }
            let generated = generate_dataset(&plan, &out)?;
            let manifest = extend_manifest(&path, generated)?;
            emit(format, &manifest.summary(), || summary_table(&manifest, &path))
        }
        Command::Ingest {
            video,
            patient,
            camera,
            stride,
            out,
            split,
            label,
        } => {
            let options = IngestOptions {
                patient_id: patient,
                camera_id: camera,
                sample_stride: stride,
                split,
            };
            let mut records = ingest_video(&video, &options, &out.join("frames"))?;
            let n = records.len();
            match label {
                Some(label) => {
                    for r in &mut records {
                        r.label = Some(label.into());
                    }
                    let path = out.join(MANIFEST_FILE);
                    let manifest = extend_manifest(&path, fa_core::dataset::build_manifest(records)?)?;
                    emit(format, &manifest.summary(), || {
                        format!("extracted {n} frames\n{}", summary_table(&manifest, &path))
                    })
                }
                None => {
                    let path = out.join(UNLABELED_FILE);
                    write_records_jsonl(&records, &path)?;
                    emit(format, &records, || {
                        format!("extracted {n} unlabeled frames, listed in {}\n", path.display())
                    })
                }
            }
        }
        Command::Train {
            manifest,
            epochs,
            crop,
            seed,
            out,
            input_size,
            batch_size,
            learning_rate,
            arch,
            base_weights,
            no_class_weights,
        } => {
            let manifest = DatasetManifest::read_jsonl(&manifest)?;
            let config = TrainConfig {
                epochs,
                crop: CropSpec {
                    crop_size: crop,
                    seed,
                },
                batch_size,
                learning_rate,
                seed,
                architecture_id: arch,
                input_size: input_size.unwrap_or(crop),
                class_weighting: !no_class_weights,
                ..TrainConfig::default()
            };
            let (artifact, report) =
                classifier::train_with_progress(&manifest, &config, base_weights.as_deref(), &mut |e| {
                    let val = e
                        .internal_val_accuracy
                        .map_or_else(|| "n/a".to_string(), |a| format!("{:.1}%", 100.0 * a));
                    eprintln!(
                        "epoch {}/{epochs}  loss {:.4}  val acc {val}  {:.0}s",
                        e.epoch, e.train_loss, e.seconds
                    );
                })?;
            artifact.save(&out)?;
            emit(format, &report, || {
                format!(
                    "model {} written to {}\nfit frames {}, internal validation frames {}, {:.0}s{}\n",
                    artifact.version(),
                    out.display(),
                    report.fit_frames,
                    report.internal_val_frames,
                    report.seconds,
                    if report.converged {
                        ""
                    } else {
                        "\nwarning: training did not converge"
                    }
                )
            })
        }
        Command::Eval {
            model,
            manifest,
            split,
            by_camera,
        } => {
            let artifact = ModelArtifact::load(&model)?;
            let manifest = DatasetManifest::read_jsonl(&manifest)?;
            let reports = evaluate_split(&artifact, &manifest, split, by_camera)?;
            emit(format, &reports, || {
                let rows: Vec<_> = reports
                    .iter()
                    .map(|r| (row_label(&r.counts.stratum), r.clone()))
                    .collect();
                format_table(&rows)
            })
        }
        Command::Classify {
            model,
            image,
            threshold,
        } => {
            let artifact = ModelArtifact::load(&model)?;
            let image = load_image(&image)?;
            let result = match threshold {
                Some(t) => artifact.predict_with_threshold(&image, t),
                None => artifact.predict(&image),
            };
            emit(format, &result, || {
                format!(
                    "{}  p={:.6}  threshold {}  model {}\n",
                    result.label, result.probability, result.threshold, result.model_version
                )
            })
        }
        Command::Boundary {
            model,
            image,
            strip_width,
            axis,
            distal,
            threshold,
            export_strips,
            annotate,
        } => {
            let artifact = ModelArtifact::load(&model)?;
            let image = load_image(&image)?;
            if let Some(dir) = &export_strips {
                boundary::export_strips(&boundary::tile(&image, strip_width, axis)?, dir)?;
            }
            let options = BoundaryOptions {
                strip_width,
                axis,
                distal_direction: distal,
                threshold,
            };
            // no fluorescent strip is a finding, not a failure
            let estimate = match boundary::analyze(&artifact, &image, &options) {
                Ok(e) => e,
                Err(BoundaryError::NoFluorescentRegion(e)) => *e,
                Err(e) => return Err(e.into()),
            };
            if let Some(path) = &annotate {
                save_png(&boundary::annotate(&image, &estimate, axis), path)?;
            }
            emit(format, &estimate, || boundary_table(&estimate))
        }
        Command::Saliency {
            model,
            image,
            out,
            opacity,
            map,
        } => {
            let artifact = ModelArtifact::load(&model)?;
            let frame_id = image.file_stem().map(|s| s.to_string_lossy().into_owned());
            let img = load_image(&image)?;
            let saliency = compute_saliency(&artifact, &img, frame_id.as_deref());
            save_png(&render_overlay(&img, &saliency, opacity)?, &out)?;
            if let Some(path) = &map {
                map_to_image(&saliency).save(path)?;
            }
            let summary = serde_json::json!({
                "overlay": out,
                "map": map,
                "width": saliency.width,
                "height": saliency.height,
                "method": saliency.method_id,
                "model_version": saliency.model_version,
            });
            emit(format, &summary, || {
                format!("overlay written to {}\n", out.display())
            })
        }
        Command::Serve {
            model_dir,
            bind,
            max_upload,
        } => {
            let mut config = ServiceConfig::new(model_dir);
            config.bind = bind;
            config.max_upload_bytes = max_upload;
            config.validate()?;
            let runtime = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{bind}");
            runtime.block_on(fa_service::serve(config))?;
            Ok(())
        }
    }
}

fn boundary_table(e: &BoundaryEstimate) -> String {
    let mut out = match e.boundary_x {
        Some(x) => format!("boundary at x={x} ({})\n", e.distal_direction.as_str()),
        None => "no fluorescent region\n".to_string(),
    };
    if !e.contiguous {
        out += "warning: non-fluorescent strip proximal of the boundary\n";
    }
    if e.saturated {
        out += "note: every strip is fluorescent, the front may lie beyond the frame\n";
    }
    out += &format!("{:>5} {:>11} {:>11}  label\n", "strip", "interval", "probability");
    for s in &e.strips {
        out += &format!(
            "{:>5} {:>11} {:>11.6}  {}\n",
            s.index,
            format!("{}-{}", s.x0, s.x1),
            s.probability,
            s.label
        );
    }
    out
}
