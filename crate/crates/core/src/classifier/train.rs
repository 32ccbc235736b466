//! Fine-tuning loop: random crops, class-weighted cross-entropy, AdamW with a
//! one-cycle schedule, internal validation after every epoch.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    apply_threshold, infer_probability, to_batch, ClassifierError, ModelArtifact, Preprocessing, TrainConfig,
    TrainingSummary, DEFAULT_THRESHOLD, FLUORESCENT_CLASS,
};
use crate::dataset::{internal_split, random_crop, DatasetManifest, FrameRecord};
use crate::imaging::{derive_seed, load_image, resize_square};
use crate::nn::{softmax_cross_entropy, AdamW, OneCycle, ResNet, ResNetSpec};
use crate::types::{Label, Split};

/// Decoded frames kept in memory across epochs, up to this many bytes.
const FRAME_CACHE_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    /// Counts from 1.
    pub epoch: usize,
    pub train_loss: f64,
    pub internal_val_loss: Option<f64>,
    pub internal_val_accuracy: Option<f64>,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochReport>,
    pub fit_frames: usize,
    pub internal_val_frames: usize,
    /// Loss weights for `[not_fluorescent, fluorescent]`.
    pub class_weights: [f64; 2],
    pub seconds: f64,
    /// False when the final loss is not finite or internal validation is no
    /// better than chance. Reported, never raised.
    pub converged: bool,
}

struct FrameStore {
    cache: HashMap<String, Rc<RgbImage>>,
    used: usize,
}

impl FrameStore {
    fn new() -> Self {
        Self {
            cache: HashMap::new(),
            used: 0,
        }
    }

    fn get(&mut self, record: &FrameRecord) -> Result<Rc<RgbImage>, ClassifierError> {
        if let Some(img) = self.cache.get(&record.frame_id) {
            return Ok(Rc::clone(img));
        }
        let img = load_image(&record.path)
            .map_err(|e| ClassifierError::Decode(format!("{}: {e}", record.path.display())))?;
        let img = Rc::new(img);
        let size = img.as_raw().len();
        if self.used + size <= FRAME_CACHE_BYTES {
            self.used += size;
            self.cache.insert(record.frame_id.clone(), Rc::clone(&img));
        }
        Ok(img)
    }
}

fn class_index(label: Label) -> usize {
    match label {
        Label::Fluorescent => FLUORESCENT_CLASS,
        Label::NotFluorescent => 1 - FLUORESCENT_CLASS,
    }
}

pub fn train(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    base_weights: Option<&Path>,
) -> Result<(ModelArtifact, TrainingReport), ClassifierError> {
    train_with_progress(manifest, config, base_weights, &mut |_| {})
}

/// Trains on the manifest's train split. `base_weights` is a safetensors file
/// with torchvision-style names whose backbone tensors initialize the network;
/// the head is always fresh.
pub fn train_with_progress(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    base_weights: Option<&Path>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<(ModelArtifact, TrainingReport), ClassifierError> {
    config.validate()?;
    let started = Instant::now();

    let mut seen = [false; 2];
    for r in manifest.split(Split::Train) {
        seen[class_index(r.label())] = true;
    }
    match seen {
        [true, true] => {}
        [false, true] => return Err(ClassifierError::SingleClassDataset(Label::Fluorescent)),
        _ => return Err(ClassifierError::SingleClassDataset(Label::NotFluorescent)),
    }

    let (fit, val) = internal_split(manifest, config.internal_val_fraction, config.seed)?;
    let mut counts = [0usize; 2];
    for r in &fit {
        counts[class_index(r.label())] += 1;
    }
    if counts.contains(&0) {
        let missing = if counts[FLUORESCENT_CLASS] == 0 {
            Label::NotFluorescent
        } else {
            Label::Fluorescent
        };
        return Err(ClassifierError::SingleClassDataset(missing));
    }
    let class_weights: [f64; 2] = if config.class_weighting {
        let n = fit.len() as f64;
        [n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)]
    } else {
        [1.0, 1.0]
    };
    let loss_weights = class_weights.map(|w| w as f32);

    let spec = ResNetSpec::from_architecture_id(&config.architecture_id).expect("validated architecture");
    let mut net = ResNet::new(spec);
    net.init(derive_seed(config.seed, &[0x494e_4954]));
    if let Some(path) = base_weights {
        let bytes = fs::read(path)?;
        net.load_safetensors(&bytes, false)?;
        net.reset_head(derive_seed(config.seed, &[0x4845_4144]));
    }

    let preprocessing = Preprocessing::default();
    let batch = config.batch_size.min(fit.len());
    // trailing partial batches are dropped, as batch statistics on one or two
    // crops are meaningless
    let steps_per_epoch = fit.len() / batch;
    let schedule = OneCycle::new(config.learning_rate as f32, config.epochs * steps_per_epoch);
    let mut optimizer = AdamW::default();
    let mut store = FrameStore::new();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[0x4550_4f43, epoch as u64],
        )));
        let mut loss_sum = 0.0;
        let mut seen_items = 0usize;
        for chunk in order.chunks_exact(batch) {
            let mut crops = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let record = &fit[i];
                let frame = store.get(record)?;
                let crop = random_crop(&frame, &config.crop, &record.frame_id, epoch as u64)?;
                crops.push(resize_square(&crop, config.input_size));
                targets.push(class_index(record.label()));
            }
            let x = to_batch(&crops, &preprocessing);
            net.zero_grad();
            let logits = net.forward_train(&x);
            let (loss, dlogits) = softmax_cross_entropy(&logits, 2, &targets, &loss_weights);
            net.backward(&dlogits);
            optimizer.beta1 = schedule.beta1(step);
            optimizer.step(&mut net.params_mut(), schedule.lr(step));
            step += 1;
            loss_sum += loss * chunk.len() as f64;
            seen_items += chunk.len();
        }

        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let mut correct = 0usize;
            let mut nll = 0.0;
            for record in &val {
                let frame = store.get(record)?;
                let p = infer_probability(&net, config.input_size, &preprocessing, &frame);
                let truth = record.label();
                correct += usize::from(apply_threshold(p, DEFAULT_THRESHOLD) == truth);
                let p_truth = if truth.is_positive() { p } else { 1.0 - p };
                nll -= p_truth.max(1e-12).ln();
            }
            let n = val.len() as f64;
            (Some(nll / n), Some(correct as f64 / n))
        };

        let report = EpochReport {
            epoch: epoch + 1,
            train_loss: if seen_items > 0 {
                loss_sum / seen_items as f64
            } else {
                f64::NAN
            },
            internal_val_loss: val_loss,
            internal_val_accuracy: val_acc,
            learning_rate: schedule.lr(step.saturating_sub(1)) as f64,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        progress(&report);
        epochs.push(report);
    }

    let last = epochs.last().expect("at least one epoch");
    let converged = last.train_loss.is_finite() && last.internal_val_accuracy.is_none_or(|a| a > 0.5);
    let seconds = started.elapsed().as_secs_f64();
    let summary = TrainingSummary {
        epochs: config.epochs,
        fit_frames: fit.len(),
        internal_val_frames: val.len(),
        final_train_loss: last.train_loss,
        final_internal_val_accuracy: last.internal_val_accuracy,
        seconds,
    };
    let report = TrainingReport {
        epochs,
        fit_frames: fit.len(),
        internal_val_frames: val.len(),
        class_weights,
        seconds,
        converged,
    };
    let artifact = ModelArtifact::from_network(net, config.clone(), preprocessing, Some(summary));
    Ok((artifact, report))
}
