//! Two-phase training loop.
//!
//! Phase 1 trains on the original (unbalanced) training records. Phase 2
//! either continues on the class-balanced set, re-warping every augmented
//! record with a fresh per-epoch draw, or (augmentation off) keeps training
//! on the originals for the same number of epochs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::checkpoint::save_checkpoint;
use crate::data::{self, AugmentParams, DatasetManifest, Label, Origin, Split};
use crate::error::{Error, Result};
use crate::layers::{LayerDescriptor, Mode, StreamKeys};
use crate::metrics::{infer_batched, predicted_label, stack, EVAL_BATCH};
use crate::models::{ArchId, Model};
use crate::optim::{cross_entropy, one_hot, AdamConfig, AdamState};
use crate::report;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSchedule {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            phase1_epochs: 10,
            phase2_epochs: 50,
            batch_size: 256,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainingSchedule {
    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr >= 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and >= 0, got {}",
                a.lr
            )));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(Error::Parameter(format!("invalid Adam constants {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    On,
    Off,
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augment::On => "on",
            Augment::Off => "off",
        })
    }
}

impl FromStr for Augment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Augment::On),
            "off" => Ok(Augment::Off),
            _ => Err(Error::Usage(format!(
                "augment must be `on` or `off`, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    /// Mean training loss and accuracy accumulated over the epoch's batches
    /// (Train mode, before each batch's update).
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: TrainingSchedule,
    pub augment: Augment,
    /// Where checkpoints, history and curves go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Also keep `epoch_NNN.ckpt` for every epoch.
    pub keep_epoch_checkpoints: bool,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best_val_acc.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CURVES_FILE: &str = "curves.svg";

/// One training or validation example.
struct Item {
    /// Manifest row; keys the sample's dropout streams.
    row: u64,
    image: usize,
    label: Label,
    /// Warp seed of an augmented copy.
    warp: Option<u64>,
}

/// Splits `0..n` into batches of `size`, keeping the last partial batch.
/// With `min_last = 2` a trailing single sample joins the previous batch.
pub fn batch_ranges(n: usize, size: usize, min_last: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<_> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < min_last) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

pub fn train(
    arch: ArchId,
    manifest: &DatasetManifest,
    schedule: &TrainingSchedule,
    augment: Augment,
    out_dir: &Path,
) -> Result<(Model, TrainingHistory)> {
    let cfg = TrainConfig {
        schedule: *schedule,
        augment,
        out_dir: Some(out_dir.to_path_buf()),
        keep_epoch_checkpoints: false,
    };
    train_model(Model::build(arch, schedule.seed)?, manifest, &cfg, |_| true)
}

/// Trains `model` in place of a fresh one. `on_epoch` sees every history
/// row as it is produced and may return `false` to stop early.
pub fn train_model(
    mut model: Model,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<(Model, TrainingHistory)> {
    let s = &cfg.schedule;
    s.validate()?;
    let train_counts = manifest.counts(Split::Train);
    let balanced;
    let manifest = if cfg.augment == Augment::On && train_counts.covid != train_counts.normal {
        let originals = DatasetManifest::new(
            manifest
                .records
                .iter()
                .filter(|r| r.origin == Origin::Original)
                .cloned()
                .collect(),
            manifest.seed,
        );
        balanced = data::balance_by_augmentation(
            &originals,
            &mut rng::stream(s.seed, Purpose::Augment, &[]),
        );
        &balanced
    } else {
        manifest
    };

    let wanted: Vec<(usize, &data::SampleRecord)> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train || r.split == Split::Val)
        .collect();
    let mut paths: Vec<&Path> = wanted.iter().map(|(_, r)| r.path.as_path()).collect();
    paths.sort();
    paths.dedup();
    let images: Vec<Tensor> = paths
        .par_iter()
        .map(|p| data::load_sample(p))
        .collect::<Result<_>>()?;
    let image_of: HashMap<&Path, usize> = paths.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let item = |(row, r): &(usize, &data::SampleRecord)| Item {
        row: *row as u64,
        image: image_of[r.path.as_path()],
        label: r.label,
        warp: match r.origin {
            Origin::Original => None,
            Origin::Augmented { .. } => Some(r.seed),
        },
    };
    let train_all: Vec<Item> = wanted
        .iter()
        .filter(|(_, r)| r.split == Split::Train)
        .map(item)
        .collect();
    let train_orig: Vec<Item> = wanted
        .iter()
        .filter(|(_, r)| r.split == Split::Train && r.origin == Origin::Original)
        .map(item)
        .collect();
    let val: Vec<Item> = wanted
        .iter()
        .filter(|(_, r)| r.split == Split::Val && r.origin == Origin::Original)
        .map(item)
        .collect();
    if train_orig.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let val_images: Vec<&Tensor> = val.iter().map(|v| &images[v.image]).collect();
    let val_labels = one_hot(&val.iter().map(|v| v.label.index()).collect::<Vec<_>>(), 2)?;

    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let has_bn = model
        .layers
        .iter()
        .any(|l| matches!(l.desc, LayerDescriptor::BatchNorm { .. }));
    let shapes = model.param_shapes();
    let mut adam = AdamState::new(s.adam, shapes.iter().map(|v| v.as_slice()));
    let mut history = TrainingHistory::default();
    let mut best_val = f64::NEG_INFINITY;

    for epoch in 1..=s.total_epochs() {
        let phase = if epoch <= s.phase1_epochs { 1 } else { 2 };
        let pool = if phase == 2 && cfg.augment == Augment::On {
            &train_all
        } else {
            &train_orig
        };
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng::stream(s.seed, Purpose::Shuffle, &[epoch as u64]));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for range in batch_ranges(order.len(), s.batch_size, if has_bn { 2 } else { 1 }) {
            let batch: Vec<&Item> = order[range].iter().map(|&i| &pool[i]).collect();
            let warped: Vec<Tensor> = batch
                .par_iter()
                .map(|it| match it.warp {
                    Some(seed) => data::augment_sample(
                        &images[it.image],
                        &AugmentParams::for_epoch(seed, epoch as u64),
                    ),
                    None => Ok(images[it.image].clone()),
                })
                .collect::<Result<_>>()?;
            let x = stack(&warped.iter().collect::<Vec<_>>())?;
            let y = one_hot(
                &batch.iter().map(|it| it.label.index()).collect::<Vec<_>>(),
                2,
            )?;
            let ids: Vec<u64> = batch.iter().map(|it| it.row).collect();
            let keys = StreamKeys {
                seed: s.seed,
                epoch: epoch as u64,
                sample_ids: &ids,
            };
            model.zero_grads();
            let probs = model.forward(&x, Mode::Train, &keys)?;
            let loss = cross_entropy(&probs, &y)?.mean;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {loss} in epoch {epoch}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            correct += probs
                .data()
                .chunks_exact(2)
                .zip(&batch)
                .filter(|(p, it)| predicted_label(p) == it.label)
                .count();
            model.backward(&probs, &y)?;
            adam.begin_step();
            for (slot, p) in model.params_mut().enumerate() {
                adam.update(slot, &mut p.value, &p.grad)?;
            }
        }

        let vp = infer_batched(&model, &val_images, EVAL_BATCH)?;
        let vp_t = Tensor::from_vec(&[vp.len(), 2], vp.iter().flatten().copied().collect())?;
        let val_loss = cross_entropy(&vp_t, &val_labels)?.mean;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss became {val_loss} in epoch {epoch}"
            )));
        }
        let val_correct = vp
            .iter()
            .zip(&val)
            .filter(|(p, it)| predicted_label(&p[..]) == it.label)
            .count();
        let rec = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / pool.len() as f64,
            train_acc: correct as f64 / pool.len() as f64,
            val_loss,
            val_acc: val_correct as f64 / val.len() as f64,
        };
        history.records.push(rec);
        model.epoch = epoch as u64;

        if let Some(dir) = &cfg.out_dir {
            save_checkpoint(&model, &dir.join(LAST_CHECKPOINT))?;
            if cfg.keep_epoch_checkpoints {
                save_checkpoint(&model, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
            if rec.val_acc > best_val {
                save_checkpoint(&model, &dir.join(BEST_CHECKPOINT))?;
            }
            report::write_history_csv(&history, &dir.join(HISTORY_FILE))?;
        }
        best_val = best_val.max(rec.val_acc);
        if !on_epoch(&rec) {
            break;
        }
    }

    if let Some(dir) = &cfg.out_dir {
        save_checkpoint(&model, &dir.join(FINAL_CHECKPOINT))?;
        if !history.records.is_empty() {
            report::render_curves_svg(&history, &dir.join(CURVES_FILE))?;
        }
    }
    Ok((model, history))
}
