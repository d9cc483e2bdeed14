use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cls_loss, seg_loss, sgd_step, softmax, OptimizerConfig, TrainConfig};
use crate::dataio::{MaskSlice, PatientRecord, SliceImage};
use crate::error::{Error, Result};
use crate::metrics::dice_summary;
use crate::nets::{classifier_pass, init_params, segmenter_pass, ClassifierConfig, ParameterStore, SegmenterConfig};
use crate::preprocess::{augment, AugmentationConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.epochs == other.epochs && self.best_epoch == other.best_epoch
    }
}

/// Second-stage training example: one patient's ordered ROI slices.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierExample {
    pub patient_id: String,
    pub slices: Vec<Tensor>,
    pub label: u8,
}

/// Tracks the best validation score and the patience counter.
struct Selector {
    best: Option<(f64, usize, ParameterStore)>,
    since_best: usize,
}

impl Selector {
    fn new() -> Self {
        Selector { best: None, since_best: 0 }
    }

    /// Returns `true` when training should stop.
    fn observe(&mut self, score: f64, epoch: usize, params: &ParameterStore, patience: usize) -> bool {
        if self.best.as_ref().is_none_or(|(b, ..)| score > *b) {
            self.best = Some((score, epoch, params.clone()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        patience > 0 && self.since_best >= patience
    }
}

fn finish(selector: Selector, last: ParameterStore, epochs: Vec<EpochRecord>, start: Instant) -> (ParameterStore, TrainReport) {
    let (params, best_epoch) = match selector.best {
        Some((_, e, p)) => (p, Some(e)),
        None => (last, epochs.last().map(|r| r.epoch)),
    };
    (params, TrainReport { epochs, best_epoch, wall_clock_seconds: start.elapsed().as_secs_f64() })
}

/// Probability map with the same `(1, H, W)` shape as the slice.
pub fn segment(params: &ParameterStore, config: &SegmenterConfig, image: &SliceImage) -> Result<Tensor> {
    Ok(segmenter_pass(params, config, &image.to_tensor())?.output().clone())
}

struct SegSample<'a> {
    patient: &'a str,
    image: &'a SliceImage,
    mask: &'a MaskSlice,
}

fn seg_samples(records: &[PatientRecord]) -> Result<Vec<SegSample<'_>>> {
    let mut out = Vec::new();
    for r in records {
        let masks = r
            .masks
            .as_ref()
            .ok_or_else(|| Error::EmptyDataset(format!("patient `{}` has no masks", r.patient_id)))?;
        for (image, mask) in r.slices.iter().zip(masks) {
            out.push(SegSample { patient: &r.patient_id, image, mask });
        }
    }
    Ok(out)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_for(rng::derive_named(seed, "shuffle"), epoch as u64));
    order
}

/// Validation loss and slice-then-patient Dice at threshold 0.5.
fn evaluate_segmenter(
    params: &ParameterStore,
    config: &SegmenterConfig,
    val: &[SegSample<'_>],
    cfg: &TrainConfig,
) -> Result<(f64, Option<f64>)> {
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(val.len());
    for s in val {
        let prob = segment(params, config, s.image)?;
        loss += seg_loss(&prob, &s.mask.to_tensor(), cfg.seg_loss)?.0;
        let (h, w) = s.image.shape();
        preds.push(MaskSlice::new(h, w, prob.data().iter().map(|&p| u8::from(p >= 0.5)).collect())?);
    }
    let summary = dice_summary(val.iter().zip(&preds).map(|(s, p)| (s.patient, p, s.mask)))?;
    Ok((loss / val.len() as f64, summary.slice_then_patient))
}

/// Mini-batch SGD on slice/mask pairs with on-the-fly augmentation. Returns
/// the weights of the epoch with the best validation Dice.
pub fn train_segmenter(
    config: &SegmenterConfig,
    train: &[PatientRecord],
    val: &[PatientRecord],
    aug: &AugmentationConfig,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
) -> Result<(ParameterStore, TrainReport)> {
    cfg.validate()?;
    opt.validate()?;
    aug.validate()?;
    let start = Instant::now();
    let train_set = seg_samples(train)?;
    let val_set = seg_samples(val)?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("segmenter training set".into()));
    }
    let mut params = init_params(config, cfg.seed)?;
    let aug_seed = rng::derive_named(cfg.seed, "augment");
    let mut records = Vec::new();
    let mut selector = Selector::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let mut n = 0usize;
            for &i in batch {
                let s = &train_set[i];
                let sample_seed = rng::derive(aug_seed, (epoch * train_set.len() + i) as u64);
                let copies = if aug.copies_per_sample == 0 {
                    vec![(s.image.clone(), Some(s.mask.clone()))]
                } else {
                    augment(s.image, Some(s.mask), aug, sample_seed)?
                };
                for (image, mask) in copies {
                    let mask = mask.expect("mask passed through augmentation");
                    let pass = segmenter_pass(&params, config, &image.to_tensor())?;
                    let (loss, g) = seg_loss(pass.output(), &mask.to_tensor(), cfg.seg_loss)?;
                    grads.add_scaled(&pass.backward(&params, g)?, 1.0);
                    total += loss;
                    n += 1;
                }
            }
            count += n;
            grads.scale(1.0 / n as f64);
            params = sgd_step(&params, &grads, opt)?;
        }
        let train_loss = total / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("segmenter training loss at epoch {epoch}")));
        }
        let (val_loss, val_metric) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, d) = evaluate_segmenter(&params, config, &val_set, cfg)?;
            (Some(l), d)
        };
        records.push(EpochRecord { epoch, train_loss, val_loss, val_metric });
        if let Some(score) = val_metric.or(val_loss.map(|l| -l)) {
            if selector.observe(score, epoch, &params, cfg.early_stop_patience) {
                break;
            }
        }
    }
    Ok(finish(selector, params, records, start))
}

/// Probability of class 1 for one patient: the recurrent output, or the
/// maximum over per-slice probabilities for the residual CNN.
pub fn predict_patient(params: &ParameterStore, config: &ClassifierConfig, example: &ClassifierExample) -> Result<f64> {
    if config.is_sequential() {
        let pass = classifier_pass(params, config, &example.slices)?;
        Ok(softmax(pass.output())[1])
    } else {
        let mut best = f64::NEG_INFINITY;
        for s in &example.slices {
            let pass = classifier_pass(params, config, std::slice::from_ref(s))?;
            best = best.max(softmax(pass.output())[1]);
        }
        Ok(best)
    }
}

/// Training units: whole sequences for recurrent models, single slices with
/// the patient label broadcast for the residual CNN.
fn classifier_units(config: &ClassifierConfig, data: &[ClassifierExample]) -> Vec<(Vec<Tensor>, usize)> {
    if config.is_sequential() {
        data.iter().map(|e| (e.slices.clone(), e.label as usize)).collect()
    } else {
        data.iter().flat_map(|e| e.slices.iter().map(|s| (vec![s.clone()], e.label as usize))).collect()
    }
}

fn evaluate_classifier(
    params: &ParameterStore,
    config: &ClassifierConfig,
    val: &[ClassifierExample],
    units: &[(Vec<Tensor>, usize)],
) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    for (x, y) in units {
        loss += cls_loss(classifier_pass(params, config, x)?.output(), *y)?.0;
    }
    let mut correct = 0usize;
    for e in val {
        let p = predict_patient(params, config, e)?;
        correct += usize::from(u8::from(p >= 0.5) == e.label);
    }
    Ok((loss / units.len() as f64, correct as f64 / val.len() as f64))
}

/// As [`train_segmenter`] but selecting on patient-level validation accuracy.
pub fn train_classifier(
    config: &ClassifierConfig,
    train: &[ClassifierExample],
    val: &[ClassifierExample],
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
) -> Result<(ParameterStore, TrainReport)> {
    cfg.validate()?;
    opt.validate()?;
    if config.num_classes() < 2 {
        return Err(Error::config("classifier.num_classes", "must be at least 2"));
    }
    let start = Instant::now();
    let units = classifier_units(config, train);
    if units.is_empty() {
        return Err(Error::EmptyDataset("classifier training set".into()));
    }
    let val_units = classifier_units(config, val);
    let mut params = init_params(config, cfg.seed)?;
    let mut records = Vec::new();
    let mut selector = Selector::new();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(units.len(), cfg.seed, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let (x, y) = &units[i];
                let pass = classifier_pass(&params, config, x)?;
                let (loss, g) = cls_loss(pass.output(), *y)?;
                grads.add_scaled(&pass.backward(&params, g)?, 1.0);
                total += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            if std::env::var("GNORM").is_ok() { eprintln!("GN {epoch} {:.3e}", grads.iter().flat_map(|(_, t)| t.data()).map(|g| g * g).sum::<f64>().sqrt()); }
            params = sgd_step(&params, &grads, opt)?;
        }
        let train_loss = total / units.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("classifier training loss at epoch {epoch}")));
        }
        let (val_loss, val_metric) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_classifier(&params, config, val, &val_units)?;
            (Some(l), Some(a))
        };
        records.push(EpochRecord { epoch, train_loss, val_loss, val_metric });
        // Accuracy ties are broken by the lower validation loss.
        if let (Some(a), Some(l)) = (val_metric, val_loss) {
            if selector.observe(a - 1e-6 * l.min(1e5), epoch, &params, cfg.early_stop_patience) {
                break;
            }
        }
    }
    Ok(finish(selector, params, records, start))
}
