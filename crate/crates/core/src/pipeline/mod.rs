//! The two-stage cascade: train a segmenter, crop candidate regions, train a
//! classifier on them, and score validation patients.

mod report;
mod roi;

pub use report::{compare, ComparisonTable, SweepCell, SweepReport};
pub use roi::{
    binarize, crop_roi_sequence, crop_rois_from_masks, extract_candidates, extract_candidates_with_margin, predict_masks,
    CandidateRegion, RoiConfig, RoiSlice, DEFAULT_MARGIN,
};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{load_patient, split_dataset, DatasetManifest, MaskSlice, PatientRecord, SplitConfig};
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, dice_summary, ConfusionMatrix, DiceSummary, MetricsReport};
use crate::nets::{
    Architecture, CellKind, ClassifierConfig, DeepSegNetConfig, ParameterStore, RecurrentConfig, ResNetConfig,
    SegmenterConfig, UNetConfig,
};
use crate::preprocess::{preprocess_mask, preprocess_slice, AugmentationConfig, PreprocessConfig};
use crate::rng;
use crate::train::{
    predict_patient, train_classifier, train_segmenter, ClassifierExample, OptimizerConfig, TrainConfig, TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    DeepsegnetResnet50,
    DeepsegnetRnn,
    UnetRnn,
    UnetLstm,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] =
        [PipelineKind::DeepsegnetResnet50, PipelineKind::DeepsegnetRnn, PipelineKind::UnetRnn, PipelineKind::UnetLstm];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::DeepsegnetResnet50 => "deepsegnet_resnet50",
            PipelineKind::DeepsegnetRnn => "deepsegnet_rnn",
            PipelineKind::UnetRnn => "unet_rnn",
            PipelineKind::UnetLstm => "unet_lstm",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            PipelineKind::DeepsegnetResnet50 => "DeepSegNet+ResNet50",
            PipelineKind::DeepsegnetRnn => "DeepSegNet+RNN",
            PipelineKind::UnetRnn => "U-Net+RNN",
            PipelineKind::UnetLstm => "U-Net+LSTM",
        }
    }

    fn uses_unet(self) -> bool {
        matches!(self, PipelineKind::UnetRnn | PipelineKind::UnetLstm)
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PipelineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("kinds", format!("unknown pipeline kind `{s}`")))
    }
}

/// Every knob of a cascade run. Classifier input sizes are overridden by
/// `roi.roi_size`; recurrent cell kinds are fixed by the pipeline kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub augmentation: AugmentationConfig,
    pub roi: RoiConfig,
    pub unet: UNetConfig,
    pub deepsegnet: DeepSegNetConfig,
    pub resnet: ResNetConfig,
    pub recurrent: RecurrentConfig,
    pub segmenter_training: TrainConfig,
    pub classifier_training: TrainConfig,
    pub segmenter_optimizer: OptimizerConfig,
    pub classifier_optimizer: OptimizerConfig,
    /// Crop ROIs from ground-truth masks instead of a trained segmenter.
    pub oracle_segmenter: bool,
    /// In sweeps, retrain the segmenter at every fraction; when off the
    /// segmenter is trained once at the smallest fraction.
    pub retrain_segmenter: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            augmentation: AugmentationConfig::default(),
            roi: RoiConfig::default(),
            unet: UNetConfig::default(),
            deepsegnet: DeepSegNetConfig::default(),
            resnet: ResNetConfig::default(),
            recurrent: RecurrentConfig::default(),
            segmenter_training: TrainConfig::default(),
            classifier_training: TrainConfig::default(),
            segmenter_optimizer: OptimizerConfig::default(),
            classifier_optimizer: OptimizerConfig::default(),
            oracle_segmenter: false,
            retrain_segmenter: true,
        }
    }
}

impl PipelineConfig {
    pub fn segmenter(&self, kind: PipelineKind) -> SegmenterConfig {
        let base = if kind.uses_unet() {
            SegmenterConfig::Unet(self.unet.clone())
        } else {
            SegmenterConfig::Deepsegnet(self.deepsegnet.clone())
        };
        base.fitted(self.preprocess.target_size)
    }

    pub fn classifier(&self, kind: PipelineKind) -> ClassifierConfig {
        let size = self.roi.roi_size;
        let recurrent = |cell| {
            let mut c = RecurrentConfig { cell, input_size: size, ..self.recurrent.clone() };
            if c.encoder.channels.is_empty() {
                c.input_dim = size * size;
            }
            ClassifierConfig::Recurrent(c)
        };
        match kind {
            PipelineKind::DeepsegnetResnet50 => ClassifierConfig::Resnet(ResNetConfig { input_size: size, ..self.resnet.clone() }),
            PipelineKind::DeepsegnetRnn | PipelineKind::UnetRnn => recurrent(CellKind::Plain),
            PipelineKind::UnetLstm => recurrent(CellKind::Gated),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.preprocess.validate()?;
        self.augmentation.validate()?;
        self.roi.validate()?;
        self.segmenter_training.validate()?;
        self.classifier_training.validate()?;
        self.segmenter_optimizer.validate()?;
        self.classifier_optimizer.validate()?;
        for kind in PipelineKind::ALL {
            self.segmenter(kind).validate()?;
            self.classifier(kind).validate()?;
        }
        Ok(())
    }
}

/// Manifest plus every patient decoded and preprocessed once.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub manifest: DatasetManifest,
    pub records: BTreeMap<String, PatientRecord>,
}

impl PreparedDataset {
    pub fn load(manifest: &DatasetManifest, cfg: &PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        let mut records = BTreeMap::new();
        for id in manifest.ids() {
            let raw = load_patient(manifest, id)?;
            let slices = raw.slices.iter().map(|s| preprocess_slice(s, cfg)).collect::<Result<Vec<_>>>()?;
            let masks = match &raw.masks {
                Some(ms) => Some(ms.iter().map(|m| preprocess_mask(m, cfg)).collect::<Result<Vec<_>>>()?),
                None => None,
            };
            records.insert(id.to_string(), PatientRecord::new(raw.patient_id, slices, masks, raw.label)?);
        }
        Ok(PreparedDataset { manifest: manifest.clone(), records })
    }

    /// Records of a manifest subset, in that subset's order.
    pub fn select(&self, subset: &DatasetManifest) -> Vec<PatientRecord> {
        subset.ids().map(|id| self.records[id].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub label: u8,
    pub probability: f64,
    pub decision: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub kind: PipelineKind,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    /// Validation Dice under every aggregation; `metrics.dice` holds the
    /// slice-then-patient value.
    pub dice: DiceSummary,
    pub train_fraction: f64,
    pub seed: u64,
    pub predictions: Vec<PatientPrediction>,
}

/// A result together with the trained weights and training logs.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub result: PipelineResult,
    pub segmenter: Option<(ParameterStore, TrainReport)>,
    pub classifier: (ParameterStore, TrainReport),
}

type SegKey = (&'static str, Vec<String>, u64);

/// Trained segmenters keyed by architecture, training patients, and seed, so
/// kinds sharing a segmenter train it once.
#[derive(Default)]
pub struct SegmenterCache {
    entries: HashMap<SegKey, (ParameterStore, TrainReport)>,
}

impl SegmenterCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn seeded(cfg: &TrainConfig, seed: u64, stream: &str) -> TrainConfig {
    TrainConfig { seed: rng::derive_named(seed, stream), ..cfg.clone() }
}

fn examples(records: &[PatientRecord], rois: &HashMap<String, Vec<crate::tensor::Tensor>>) -> Vec<ClassifierExample> {
    records
        .iter()
        .map(|r| ClassifierExample { patient_id: r.patient_id.clone(), slices: rois[&r.patient_id].clone(), label: r.label })
        .collect()
}

fn masks_of(r: &PatientRecord) -> Result<&[MaskSlice]> {
    r.masks
        .as_deref()
        .ok_or_else(|| Error::EmptyDataset(format!("patient `{}` has no masks", r.patient_id)))
}

/// Runs one cascade. `seed` fixes the split and both training runs.
pub fn run_pipeline(kind: PipelineKind, dataset: &DatasetManifest, cfg: &PipelineConfig, seed: u64) -> Result<PipelineResult> {
    let data = PreparedDataset::load(dataset, &cfg.preprocess)?;
    Ok(run_prepared(kind, &data, cfg, seed, &mut SegmenterCache::new())?.result)
}

pub fn run_prepared(
    kind: PipelineKind,
    data: &PreparedDataset,
    cfg: &PipelineConfig,
    seed: u64,
    cache: &mut SegmenterCache,
) -> Result<PipelineRun> {
    let split = SplitConfig { seed, ..cfg.split.clone() };
    run_with_split(kind, data, cfg, &split, None, seed, cache)
}

/// `seg_split` optionally trains the segmenter on a different split (used
/// by sweeps that keep the segmenter fixed).
fn run_with_split(
    kind: PipelineKind,
    data: &PreparedDataset,
    cfg: &PipelineConfig,
    split: &SplitConfig,
    seg_split: Option<&SplitConfig>,
    seed: u64,
    cache: &mut SegmenterCache,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let (train_m, val_m) = split_dataset(&data.manifest, split)?;
    let train = data.select(&train_m);
    let val = data.select(&val_m);
    for r in train.iter().chain(&val) {
        masks_of(r)?;
    }

    let seg_cfg = cfg.segmenter(kind);
    let segmenter = if cfg.oracle_segmenter {
        None
    } else {
        let (seg_train, seg_val) = match seg_split {
            Some(s) => {
                let (t, v) = split_dataset(&data.manifest, s)?;
                (data.select(&t), data.select(&v))
            }
            None => (train.clone(), val.clone()),
        };
        let key = (seg_cfg.name(), seg_train.iter().map(|r| r.patient_id.clone()).collect(), seed);
        let trained = match cache.entries.get(&key) {
            Some(hit) => hit.clone(),
            None => {
                let tc = seeded(&cfg.segmenter_training, seed, "segmenter");
                let out = train_segmenter(&seg_cfg, &seg_train, &seg_val, &cfg.augmentation, &tc, &cfg.segmenter_optimizer)?;
                cache.entries.insert(key, out.clone());
                out
            }
        };
        Some(trained)
    };

    // Candidate masks and ROI sequences for every patient.
    let mut predicted: HashMap<String, Vec<MaskSlice>> = HashMap::new();
    let mut rois = HashMap::new();
    for r in train.iter().chain(&val) {
        let masks = match &segmenter {
            Some((params, _)) => predict_masks(r, params, &seg_cfg, cfg.roi.threshold)?,
            None => masks_of(r)?.to_vec(),
        };
        let seq = crop_rois_from_masks(r, &masks, &cfg.roi)?;
        rois.insert(r.patient_id.clone(), seq.into_iter().map(|s| s.image.to_tensor()).collect());
        predicted.insert(r.patient_id.clone(), masks);
    }

    let cls_cfg = cfg.classifier(kind);
    let tc = seeded(&cfg.classifier_training, seed, "classifier");
    let train_x = examples(&train, &rois);
    let val_x = examples(&val, &rois);
    let (cls_params, cls_report) = train_classifier(&cls_cfg, &train_x, &val_x, &tc, &cfg.classifier_optimizer)?;

    let mut cm = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(val_x.len());
    for e in &val_x {
        let probability = predict_patient(&cls_params, &cls_cfg, e)?;
        let decision = u8::from(probability >= 0.5);
        cm.record(decision == 1, e.label == 1);
        predictions.push(PatientPrediction { patient_id: e.patient_id.clone(), label: e.label, probability, decision });
    }
    let mut slices = Vec::new();
    for r in &val {
        for (p, g) in predicted[&r.patient_id].iter().zip(masks_of(r)?) {
            slices.push((r.patient_id.as_str(), p, g));
        }
    }
    let dice = dice_summary(slices)?;
    let mut metrics = classification_metrics(&cm);
    metrics.dice = dice.slice_then_patient;
    let result = PipelineResult { kind, metrics, confusion: cm, dice, train_fraction: split.train_fraction, seed, predictions };
    Ok(PipelineRun { result, segmenter, classifier: (cls_params, cls_report) })
}

/// Full `kinds × fractions × seeds` grid of cascade runs.
pub fn sweep_training_fraction(
    kinds: &[PipelineKind],
    fractions: &[f64],
    seeds: &[u64],
    dataset: &DatasetManifest,
    cfg: &PipelineConfig,
) -> Result<SweepReport> {
    let data = PreparedDataset::load(dataset, &cfg.preprocess)?;
    sweep_prepared(kinds, fractions, seeds, &data, cfg, |_| {})
}

/// As [`sweep_training_fraction`] on a prepared dataset; `progress` sees each
/// finished cell.
pub fn sweep_prepared(
    kinds: &[PipelineKind],
    fractions: &[f64],
    seeds: &[u64],
    data: &PreparedDataset,
    cfg: &PipelineConfig,
    mut progress: impl FnMut(&SweepCell),
) -> Result<SweepReport> {
    if kinds.is_empty() || fractions.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep", "kinds, fractions and seeds must be non-empty"));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::config("sweep.fractions", format!("{f} is outside (0, 1)")));
    }
    let min_fraction = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut cache = SegmenterCache::new();
    let mut cells = Vec::with_capacity(kinds.len() * fractions.len() * seeds.len());
    for &seed in seeds {
        for &fraction in fractions {
            for &kind in kinds {
                let split = SplitConfig { train_fraction: fraction, seed };
                let seg_split = SplitConfig { train_fraction: min_fraction, seed };
                let fixed = (!cfg.retrain_segmenter).then_some(&seg_split);
                let run = run_with_split(kind, data, cfg, &split, fixed, seed, &mut cache)?;
                let cell = SweepCell {
                    kind,
                    fraction,
                    seed,
                    accuracy: run.result.metrics.accuracy,
                    sensitivity: run.result.metrics.recall,
                };
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(SweepReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in PipelineKind::ALL {
            assert_eq!(k.as_str().parse::<PipelineKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("unet_gru".parse::<PipelineKind>().is_err());
    }

    #[test]
    fn classifier_sizes_follow_roi() {
        let cfg = PipelineConfig { roi: RoiConfig { roi_size: 24, ..Default::default() }, ..Default::default() };
        match cfg.classifier(PipelineKind::UnetLstm) {
            ClassifierConfig::Recurrent(c) => {
                assert_eq!(c.input_size, 24);
                assert_eq!(c.cell, CellKind::Gated);
            }
            _ => panic!(),
        }
        match cfg.classifier(PipelineKind::UnetRnn) {
            ClassifierConfig::Recurrent(c) => assert_eq!(c.cell, CellKind::Plain),
            _ => panic!(),
        }
    }
}
