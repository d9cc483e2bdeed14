use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MaskSlice, PatientRecord, SliceImage};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub id: String,
    pub label: u8,
    pub slices: Vec<String>,
    pub masks: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    source_tag: String,
    patients: Vec<PatientEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root_path: PathBuf,
    pub source_tag: String,
    pub patients: Vec<PatientEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.patients.iter().map(|p| p.id.as_str())
    }

    pub fn entry(&self, id: &str) -> Option<&PatientEntry> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn to_json(&self) -> String {
        let file = ManifestFile { source_tag: self.source_tag.clone(), patients: self.patients.clone() };
        serde_json::to_string_pretty(&file).expect("manifest serializes")
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root_path.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    fn subset(&self, keep: &[bool]) -> DatasetManifest {
        DatasetManifest {
            root_path: self.root_path.clone(),
            source_tag: self.source_tag.clone(),
            patients: self.patients.iter().zip(keep).filter(|(_, &k)| k).map(|(p, _)| p.clone()).collect(),
        }
    }
}

/// Reads `<root>/manifest.json` (a directory path is also accepted).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let parsed: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedManifest { path: file.clone(), message: e.to_string() })?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    for p in &parsed.patients {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::DuplicatePatient(p.id.clone()));
        }
        if p.label > 1 {
            return Err(Error::MalformedManifest {
                path: file.clone(),
                message: format!("patient `{}` has label {}", p.id, p.label),
            });
        }
        for rel in p.slices.iter().chain(p.masks.iter().flatten()) {
            let full = root.join(rel);
            if !full.is_file() {
                return Err(Error::DanglingReference { patient: p.id.clone(), path: full });
            }
        }
    }
    Ok(DatasetManifest { root_path: root, source_tag: parsed.source_tag, patients: parsed.patients })
}

/// Decodes one patient: 16-bit slices scaled to `[0, 1]`, masks binarized at 128.
pub fn load_patient(manifest: &DatasetManifest, id: &str) -> Result<PatientRecord> {
    let entry = manifest.entry(id).ok_or_else(|| Error::UnknownPatient(id.to_string()))?;
    let slices = entry
        .slices
        .iter()
        .map(|rel| {
            let path = manifest.root_path.join(rel);
            let img = imageio::read_gray(&path)?;
            let max = if img.bit_depth == 16 { 65535.0 } else { 255.0 };
            let px = img.samples.iter().map(|&v| f64::from(v) / max).collect();
            SliceImage::new(img.height, img.width, px).map_err(|e| Error::Decode { path, message: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = match &entry.masks {
        None => None,
        Some(list) => Some(
            list.iter()
                .map(|rel| {
                    let img = imageio::read_gray(&manifest.root_path.join(rel))?;
                    let px = img.samples.iter().map(|&v| u8::from(v >= 128)).collect();
                    MaskSlice::new(img.height, img.width, px)
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    PatientRecord::new(entry.id.clone(), slices, masks, entry.label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.9, seed: 0 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("split.train_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// `round_half_up(train_fraction · n)`.
    pub fn train_count(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64 + 0.5).floor() as usize).min(n)
    }
}

/// Patient-level split. The seeded permutation's first `train_count` entries
/// form the training set; both subsets keep manifest order.
pub fn split_dataset(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<(DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let n = manifest.len();
    if n == 0 {
        return Err(Error::EmptyDataset("cannot split an empty manifest".into()));
    }
    if cfg.train_fraction < 1.0 && n < 2 {
        return Err(Error::EmptyDataset("need at least two patients for a proper split".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng_named(cfg.seed, "split"));
    let mut in_train = vec![false; n];
    for &i in &order[..cfg.train_count(n)] {
        in_train[i] = true;
    }
    let in_val: Vec<bool> = in_train.iter().map(|t| !t).collect();
    Ok((manifest.subset(&in_train), manifest.subset(&in_val)))
}
