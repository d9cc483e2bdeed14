//! Patient slice stacks, dataset manifests, splitting, and the synthetic
//! lesion generator.

mod manifest;
mod synth;

pub use manifest::{load_manifest, load_patient, split_dataset, DatasetManifest, PatientEntry, SplitConfig, MANIFEST_FILE};
pub use synth::{generate_synthetic, synthesize, SyntheticConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SLICE_SIZE: usize = 8;

/// Single-channel slice; intensities are dimensionless.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::with_min_size(height, width, pixels, MIN_SLICE_SIZE)
    }

    /// Like [`SliceImage::new`] but with a caller-chosen minimum side; used
    /// for small intermediate crops.
    pub(crate) fn with_min_size(height: usize, width: usize, pixels: Vec<f64>, min: usize) -> Result<Self> {
        if height < min || width < min {
            return Err(Error::ShapeMismatch(format!("slice {height}x{width} below {min}x{min}")));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "slice {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice pixel".into()));
        }
        Ok(SliceImage { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// `(1, H, W)` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height, self.width], self.pixels.clone()).expect("slice shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::ShapeMismatch(format!("expected a single-channel map, got {s:?}"))),
        };
        Self::with_min_size(h, w, t.data().to_vec(), 1)
    }
}

/// Binary lesion mask paired with a slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSlice {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl MaskSlice {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::OutOfRange("mask pixels must be 0 or 1".into()));
        }
        Ok(MaskSlice { height, width, pixels })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        MaskSlice { height, width, pixels: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| f64::from(v)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("mask shape")
    }
}

/// One patient: ordered slices, optional aligned masks, binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub slices: Vec<SliceImage>,
    pub masks: Option<Vec<MaskSlice>>,
    pub label: u8,
}

impl PatientRecord {
    pub fn new(patient_id: String, slices: Vec<SliceImage>, masks: Option<Vec<MaskSlice>>, label: u8) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::EmptyDataset(format!("patient `{patient_id}` has no slices")));
        }
        if label > 1 {
            return Err(Error::OutOfRange(format!("patient `{patient_id}` label {label}")));
        }
        if let Some(masks) = &masks {
            if masks.len() != slices.len() {
                return Err(Error::ShapeMismatch(format!(
                    "patient `{patient_id}`: {} slices but {} masks",
                    slices.len(),
                    masks.len()
                )));
            }
            for (i, (s, m)) in slices.iter().zip(masks).enumerate() {
                if s.shape() != m.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "patient `{patient_id}` slice {i}: image {:?} vs mask {:?}",
                        s.shape(),
                        m.shape()
                    )));
                }
            }
        }
        Ok(PatientRecord { patient_id, slices, masks, label })
    }
}
