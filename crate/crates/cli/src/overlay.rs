//! Four-panel overlay figures: input, preprocessed input, ground-truth mask,
//! and the predicted mask tinted over the preprocessed input.
//!
//! A tinted pixel always has `r != g`; untinted pixels are pure gray. The
//! tinted set of the last panel is therefore recoverable bit for bit.

use std::path::{Path, PathBuf};

use mricascade::dataio::{MaskSlice, PatientRecord, SliceImage};
use mricascade::imageio;
use mricascade::nets::{ParameterStore, SegmenterConfig};
use mricascade::pipeline::binarize;
use mricascade::preprocess::{preprocess_mask, preprocess_slice, resize_to, PreprocessConfig};
use mricascade::train::segment;
use mricascade::{Error, Result};

pub const PANELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        imageio::write_rgb8(path, self.width, self.height, &self.data)
    }

    pub fn load(path: &Path) -> Result<RgbImage> {
        let (width, height, data) = imageio::read_rgb8(path)?;
        Ok(RgbImage { width, height, data })
    }
}

/// Min-max scaling to 8-bit gray; constant images map to black.
pub fn gray_levels(image: &SliceImage) -> Vec<u8> {
    let px = image.pixels();
    let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0; px.len()];
    }
    px.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Red tint at 50% opacity.
pub fn tint(level: u8) -> [u8; 3] {
    let g = u16::from(level);
    [((g + 255) / 2) as u8, (g / 2) as u8, (g / 2) as u8]
}

pub fn tinted(gray: &[u8], mask: &MaskSlice) -> Result<Vec<u8>> {
    if gray.len() != mask.pixels().len() {
        return Err(Error::ShapeMismatch(format!("overlay: {} gray levels vs {} mask pixels", gray.len(), mask.pixels().len())));
    }
    Ok(gray.iter().zip(mask.pixels()).flat_map(|(&g, &m)| if m == 1 { tint(g) } else { [g, g, g] }).collect())
}

/// Mask of pixels whose red and green channels differ in panel `panel`.
pub fn tinted_set(image: &RgbImage, panel: usize) -> Result<MaskSlice> {
    let w = image.width / PANELS;
    let mut px = Vec::with_capacity(w * image.height);
    for r in 0..image.height {
        for c in 0..w {
            let [red, green, _] = image.pixel(r, panel * w + c);
            px.push(u8::from(red != green));
        }
    }
    MaskSlice::new(image.height, w, px)
}

/// Lays out the four panels side by side. `raw` is resampled to the
/// preprocessed size for display.
pub fn compose(raw: &SliceImage, pre: &SliceImage, truth: Option<&MaskSlice>, pred: &MaskSlice) -> Result<RgbImage> {
    let (h, w) = pre.shape();
    if pred.shape() != (h, w) || truth.is_some_and(|t| t.shape() != (h, w)) {
        return Err(Error::ShapeMismatch("overlay panels must share the preprocessed size".into()));
    }
    let raw = if raw.shape() == (h, w) { raw.clone() } else { resize_to(raw, h, w)? };
    let gray_raw = gray_levels(&raw);
    let gray_pre = gray_levels(pre);
    let truth_px: Vec<u8> = match truth {
        Some(t) => t.pixels().iter().map(|&v| v * 255).collect(),
        None => vec![0; h * w],
    };
    let gray_rgb = |g: &[u8]| -> Vec<u8> { g.iter().flat_map(|&v| [v, v, v]).collect() };
    let panels = [gray_rgb(&gray_raw), gray_rgb(&gray_pre), gray_rgb(&truth_px), tinted(&gray_pre, pred)?];
    let mut data = Vec::with_capacity(PANELS * 3 * h * w);
    for r in 0..h {
        for p in &panels {
            data.extend_from_slice(&p[3 * r * w..3 * (r + 1) * w]);
        }
    }
    Ok(RgbImage { width: PANELS * w, height: h, data })
}

/// Segments every slice of a raw patient and writes one figure per slice as
/// `<patient>_slice_<ss>.png`.
pub fn render_patient(
    raw: &PatientRecord,
    params: &ParameterStore,
    segmenter: &SegmenterConfig,
    preprocess: &PreprocessConfig,
    threshold: f64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (s, slice) in raw.slices.iter().enumerate() {
        let pre = preprocess_slice(slice, preprocess)?;
        let truth = raw.masks.as_ref().map(|m| preprocess_mask(&m[s], preprocess)).transpose()?;
        let pred = binarize(&segment(params, segmenter, &pre)?, threshold)?;
        let figure = compose(slice, &pre, truth.as_ref(), &pred)?;
        let path = out.join(format!("{}_slice_{s:02}.png", raw.patient_id));
        figure.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
