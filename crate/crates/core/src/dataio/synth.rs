use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, PatientEntry};
use super::{MaskSlice, PatientRecord, SliceImage};
use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub image_size: usize,
    pub lesion_probability: f64,
    pub texture_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 200,
            slices_per_patient: 3,
            image_size: 64,
            lesion_probability: 0.5,
            texture_contrast: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("synthetic.n_patients", "must be positive"));
        }
        if self.slices_per_patient == 0 {
            return Err(Error::config("synthetic.slices_per_patient", "must be positive"));
        }
        if self.image_size < 16 {
            return Err(Error::config("synthetic.image_size", "must be at least 16"));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::config("synthetic.lesion_probability", "must lie in [0, 1]"));
        }
        if !(self.texture_contrast > 0.0 && self.texture_contrast.is_finite()) {
            return Err(Error::config("synthetic.texture_contrast", "must be positive"));
        }
        Ok(())
    }

    fn id_width(&self) -> usize {
        self.n_patients.saturating_sub(1).to_string().len().max(3)
    }
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Mirror-boundary box blur along rows then columns.
fn box_blur(src: &[f64], n: usize, radius: usize) -> Vec<f64> {
    let reflect = |i: isize| -> usize {
        let m = n as isize;
        let mut i = i;
        while i < 0 || i >= m {
            i = if i < 0 { -i - 1 } else { 2 * m - i - 1 };
        }
        i as usize
    };
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = (-r..=r).map(|d| src[y * n + reflect(x as isize + d)]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = (-r..=r).map(|d| tmp[reflect(y as isize + d) * n + x]).sum::<f64>() / norm;
        }
    }
    out
}

fn background(rng: &mut Rng, n: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (n / 10).max(1);
    let smooth = box_blur(&box_blur(&white, n, radius), n, radius);
    let sd = (smooth.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64).sqrt().max(1e-12);
    smooth
        .iter()
        .map(|s| {
            let fine: f64 = StandardNormal.sample(rng);
            0.4 + 0.08 * s / sd + 0.02 * fine
        })
        .collect()
}

struct Lesion {
    row: f64,
    col: f64,
    semi_a: f64,
    semi_b: f64,
    angle: f64,
    first: usize,
    last: usize,
}

fn sample_lesion(rng: &mut Rng, n: usize, slices: usize) -> Lesion {
    let (lo, hi) = (n as f64 / 12.0, n as f64 / 6.0);
    let margin = (hi.ceil() as usize + 2).min(n / 2 - 1);
    let run = rng.random_range(slices.div_ceil(2)..=slices);
    let first = rng.random_range(0..=slices - run);
    Lesion {
        row: rng.random_range(margin..n - margin) as f64,
        col: rng.random_range(margin..n - margin) as f64,
        semi_a: rng.random_range(lo..=hi),
        semi_b: rng.random_range(lo..=hi),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        first,
        last: first + run - 1,
    }
}

fn synth_patient(cfg: &SyntheticConfig, index: usize) -> Result<PatientRecord> {
    let mut rng = rng::rng_for(cfg.seed, index as u64);
    let n = cfg.image_size;
    let positive = rng.random::<f64>() < cfg.lesion_probability;
    let lesion = positive.then(|| sample_lesion(&mut rng, n, cfg.slices_per_patient));
    let mut slices = Vec::with_capacity(cfg.slices_per_patient);
    let mut masks = Vec::with_capacity(cfg.slices_per_patient);
    for s in 0..cfg.slices_per_patient {
        let mut img = background(&mut rng, n);
        let mut mask = vec![0u8; n * n];
        if let Some(l) = lesion.as_ref().filter(|l| (l.first..=l.last).contains(&s)) {
            // Taper the lesion towards the ends of its slice run.
            let mid = (l.first + l.last) as f64 / 2.0;
            let half = ((l.last - l.first) as f64 / 2.0).max(1.0);
            let scale = 1.0 - 0.3 * (s as f64 - mid).abs() / half;
            let (sin, cos) = l.angle.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f64 - l.row, x as f64 - l.col);
                    let u = (dx * cos + dy * sin) / (l.semi_a * scale);
                    let v = (-dx * sin + dy * cos) / (l.semi_b * scale);
                    let r2 = u * u + v * v;
                    if r2 <= 1.0 {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        let i = y * n + x;
                        img[i] = (img[i] + cfg.texture_contrast * (0.6 + 0.4 * (1.0 - r2))) * (1.0 + 0.05 * noise);
                        mask[i] = 1;
                    }
                }
            }
        }
        let px = img.into_iter().map(|v| f64::from(quantize(v)) / 65535.0).collect();
        slices.push(SliceImage::new(n, n, px)?);
        masks.push(MaskSlice::new(n, n, mask)?);
    }
    let label = u8::from(masks.iter().any(|m| m.area() > 0));
    let id = format!("P{:0width$}", index, width = cfg.id_width());
    PatientRecord::new(id, slices, Some(masks), label)
}

/// In-memory synthetic cohort. Slice intensities are already quantized to the
/// 16-bit grid, so writing and reloading them is lossless.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    (0..cfg.n_patients).map(|i| synth_patient(cfg, i)).collect()
}

/// Writes the synthetic cohort under `root` in the manifest layout.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let rec = synth_patient(cfg, i)?;
        let dir = root.join(&rec.patient_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut slice_paths = Vec::new();
        let mut mask_paths = Vec::new();
        let masks = rec.masks.as_deref().unwrap_or_default();
        for (s, (img, mask)) in rec.slices.iter().zip(masks).enumerate() {
            let slice_rel = format!("{}/slice_{s:02}.png", rec.patient_id);
            let mask_rel = format!("{}/mask_{s:02}.png", rec.patient_id);
            let samples: Vec<u16> = img.pixels().iter().map(|&v| quantize(v)).collect();
            imageio::write_gray16(&root.join(&slice_rel), img.width(), img.height(), &samples)?;
            let bytes: Vec<u8> = mask.pixels().iter().map(|&v| v * 255).collect();
            imageio::write_gray8(&root.join(&mask_rel), mask.width(), mask.height(), &bytes)?;
            slice_paths.push(slice_rel);
            mask_paths.push(mask_rel);
        }
        entries.push(PatientEntry { id: rec.patient_id, label: rec.label, slices: slice_paths, masks: Some(mask_paths) });
    }
    let manifest = DatasetManifest { root_path: root.to_path_buf(), source_tag: "synthetic".into(), patients: entries };
    manifest.write()?;
    Ok(manifest)
}
