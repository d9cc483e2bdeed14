use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::elastic::{sample_displacement_field, warp, ElasticDeformParams};
use crate::dataio::{MaskSlice, SliceImage};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Candidate rotation angles in degrees; one is picked uniformly per copy.
    pub rotations: Vec<f64>,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Chance that each enabled flip is applied to a copy.
    pub flip_probability: f64,
    pub max_translation: usize,
    pub noise_sigma: f64,
    /// `sigma = 0` disables the deformation.
    pub elastic: ElasticDeformParams,
    pub copies_per_sample: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotations: vec![-15.0, 15.0],
            flip_horizontal: true,
            flip_vertical: false,
            flip_probability: 0.5,
            max_translation: 10,
            noise_sigma: 0.01,
            elastic: ElasticDeformParams::default(),
            copies_per_sample: 1,
        }
    }
}

impl AugmentationConfig {
    /// Geometry and noise all switched off.
    pub fn identity() -> Self {
        AugmentationConfig {
            rotations: vec![],
            flip_horizontal: false,
            flip_vertical: false,
            flip_probability: 0.5,
            max_translation: 0,
            noise_sigma: 0.0,
            elastic: ElasticDeformParams { sigma: 0.0, ..Default::default() },
            copies_per_sample: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("augmentation.rotations", "angles must be finite"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("augmentation.flip_probability", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("augmentation.noise_sigma", "must be finite and non-negative"));
        }
        self.elastic.validate()
    }
}

/// One sampled composition, stored as the backward coordinate map
/// `output pixel -> source position`.
fn sample_coords(cfg: &AugmentationConfig, h: usize, w: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut rng = rng::rng_named(seed, "geometry");
    let angle = cfg.rotations.choose(&mut rng).copied().unwrap_or(0.0);
    let flip_h = cfg.flip_horizontal && rng.random::<f64>() < cfg.flip_probability;
    let flip_v = cfg.flip_vertical && rng.random::<f64>() < cfg.flip_probability;
    let t = cfg.max_translation as i64;
    let (ty, tx) = if t > 0 { (rng.random_range(-t..=t) as f64, rng.random_range(-t..=t) as f64) } else { (0.0, 0.0) };
    let field = if cfg.elastic.sigma > 0.0 {
        Some(sample_displacement_field(&cfg.elastic, h, w, rng::derive_named(seed, "field"))?)
    } else {
        None
    };

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.to_radians().sin_cos();
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h * w {
        // Forward order is rotate, flip, translate, deform; undo it in reverse.
        let (mut y, mut x) = ((i / w) as f64, (i % w) as f64);
        if let Some(f) = &field {
            y += f.dy[i];
            x += f.dx[i];
        }
        y -= ty;
        x -= tx;
        if flip_v {
            y = (h - 1) as f64 - y;
        }
        if flip_h {
            x = (w - 1) as f64 - x;
        }
        if angle != 0.0 {
            let (dy, dx) = (y - cy, x - cx);
            y = cy + cos * dy - sin * dx;
            x = cx + sin * dy + cos * dx;
        }
        coords.push((y, x));
    }
    Ok(coords)
}

/// `copies_per_sample` independently augmented copies. Geometry is applied
/// identically to image and mask in a single resampling; noise touches the
/// image only. Copy `k` depends only on `(seed, k)`.
pub fn augment(
    image: &SliceImage,
    mask: Option<&MaskSlice>,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<(SliceImage, Option<MaskSlice>)>> {
    cfg.validate()?;
    let (h, w) = image.shape();
    (0..cfg.copies_per_sample)
        .map(|k| {
            let copy_seed = rng::derive(seed, k as u64);
            let coords = sample_coords(cfg, h, w, copy_seed)?;
            let (img, m) = warp(image, mask, &coords)?;
            if cfg.noise_sigma == 0.0 {
                return Ok((img, m));
            }
            let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
            let mut rng = rng::rng_named(copy_seed, "noise");
            let px = img.pixels().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Ok((SliceImage::with_min_size(h, w, px, 1)?, m))
        })
        .collect()
}
