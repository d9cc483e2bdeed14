//! Normalization, bicubic resizing, elastic deformation, and augmentation.

mod augment;
mod elastic;
pub mod interp;

pub use augment::{augment, AugmentationConfig};
pub use elastic::{
    elastic_deform, sample_coarse_grid, sample_displacement_field, upsample_grid, DisplacementField, ElasticDeformParams,
};

use serde::{Deserialize, Serialize};

use crate::dataio::{MaskSlice, SliceImage};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    #[default]
    Zscore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub normalize_mode: NormalizeMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_size: 256, normalize_mode: NormalizeMode::Zscore }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < 16 {
            return Err(Error::config("preprocess.target_size", "must be at least 16"));
        }
        Ok(())
    }
}

const STD_FLOOR: f64 = 1e-8;

/// Per-slice z-score with the population standard deviation. Near-constant
/// slices map to zeros.
pub fn normalize(image: &SliceImage) -> Result<SliceImage> {
    let px = image.pixels();
    if px.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalize input".into()));
    }
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let var = px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let out = if std > STD_FLOOR { px.iter().map(|v| (v - mean) / std).collect() } else { vec![0.0; px.len()] };
    SliceImage::with_min_size(image.height(), image.width(), out, 1)
}

/// Pixel-centre aligned source coordinate for output index `i`.
fn source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    (i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5
}

pub fn resize_to(image: &SliceImage, height: usize, width: usize) -> Result<SliceImage> {
    if height < 2 || width < 2 {
        return Err(Error::OutOfRange(format!("resize target {height}x{width} below 2x2")));
    }
    let (h, w) = image.shape();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = source_coord(r, h, height);
        for c in 0..width {
            let x = source_coord(c, w, width);
            out.push(interp::bicubic(image.pixels(), h, w, y, x, interp::mirror));
        }
    }
    SliceImage::with_min_size(height, width, out, 2)
}

/// Bicubic resampling to `size × size`.
pub fn resize(image: &SliceImage, size: usize) -> Result<SliceImage> {
    resize_to(image, size, size)
}

/// Nearest-neighbour resampling, used for masks.
pub fn resize_mask(mask: &MaskSlice, height: usize, width: usize) -> Result<MaskSlice> {
    let (h, w) = mask.shape();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = source_coord(r, h, height);
        for c in 0..width {
            out.push(interp::nearest(mask.pixels(), h, w, y, source_coord(c, w, width)));
        }
    }
    MaskSlice::new(height, width, out)
}

/// Resize to the target size, then normalize.
pub fn preprocess_slice(image: &SliceImage, cfg: &PreprocessConfig) -> Result<SliceImage> {
    let sized = if image.shape() == (cfg.target_size, cfg.target_size) {
        image.clone()
    } else {
        resize(image, cfg.target_size)?
    };
    normalize(&sized)
}

pub fn preprocess_mask(mask: &MaskSlice, cfg: &PreprocessConfig) -> Result<MaskSlice> {
    if mask.shape() == (cfg.target_size, cfg.target_size) {
        Ok(mask.clone())
    } else {
        resize_mask(mask, cfg.target_size, cfg.target_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> SliceImage {
        let px = (0..h * w).map(|i| f(i / w, i % w)).collect();
        SliceImage::with_min_size(h, w, px, 1).unwrap()
    }

    #[test]
    fn zscore_examples() {
        assert!(normalize(&img(8, 8, |_, _| 0.7)).unwrap().pixels().iter().all(|&v| v == 0.0));
        let z = normalize(&img(2, 2, |r, c| (2 * r + c) as f64)).unwrap();
        let s = 1.25f64.sqrt();
        for (got, x) in z.pixels().iter().zip([0.0, 1.0, 2.0, 3.0]) {
            assert!((got - (x - 1.5) / s).abs() < 1e-12);
        }
        assert!((z.pixels()[0] + 1.3416).abs() < 1e-4);
    }

    #[test]
    fn resize_identity_and_constant() {
        let a = img(12, 12, |r, c| ((r * 7 + c * 3) % 11) as f64 / 11.0);
        let same = resize(&a, 12).unwrap();
        assert!(same.pixels().iter().zip(a.pixels()).all(|(x, y)| (x - y).abs() < 1e-9));
        for size in [5, 12, 29] {
            assert!(resize(&img(12, 12, |_, _| 0.42), size).unwrap().pixels().iter().all(|v| (v - 0.42).abs() < 1e-9));
        }
        assert!(resize(&a, 1).is_err());
    }

    #[test]
    fn downsampled_ramp_matches_analytic_values() {
        let n = 512;
        let ramp = |y: f64, x: f64| (y + 2.0 * x) / (3.0 * n as f64);
        let big = img(n, n, |r, c| ramp(r as f64, c as f64));
        let small = resize(&big, 256).unwrap();
        for r in 0..256 {
            for c in 0..256 {
                let want = ramp(2.0 * r as f64 + 0.5, 2.0 * c as f64 + 0.5);
                assert!((small.get(r, c) - want).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn mask_resize_stays_binary() {
        let m = MaskSlice::new(4, 4, vec![0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0]).unwrap();
        let big = resize_mask(&m, 8, 8).unwrap();
        assert_eq!(big.area(), 4 * m.area());
    }

    proptest! {
        #[test]
        fn normalize_idempotent(px in proptest::collection::vec(-5.0f64..5.0, 64)) {
            let a = normalize(&SliceImage::new(8, 8, px).unwrap()).unwrap();
            let b = normalize(&a).unwrap();
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
