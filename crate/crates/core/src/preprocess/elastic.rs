use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::interp;
use crate::dataio::{MaskSlice, SliceImage};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticDeformParams {
    pub grid_shape: (usize, usize),
    /// Standard deviation of the coarse displacement vectors, in pixels.
    pub sigma: f64,
}

impl Default for ElasticDeformParams {
    fn default() -> Self {
        ElasticDeformParams { grid_shape: (3, 3), sigma: 10.0 }
    }
}

impl ElasticDeformParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.0 < 2 || self.grid_shape.1 < 2 {
            return Err(Error::config("elastic.grid_shape", "both dimensions must be at least 2"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("elastic.sigma", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-pixel backward displacements in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        DisplacementField { height, width, dx: vec![dx; height * width], dy: vec![dy; height * width] }
    }

    pub fn is_zero(&self) -> bool {
        self.dx.iter().chain(&self.dy).all(|&v| v == 0.0)
    }
}

/// Raw coarse vectors `(dy, dx)`, each `grid_rows × grid_cols`, drawn i.i.d.
/// from `N(0, sigma²)`.
pub fn sample_coarse_grid(params: &ElasticDeformParams, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let n = params.grid_shape.0 * params.grid_shape.1;
    if params.sigma == 0.0 {
        return Ok((vec![0.0; n], vec![0.0; n]));
    }
    let normal = Normal::new(0.0, params.sigma).map_err(|e| Error::config("elastic.sigma", e.to_string()))?;
    let mut rng = rng::rng_named(seed, "elastic");
    let dy = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let dx = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Ok((dy, dx))
}

/// Bicubic upsampling of a coarse grid whose nodes sit on the image corners
/// and are evenly spaced between them.
pub fn upsample_grid(coarse: &[f64], grid: (usize, usize), height: usize, width: usize) -> Vec<f64> {
    let (gh, gw) = grid;
    let sy = (gh - 1) as f64 / (height.max(2) - 1) as f64;
    let sx = (gw - 1) as f64 / (width.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            out.push(interp::bicubic(coarse, gh, gw, r as f64 * sy, c as f64 * sx, interp::clamp));
        }
    }
    out
}

pub fn sample_displacement_field(params: &ElasticDeformParams, height: usize, width: usize, seed: u64) -> Result<DisplacementField> {
    if height < params.grid_shape.0 || width < params.grid_shape.1 {
        return Err(Error::ShapeMismatch(format!(
            "field {height}x{width} smaller than grid {:?}",
            params.grid_shape
        )));
    }
    let (cy, cx) = sample_coarse_grid(params, seed)?;
    if params.sigma == 0.0 {
        return Ok(DisplacementField::zeros(height, width));
    }
    Ok(DisplacementField {
        height,
        width,
        dx: upsample_grid(&cx, params.grid_shape, height, width),
        dy: upsample_grid(&cy, params.grid_shape, height, width),
    })
}

/// Backward warp: output `(r, c)` samples the input at `(r + dy, c + dx)`.
/// Bicubic for the image, nearest neighbour for the mask, mirror extension.
pub fn elastic_deform(
    image: &SliceImage,
    mask: Option<&MaskSlice>,
    field: &DisplacementField,
) -> Result<(SliceImage, Option<MaskSlice>)> {
    let (h, w) = image.shape();
    if (field.height, field.width) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "field {}x{} vs image {h}x{w}",
            field.height, field.width
        )));
    }
    if let Some(m) = mask {
        if m.shape() != (h, w) {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs image {h}x{w}", m.shape())));
        }
    }
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| ((i / w) as f64 + field.dy[i], (i % w) as f64 + field.dx[i]))
        .collect();
    warp(image, mask, &coords)
}

/// Samples image and mask at explicit source coordinates, one per output pixel.
pub(crate) fn warp(
    image: &SliceImage,
    mask: Option<&MaskSlice>,
    coords: &[(f64, f64)],
) -> Result<(SliceImage, Option<MaskSlice>)> {
    let (h, w) = image.shape();
    let px: Vec<f64> =
        coords.iter().map(|&(y, x)| interp::bicubic(image.pixels(), h, w, y, x, interp::mirror)).collect();
    let out = SliceImage::with_min_size(h, w, px, 1)?;
    let out_mask = match mask {
        Some(m) => {
            let mp = coords.iter().map(|&(y, x)| interp::nearest(m.pixels(), h, w, y, x)).collect();
            Some(MaskSlice::new(h, w, mp)?)
        }
        None => None,
    };
    Ok((out, out_mask))
}
