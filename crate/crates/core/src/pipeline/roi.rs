use serde::{Deserialize, Serialize};

use crate::dataio::{MaskSlice, PatientRecord, SliceImage};
use crate::error::{Error, Result};
use crate::nets::{ParameterStore, SegmenterConfig};
use crate::preprocess::resize_to;
use crate::tensor::Tensor;
use crate::train::segment;

pub const DEFAULT_MARGIN: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub threshold: f64,
    pub top_k: usize,
    pub margin: usize,
    /// Side length of every ROI handed to the classifier.
    pub roi_size: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig { threshold: 0.5, top_k: 1, margin: DEFAULT_MARGIN, roi_size: 32 }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        if self.top_k == 0 {
            return Err(Error::config("roi.top_k", "must be at least 1"));
        }
        if self.roi_size < 2 {
            return Err(Error::config("roi.roi_size", "must be at least 2"));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::config("roi.threshold", "must lie strictly between 0 and 1"));
    }
    Ok(())
}

/// Connected lesion candidate; `bbox` is `(row_min, col_min, row_max, col_max)`
/// inclusive, after margin expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRegion {
    pub bbox: (usize, usize, usize, usize),
    pub area: usize,
    pub slice_index: usize,
}

/// Pixel is foreground iff probability ≥ threshold.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<MaskSlice> {
    check_threshold(threshold)?;
    let (h, w) = match prob.shape() {
        [h, w] | [1, h, w] => (*h, *w),
        s => return Err(Error::ShapeMismatch(format!("probability map of shape {s:?}"))),
    };
    MaskSlice::new(h, w, prob.data().iter().map(|&p| u8::from(p >= threshold)).collect())
}

pub fn extract_candidates(mask: &MaskSlice, slice_index: usize, top_k: usize) -> Vec<CandidateRegion> {
    extract_candidates_with_margin(mask, slice_index, top_k, DEFAULT_MARGIN)
}

/// 8-connected components ordered by area (descending), then `(row_min,
/// col_min)`; the first `top_k` are returned with their boxes grown by
/// `margin` and clipped to the image.
pub fn extract_candidates_with_margin(mask: &MaskSlice, slice_index: usize, top_k: usize, margin: usize) -> Vec<CandidateRegion> {
    let (h, w) = mask.shape();
    let px = mask.pixels();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if px[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut r0, mut c0, mut r1, mut c1, mut area) = (h, w, 0, 0, 0);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            (r0, c0, r1, c1) = (r0.min(r), c0.min(c), r1.max(r), c1.max(c));
            area += 1;
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if px[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comps.push((area, (r0, c0, r1, c1)));
    }
    comps.sort_by(|a, b| b.0.cmp(&a.0).then((a.1 .0, a.1 .1).cmp(&(b.1 .0, b.1 .1))));
    comps
        .into_iter()
        .take(top_k)
        .map(|(area, (r0, c0, r1, c1))| CandidateRegion {
            bbox: (r0.saturating_sub(margin), c0.saturating_sub(margin), (r1 + margin).min(h - 1), (c1 + margin).min(w - 1)),
            area,
            slice_index,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiSlice {
    pub image: SliceImage,
    pub region: Option<CandidateRegion>,
    /// No candidate was found; `image` is a centre crop.
    pub fallback: bool,
}

fn crop(image: &SliceImage, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<SliceImage> {
    let w = image.width();
    let mut px = Vec::with_capacity((r1 - r0 + 1) * (c1 - c0 + 1));
    for r in r0..=r1 {
        px.extend_from_slice(&image.pixels()[r * w + c0..=r * w + c1]);
    }
    SliceImage::with_min_size(r1 - r0 + 1, c1 - c0 + 1, px, 1)
}

/// ROI per slice from already binarized masks.
pub fn crop_rois_from_masks(patient: &PatientRecord, masks: &[MaskSlice], cfg: &RoiConfig) -> Result<Vec<RoiSlice>> {
    cfg.validate()?;
    if masks.len() != patient.slices.len() {
        return Err(Error::ShapeMismatch(format!("{} slices but {} masks", patient.slices.len(), masks.len())));
    }
    let mut out = Vec::with_capacity(masks.len());
    for (i, (image, mask)) in patient.slices.iter().zip(masks).enumerate() {
        let (h, w) = image.shape();
        let region = extract_candidates_with_margin(mask, i, 1, cfg.margin).into_iter().next();
        let (r0, c0, r1, c1) = match region {
            Some(reg) => reg.bbox,
            None => {
                let side_h = cfg.roi_size.min(h);
                let side_w = cfg.roi_size.min(w);
                let (r0, c0) = ((h - side_h) / 2, (w - side_w) / 2);
                (r0, c0, r0 + side_h - 1, c0 + side_w - 1)
            }
        };
        let patch = crop(image, r0, c0, r1, c1)?;
        let sized = if patch.shape() == (cfg.roi_size, cfg.roi_size) {
            patch
        } else {
            resize_to(&patch, cfg.roi_size, cfg.roi_size)?
        };
        out.push(RoiSlice { image: sized, region, fallback: region.is_none() });
    }
    Ok(out)
}

/// Segmented, binarized top-1 candidate masks for every slice.
pub fn predict_masks(patient: &PatientRecord, params: &ParameterStore, config: &SegmenterConfig, threshold: f64) -> Result<Vec<MaskSlice>> {
    patient.slices.iter().map(|s| binarize(&segment(params, config, s)?, threshold)).collect()
}

/// Segment, binarize, take the top candidate, crop and resize; slices without
/// a candidate fall back to a flagged centre crop. Slice order is kept.
pub fn crop_roi_sequence(
    patient: &PatientRecord,
    params: &ParameterStore,
    config: &SegmenterConfig,
    cfg: &RoiConfig,
) -> Result<Vec<RoiSlice>> {
    let masks = predict_masks(patient, params, config, cfg.threshold)?;
    crop_rois_from_masks(patient, &masks, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(h: usize, w: usize, on: &[(usize, usize)]) -> MaskSlice {
        let mut px = vec![0u8; h * w];
        for &(r, c) in on {
            px[r * w + c] = 1;
        }
        MaskSlice::new(h, w, px).unwrap()
    }

    fn block(r: usize, c: usize, n: usize) -> Vec<(usize, usize)> {
        (r..r + n).flat_map(|y| (c..c + n).map(move |x| (y, x))).collect()
    }

    #[test]
    fn binarize_boundary() {
        assert_eq!(binarize(&Tensor::full(&[1, 4, 4], 0.5), 0.5).unwrap().area(), 16);
        assert_eq!(binarize(&Tensor::zeros(&[4, 4]), 0.5).unwrap().area(), 0);
        assert!(binarize(&Tensor::zeros(&[4, 4]), 1.0).is_err());
        assert!(binarize(&Tensor::zeros(&[4, 4]), 0.0).is_err());
    }

    #[test]
    fn single_blob_geometry() {
        let m = mask_with(64, 64, &block(10, 10, 3));
        let c = extract_candidates(&m, 2, 5);
        assert_eq!(c, [CandidateRegion { bbox: (6, 6, 16, 16), area: 9, slice_index: 2 }]);
        assert!(extract_candidates(&mask_with(8, 8, &[]), 0, 1).is_empty());
    }

    #[test]
    fn ordering_and_clipping() {
        let mut on = block(20, 20, 3);
        on.extend(block(0, 0, 2));
        let m = mask_with(32, 32, &on);
        let top = extract_candidates(&m, 0, 1);
        assert_eq!(top[0].area, 9);
        let both = extract_candidates(&m, 0, 2);
        assert_eq!(both[1].bbox, (0, 0, 5, 5));
        // Equal areas fall back to coordinates.
        let m = mask_with(32, 32, &[(5, 20), (5, 3), (1, 30)]);
        let order: Vec<_> = extract_candidates_with_margin(&m, 0, 3, 0).iter().map(|c| c.bbox).collect();
        assert_eq!(order, [(1, 30, 1, 30), (5, 3, 5, 3), (5, 20, 5, 20)]);
    }

    #[test]
    fn diagonal_pixels_connect() {
        let m = mask_with(8, 8, &[(1, 1), (2, 2), (3, 3)]);
        assert_eq!(extract_candidates(&m, 0, 5).len(), 1);
    }

    fn patient(n: usize, slices: usize) -> PatientRecord {
        let s = SliceImage::new(n, n, (0..n * n).map(|i| (i % 7) as f64).collect()).unwrap();
        PatientRecord::new("P".into(), vec![s; slices], None, 0).unwrap()
    }

    #[test]
    fn fallback_and_shape_contract() {
        let p = patient(48, 3);
        let masks = vec![mask_with(48, 48, &[]), mask_with(48, 48, &block(30, 30, 4)), mask_with(48, 48, &[])];
        let rois = crop_rois_from_masks(&p, &masks, &RoiConfig::default()).unwrap();
        assert_eq!(rois.iter().map(|r| r.fallback).collect::<Vec<_>>(), [true, false, true]);
        assert!(rois.iter().all(|r| r.image.shape() == (32, 32)));
        assert_eq!(rois[1].region.unwrap().bbox, (26, 26, 37, 37));
        // Fallback crop is the exact centre 32×32 window.
        assert_eq!(rois[0].image.get(0, 0), p.slices[0].get(8, 8));
    }
}
