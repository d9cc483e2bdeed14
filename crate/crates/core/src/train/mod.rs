//! Losses, plain SGD, the two training loops, checkpoints, and finite
//! difference gradient verification.

mod checkpoint;
mod gradcheck;
mod loops;

pub use checkpoint::{load_pretrained, save_checkpoint, save_report, LoadReport};
pub use gradcheck::{grad_check, grad_check_with, standard_suite, BlockKind, CheckModel, GradCheckOptions, SuiteCase};
pub use loops::{
    predict_patient, segment, train_classifier, train_segmenter, ClassifierExample, EpochRecord, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Rescales the batch gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.0003, max_grad_norm: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and positive"));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::config("optimizer.max_grad_norm", "must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    #[default]
    Bce,
    BcePlusSoftdice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub seg_loss: SegLoss,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 8, seed: 0, seg_loss: SegLoss::Bce, early_stop_patience: 5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// `θ ← θ − lr · g` for every tensor.
pub fn sgd_step(params: &ParameterStore, grads: &ParameterStore, cfg: &OptimizerConfig) -> Result<ParameterStore> {
    cfg.validate()?;
    params.check_aligned(grads)?;
    let mut step = -cfg.learning_rate;
    if let Some(max) = cfg.max_grad_norm {
        let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            step *= max / norm;
        }
    }
    let mut out = params.clone();
    out.add_scaled(grads, step);
    Ok(out)
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Loss and its gradient with respect to the probability map. The clamp only
/// bounds the reported loss; the gradient is the unclamped one, so a pixel
/// saturated on the wrong side still receives a `(p - y)` signal after the
/// sigmoid's chain factor.
pub fn seg_loss(prob: &Tensor, mask: &Tensor, kind: SegLoss) -> Result<(f64, Tensor)> {
    if prob.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!("seg_loss: {:?} vs {:?}", prob.shape(), mask.shape())));
    }
    let n = prob.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(prob.len());
    for (&p, &y) in prob.data().iter().zip(mask.data()) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let (pg, qg) = (p.max(f64::MIN_POSITIVE), (1.0 - p).max(f64::EPSILON / 2.0));
        let g = -(y / pg - (1.0 - y) / qg) / n;
        grad.push(g);
    }
    loss /= n;
    if kind == SegLoss::BcePlusSoftdice {
        let sp: f64 = prob.data().iter().sum();
        let sy: f64 = mask.data().iter().sum();
        let spy: f64 = prob.data().iter().zip(mask.data()).map(|(p, y)| p * y).sum();
        let den = sp + sy + 1.0;
        let num = 2.0 * spy + 1.0;
        loss += 1.0 - num / den;
        for (g, &y) in grad.iter_mut().zip(mask.data()) {
            *g -= (2.0 * y * den - num) / (den * den);
        }
    }
    Ok((loss, Tensor::from_vec(prob.shape(), grad)?))
}

/// Softmax cross-entropy; gradient `softmax(logits) − one_hot(label)`.
pub fn cls_loss(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::OutOfRange(format!("label {label} with {} classes", z.len())));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let log_sum = sum.ln() + max;
    let mut grad: Vec<f64> = z.iter().map(|v| (v - log_sum).exp()).collect();
    grad[label] -= 1.0;
    Ok((log_sum - z[label], Tensor::from_vec(logits.shape(), grad)?))
}

/// Softmax probabilities.
pub fn softmax(logits: &Tensor) -> Vec<f64> {
    let z = logits.data();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn sgd_examples() {
        let lr = OptimizerConfig::default();
        assert!((sgd_step(&store(&[1.0]), &store(&[1.0]), &lr).unwrap().get("w").unwrap().data()[0] - 0.9997).abs() < 1e-15);
        let p = store(&[0.3, -7.25]);
        assert_eq!(sgd_step(&p, &store(&[0.0, 0.0]), &lr).unwrap(), p);
        let half = OptimizerConfig { learning_rate: 0.5, ..Default::default() };
        assert_eq!(sgd_step(&store(&[2.0, -2.0]), &store(&[1.0, -1.0]), &half).unwrap(), store(&[1.5, -1.5]));
        assert!(sgd_step(&store(&[1.0]), &store(&[1.0, 2.0]), &lr).is_err());
    }

    #[test]
    fn gradient_clipping() {
        let clip = OptimizerConfig { learning_rate: 1.0, max_grad_norm: Some(1.0), ..Default::default() };
        // |(3, 4)| = 5 is rescaled to unit length.
        let out = sgd_step(&store(&[0.0, 0.0]), &store(&[3.0, 4.0]), &clip).unwrap();
        let d = out.get("w").unwrap().data();
        assert!((d[0] + 0.6).abs() < 1e-15 && (d[1] + 0.8).abs() < 1e-15);
        let small = sgd_step(&store(&[0.0]), &store(&[0.5]), &clip).unwrap();
        assert_eq!(small.get("w").unwrap().data()[0], -0.5);
        assert!(OptimizerConfig { max_grad_norm: Some(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn bce_examples() {
        let y = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(seg_loss(&y, &y, SegLoss::Bce).unwrap().0 <= 1e-6);
        let half = Tensor::full(&[4], 0.5);
        assert!((seg_loss(&half, &y, SegLoss::Bce).unwrap().0 - 2f64.ln()).abs() < 1e-12);
        let (l, _) = seg_loss(&y, &y, SegLoss::BcePlusSoftdice).unwrap();
        assert!(l <= 1e-6);
        assert!(seg_loss(&half, &Tensor::full(&[3], 0.5), SegLoss::Bce).is_err());
    }

    #[test]
    fn bce_finite_everywhere() {
        for p in [0.0, 1e-300, 0.3, 1.0 - 1e-17, 1.0] {
            for y in [0.0, 1.0] {
                let (l, g) = seg_loss(&Tensor::full(&[1], p), &Tensor::full(&[1], y), SegLoss::BcePlusSoftdice).unwrap();
                assert!(l.is_finite() && g.all_finite());
            }
        }
    }

    #[test]
    fn seg_loss_gradient_matches_differences() {
        let p = Tensor::from_vec(&[5], vec![0.2, 0.7, 0.45, 0.9, 0.05]).unwrap();
        let y = Tensor::from_vec(&[5], vec![0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        for kind in [SegLoss::Bce, SegLoss::BcePlusSoftdice] {
            let (_, g) = seg_loss(&p, &y, kind).unwrap();
            for i in 0..5 {
                let mut a = p.clone();
                let mut b = p.clone();
                a.data_mut()[i] += 1e-6;
                b.data_mut()[i] -= 1e-6;
                let fd = (seg_loss(&a, &y, kind).unwrap().0 - seg_loss(&b, &y, kind).unwrap().0) / 2e-6;
                assert!((fd - g.data()[i]).abs() < 1e-7, "{kind:?} {i}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cls_loss(&Tensor::zeros(&[2]), 1).unwrap().0 - 2f64.ln()).abs() < 1e-12);
        assert!((cls_loss(&Tensor::full(&[5], 3.0), 4).unwrap().0 - 5f64.ln()).abs() < 1e-12);
        let (l, g) = cls_loss(&Tensor::from_vec(&[2], vec![-50.0, 50.0]).unwrap(), 1).unwrap();
        assert!(l < 1e-40 && g.max_abs() < 1e-40);
        let (_, g) = cls_loss(&Tensor::from_vec(&[3], vec![0.1, -0.4, 1.2]).unwrap(), 0).unwrap();
        assert!(g.sum().abs() < 1e-15);
        assert!(cls_loss(&Tensor::zeros(&[2]), 2).is_err());
    }
}
