use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{cls_loss, seg_loss, SegLoss};
use crate::error::{Error, Result};
use crate::nets::params::Initializer;
use crate::nets::recurrent::{cell_step, initial_state};
use crate::nets::resnet::bottleneck;
use crate::nets::{
    image_input, init_params, Architecture, CellKind, ClassifierConfig, DeepSegNetConfig, EncoderSpec, Graph, NodeId,
    PaddingMode, ParameterStore, RecurrentConfig, ResNetConfig, ResNetVariant, SegmenterConfig, UNetConfig,
};
use crate::rng;
use crate::tensor::Tensor;

/// Isolated building blocks, each checked against a fixed random linear
/// read-out of its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    StridedConv,
    ConvTranspose,
    ReluMaxPool,
    CropConcat,
    Bottleneck,
    PlainCell,
    GatedCell,
    Dense,
}

impl BlockKind {
    pub const ALL: [BlockKind; 9] = [
        BlockKind::Conv,
        BlockKind::StridedConv,
        BlockKind::ConvTranspose,
        BlockKind::ReluMaxPool,
        BlockKind::CropConcat,
        BlockKind::Bottleneck,
        BlockKind::PlainCell,
        BlockKind::GatedCell,
        BlockKind::Dense,
    ];

    fn params(self, input: &[Tensor], seed: u64) -> Result<ParameterStore> {
        let first = input.first().ok_or_else(|| Error::EmptyDataset("grad_check needs an input".into()))?;
        let cin = if first.shape().len() == 3 { first.shape()[0] } else { 1 };
        let mut init = Initializer::new(seed);
        match self {
            BlockKind::Conv | BlockKind::StridedConv | BlockKind::ReluMaxPool => init.conv("blk", cin, 3, 3)?,
            BlockKind::ConvTranspose => init.conv_transpose("blk", cin, 2)?,
            BlockKind::CropConcat => {
                init.conv("blk.a", cin, 2, 3)?;
                init.conv("blk.b", cin, 2, 3)?;
                init.conv("blk.c", 4, 2, 3)?;
            }
            BlockKind::Bottleneck => {
                init.conv("blk.conv1", cin, 2, 1)?;
                init.conv("blk.conv2", 2, 2, 3)?;
                init.conv("blk.conv3", 2, 8, 1)?;
                init.conv("blk.shortcut", cin, 8, 1)?;
            }
            BlockKind::PlainCell | BlockKind::GatedCell => return self.cell_config(first).init_params(seed),
            BlockKind::Dense => init.dense("blk", first.len(), 3)?,
        }
        Ok(init.finish())
    }

    fn cell_config(self, first: &Tensor) -> RecurrentConfig {
        let size = first.shape().last().copied().unwrap_or(1);
        RecurrentConfig {
            cell: if self == BlockKind::PlainCell { CellKind::Plain } else { CellKind::Gated },
            input_dim: size * size,
            hidden_dim: 4,
            num_classes: 2,
            encoder: EncoderSpec { channels: vec![], strides: vec![] },
            input_size: size,
        }
    }

    fn graph(self, g: &mut Graph<'_>, input: &[Tensor]) -> Result<NodeId> {
        let conv = |g: &mut Graph<'_>, name: &str, x, stride, pad| -> Result<NodeId> {
            let (w, b) = (g.param(&format!("{name}.weight"))?, g.param(&format!("{name}.bias"))?);
            g.conv2d(x, w, b, stride, pad)
        };
        match self {
            BlockKind::PlainCell | BlockKind::GatedCell => {
                let cfg = self.cell_config(&input[0]);
                let mut state = initial_state(g, &cfg);
                for t in input {
                    let x = g.input(t.clone().reshape(&[t.len()])?);
                    state = cell_step(g, &cfg, x, state)?;
                }
                Ok(match state.memory {
                    Some(c) => g.concat(state.hidden, c).unwrap_or(state.hidden),
                    None => state.hidden,
                })
            }
            BlockKind::Dense => {
                let x = g.input(input[0].clone().reshape(&[input[0].len()])?);
                let (w, b) = (g.param("blk.weight")?, g.param("blk.bias")?);
                g.linear(x, w, b)
            }
            _ => {
                let x = image_input_any(g, &input[0])?;
                match self {
                    BlockKind::Conv => conv(g, "blk", x, 1, 1),
                    BlockKind::StridedConv => conv(g, "blk", x, 2, 0),
                    BlockKind::ConvTranspose => {
                        let (w, b) = (g.param("blk.weight")?, g.param("blk.bias")?);
                        g.conv_transpose2x2(x, w, b)
                    }
                    BlockKind::ReluMaxPool => {
                        let y = conv(g, "blk", x, 1, 0)?;
                        let y = g.relu(y);
                        g.max_pool2(y)
                    }
                    BlockKind::CropConcat => {
                        let a = conv(g, "blk.a", x, 1, 0)?;
                        let b = conv(g, "blk.b", x, 1, 1)?;
                        let (_, h, w) = g.value(a).chw()?;
                        let b = g.center_crop(b, h, w)?;
                        let c = g.concat(a, b)?;
                        let c = g.relu(c);
                        conv(g, "blk.c", c, 1, 1)
                    }
                    BlockKind::Bottleneck => bottleneck(g, "blk", x, 2),
                    _ => unreachable!(),
                }
            }
        }
    }
}

/// Multi-channel `(C, H, W)` or single-channel `(H, W)` graph input.
fn image_input_any(g: &mut Graph<'_>, t: &Tensor) -> Result<NodeId> {
    if t.shape().len() == 3 {
        Ok(g.input(t.clone()))
    } else {
        image_input(g, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CheckModel {
    /// Checked through bce against a fixed pseudo-random target mask.
    Segmenter(SegmenterConfig),
    /// Checked through cross-entropy against class 1.
    Classifier(ClassifierConfig),
    Block(BlockKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Gaussian jitter added to every parameter before checking, so zero
    /// biases and symmetric initializations do not hide errors.
    pub jitter: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { epsilon: 1e-5, coords_per_tensor: 50, seed: 0, jitter: 0.1 }
    }
}

const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

struct Evaluation {
    loss: f64,
    fingerprint: u64,
}

/// Max relative error between analytic gradients and central differences at
/// the default options.
pub fn grad_check(model: &CheckModel, input: &[Tensor], epsilon: f64) -> Result<f64> {
    grad_check_with(model, input, &GradCheckOptions { epsilon, ..Default::default() })
}

pub fn grad_check_with(model: &CheckModel, input: &[Tensor], opts: &GradCheckOptions) -> Result<f64> {
    if input.is_empty() {
        return Err(Error::EmptyDataset("grad_check needs an input".into()));
    }
    let mut params = match model {
        CheckModel::Segmenter(c) => init_params(c, opts.seed)?,
        CheckModel::Classifier(c) => init_params(c, opts.seed)?,
        CheckModel::Block(b) => b.params(input, opts.seed)?,
    };
    let mut jr = rng::rng_named(opts.seed, "jitter");
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += opts.jitter * (jr.random::<f64>() * 2.0 - 1.0);
        }
    }
    let target_seed = rng::derive_named(opts.seed, "target");

    let run = |params: &ParameterStore, want_grad: bool| -> Result<(Evaluation, Option<ParameterStore>)> {
        let mut g = Graph::new(params);
        let out = match model {
            CheckModel::Segmenter(c) => {
                let x = image_input(&mut g, &input[0])?;
                c.graph(&mut g, x)?
            }
            CheckModel::Classifier(c) => c.graph(&mut g, input)?,
            CheckModel::Block(b) => b.graph(&mut g, input)?,
        };
        let y = g.value(out);
        let mut tr = rng::rng(target_seed);
        let (loss, grad) = match model {
            CheckModel::Segmenter(_) => {
                let mask = Tensor::from_vec(y.shape(), (0..y.len()).map(|_| f64::from(tr.random::<bool>())).collect())?;
                seg_loss(y, &mask, SegLoss::Bce)?
            }
            CheckModel::Classifier(_) | CheckModel::Block(BlockKind::Dense) => cls_loss(y, 1)?,
            CheckModel::Block(_) => {
                let r = Tensor::from_vec(y.shape(), (0..y.len()).map(|_| tr.random::<f64>() * 2.0 - 1.0).collect())?;
                let l = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
                (l, r)
            }
        };
        let grads = if want_grad { Some(g.backward(out, grad)?.param_grads(params)) } else { None };
        Ok((Evaluation { loss, fingerprint: g.fingerprint() }, grads))
    };

    let (_, analytic) = run(&params, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut pick = rng::rng_named(opts.seed, "coords");
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for name in names {
        let len = params.get(&name).expect("listed").len();
        let coords: Vec<usize> = if len <= opts.coords_per_tensor {
            (0..len).collect()
        } else {
            index::sample(&mut pick, len, opts.coords_per_tensor).into_vec()
        };
        for i in coords {
            let orig = params.get(&name).expect("listed").data()[i];
            params.get_mut(&name).expect("listed").data_mut()[i] = orig + opts.epsilon;
            let (plus, _) = run(&params, false)?;
            params.get_mut(&name).expect("listed").data_mut()[i] = orig - opts.epsilon;
            let (minus, _) = run(&params, false)?;
            params.get_mut(&name).expect("listed").data_mut()[i] = orig;
            // A ReLU or pooling decision flipped inside the stencil: the
            // difference quotient straddles a kink and says nothing.
            if plus.fingerprint != minus.fingerprint {
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * opts.epsilon);
            let a = analytic.get(&name).expect("aligned").data()[i];
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(Error::NonFinite("grad_check found no smooth coordinates".into()));
    }
    Ok(worst)
}

/// One entry of the standard gradient-check suite.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: String,
    pub model: CheckModel,
    pub input: Vec<Tensor>,
}

fn uniform(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).expect("shape")
}

/// Every block kind plus small instances of each network family: a
/// same-padded depth-2 U-Net on 16×16, a depth-2 DeepSegNet, the mini
/// residual classifier, and plain and gated recurrent classifiers.
pub fn standard_suite(seed: u64) -> Vec<SuiteCase> {
    let mut r = rng::rng_named(seed, "suite");
    let mut cases = Vec::new();
    for block in BlockKind::ALL {
        let input = match block {
            BlockKind::PlainCell | BlockKind::GatedCell => (0..3).map(|_| uniform(&[4, 4], &mut r)).collect(),
            BlockKind::Dense => vec![uniform(&[6], &mut r)],
            BlockKind::StridedConv => vec![uniform(&[2, 9, 9], &mut r)],
            BlockKind::ConvTranspose => vec![uniform(&[2, 4, 4], &mut r)],
            BlockKind::ReluMaxPool => vec![uniform(&[2, 10, 10], &mut r)],
            _ => vec![uniform(&[2, 8, 8], &mut r)],
        };
        let name = serde_json::to_value(block).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        cases.push(SuiteCase { name: format!("block.{name}"), model: CheckModel::Block(block), input });
    }
    let unet = UNetConfig { depth: 2, base_channels: 2, padding_mode: PaddingMode::Same, input_size: 16 };
    cases.push(SuiteCase {
        name: "unet_same_d2".into(),
        model: CheckModel::Segmenter(SegmenterConfig::Unet(unet)),
        input: vec![uniform(&[16, 16], &mut r)],
    });
    cases.push(SuiteCase {
        name: "deepsegnet_d2".into(),
        model: CheckModel::Segmenter(SegmenterConfig::Deepsegnet(DeepSegNetConfig { depth: 2, base_channels: 2 })),
        input: vec![uniform(&[16, 16], &mut r)],
    });
    let mini = ResNetConfig { variant: ResNetVariant::ResnetMini, num_classes: 2, input_size: 16, base_width: 2 };
    cases.push(SuiteCase {
        name: "resnet_mini".into(),
        model: CheckModel::Classifier(ClassifierConfig::Resnet(mini)),
        input: vec![uniform(&[16, 16], &mut r)],
    });
    for (name, cell) in [("recurrent_plain", CellKind::Plain), ("recurrent_gated", CellKind::Gated)] {
        let cfg = RecurrentConfig {
            cell,
            input_dim: 3,
            hidden_dim: 4,
            num_classes: 2,
            encoder: EncoderSpec { channels: vec![2, 3], strides: vec![2, 2] },
            input_size: 16,
        };
        let input = (0..3).map(|_| uniform(&[16, 16], &mut r)).collect();
        cases.push(SuiteCase { name: name.into(), model: CheckModel::Classifier(ClassifierConfig::Recurrent(cfg)), input });
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn dense_layer_is_exact() {
        let err = grad_check(&CheckModel::Block(BlockKind::Dense), &[ramp(&[5], 1)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn small_unet() {
        let cfg = SegmenterConfig::Unet(UNetConfig { depth: 2, base_channels: 2, padding_mode: PaddingMode::Same, input_size: 16 });
        let opts = GradCheckOptions { coords_per_tensor: 8, ..Default::default() };
        let err = grad_check_with(&CheckModel::Segmenter(cfg), &[ramp(&[16, 16], 2)], &opts).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn suite_covers_every_block() {
        let suite = standard_suite(0);
        assert_eq!(suite.len(), BlockKind::ALL.len() + 5);
        assert!(suite.iter().any(|c| c.name == "block.crop_concat"));
    }

    #[test]
    fn suite_passes() {
        for case in standard_suite(1) {
            let err = grad_check(&case.model, &case.input, 1e-5).unwrap_or_else(|e| panic!("{}: {e}", case.name));
            assert!(err < 1e-4, "{}: {err:e}", case.name);
        }
    }

    #[test]
    fn broken_gradient_is_detected() {
        assert!(relative_error(1.0, 1.1) > 0.05);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
