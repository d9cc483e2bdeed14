//! Differentiable building blocks and the segmentation/classification
//! architectures.

pub mod archive;
pub mod deepsegnet;
pub mod graph;
pub mod params;
pub mod recurrent;
pub mod resnet;
pub mod unet;

use serde::{Deserialize, Serialize};

pub use deepsegnet::{deepsegnet_forward, DeepSegNetConfig};
pub use graph::{Graph, Gradients, NodeId};
pub use params::ParameterStore;
pub use recurrent::{recurrent_forward, CellKind, EncoderSpec, RecurrentConfig};
pub use resnet::{resnet_forward, ResNetConfig, ResNetVariant};
pub use unet::{unet_forward, valid_shape, PaddingMode, UNetConfig};

use crate::error::{Error, Result};
use crate::preprocess::interp;
use crate::tensor::Tensor;

/// A network configuration that can validate itself and create weights.
pub trait Architecture {
    fn validate(&self) -> Result<()>;
    /// Fan-in scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases,
    /// forget-gate biases set to one. Deterministic in `seed`.
    fn init_params(&self, seed: u64) -> Result<ParameterStore>;
}

pub fn init_params<A: Architecture + ?Sized>(config: &A, seed: u64) -> Result<ParameterStore> {
    config.init_params(seed)
}

pub(crate) fn conv(g: &mut Graph<'_>, prefix: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, b, stride, pad)
}

pub(crate) fn conv_relu(g: &mut Graph<'_>, prefix: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let y = conv(g, prefix, x, stride, pad)?;
    Ok(g.relu(y))
}

/// Records a single-channel image as a `(1, H, W)` graph input.
pub fn image_input(g: &mut Graph<'_>, image: &Tensor) -> Result<NodeId> {
    let t = match image.shape() {
        [_, _] => {
            let (h, w) = (image.shape()[0], image.shape()[1]);
            image.clone().reshape(&[1, h, w])?
        }
        [1, _, _] => image.clone(),
        s => return Err(Error::ShapeMismatch(format!("expected a single-channel image, got {s:?}"))),
    };
    Ok(g.input(t))
}

/// First-stage segmentation networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterConfig {
    Unet(UNetConfig),
    Deepsegnet(DeepSegNetConfig),
}

impl SegmenterConfig {
    /// Records the forward pass; output is the `(1, h, w)` probability node.
    pub fn graph(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        match self {
            SegmenterConfig::Unet(c) => unet::unet_graph(g, x, c),
            SegmenterConfig::Deepsegnet(c) => deepsegnet::deepsegnet_graph(g, x, c),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SegmenterConfig::Unet(_) => "unet",
            SegmenterConfig::Deepsegnet(_) => "deepsegnet",
        }
    }

    /// Recovers the architecture from a segmenter checkpoint's parameter
    /// names and shapes. The padding mode is not recorded in the weights.
    pub fn infer(params: &ParameterStore, padding_mode: PaddingMode) -> Result<SegmenterConfig> {
        let (first, prefix) = if params.contains("down0.conv1.weight") {
            ("down0.conv1.weight", "down")
        } else if params.contains("enc0.conv1.weight") {
            ("enc0.conv1.weight", "enc")
        } else {
            return Err(Error::MissingParameter("down0.conv1.weight or enc0.conv1.weight".into()));
        };
        let base_channels = params.get(first).map(|t| t.shape()[0]).unwrap_or(0);
        let depth = (0..).take_while(|i| params.contains(&format!("{prefix}{i}.conv1.weight"))).count();
        let config = if prefix == "down" {
            SegmenterConfig::Unet(UNetConfig { depth, base_channels, padding_mode, input_size: 0 })
        } else {
            SegmenterConfig::Deepsegnet(DeepSegNetConfig { depth, base_channels })
        };
        let template = config.init_params(0)?;
        for (name, t) in template.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch(format!("`{name}`: checkpoint {:?}, expected {:?}", p.shape(), t.shape())))
                }
                None => return Err(Error::MissingParameter(name.to_string())),
            }
        }
        Ok(config)
    }

    /// Copy configured for square `size × size` slices.
    pub fn fitted(&self, size: usize) -> SegmenterConfig {
        match self {
            SegmenterConfig::Unet(c) => {
                let input_size = match c.padding_mode {
                    PaddingMode::Valid => unet::tile_input_size(size, c.depth),
                    PaddingMode::Same => size,
                };
                SegmenterConfig::Unet(UNetConfig { input_size, ..c.clone() })
            }
            SegmenterConfig::Deepsegnet(c) => SegmenterConfig::Deepsegnet(c.clone()),
        }
    }

    /// Network input side length used for `size × size` slices.
    pub fn network_input_size(&self, size: usize) -> usize {
        match self.fitted(size) {
            SegmenterConfig::Unet(c) => c.input_size,
            SegmenterConfig::Deepsegnet(_) => size,
        }
    }
}

impl Architecture for SegmenterConfig {
    fn validate(&self) -> Result<()> {
        match self {
            SegmenterConfig::Unet(c) => c.validate(),
            SegmenterConfig::Deepsegnet(c) => c.validate(),
        }
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        match self {
            SegmenterConfig::Unet(c) => c.init_params(seed),
            SegmenterConfig::Deepsegnet(c) => c.init_params(seed),
        }
    }
}

/// Second-stage classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierConfig {
    Resnet(ResNetConfig),
    Recurrent(RecurrentConfig),
}

impl ClassifierConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassifierConfig::Resnet(c) => c.num_classes,
            ClassifierConfig::Recurrent(c) => c.num_classes,
        }
    }

    pub fn is_sequential(&self) -> bool {
        matches!(self, ClassifierConfig::Recurrent(_))
    }

    /// Records logits for one example: a single slice for the residual CNN,
    /// the whole ordered slice sequence for recurrent models.
    pub fn graph(&self, g: &mut Graph<'_>, example: &[Tensor]) -> Result<NodeId> {
        match self {
            ClassifierConfig::Resnet(c) => {
                let [slice] = example else {
                    return Err(Error::ShapeMismatch(format!(
                        "residual classifier takes one slice, got {}",
                        example.len()
                    )));
                };
                let x = image_input(g, slice)?;
                resnet::resnet_graph(g, x, c)
            }
            ClassifierConfig::Recurrent(c) => recurrent::recurrent_graph(g, example, c),
        }
    }
}

impl Architecture for ClassifierConfig {
    fn validate(&self) -> Result<()> {
        match self {
            ClassifierConfig::Resnet(c) => c.validate(),
            ClassifierConfig::Recurrent(c) => c.validate(),
        }
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        match self {
            ClassifierConfig::Resnet(c) => c.init_params(seed),
            ClassifierConfig::Recurrent(c) => c.init_params(seed),
        }
    }
}

/// A recorded forward pass: the tape plus its output node.
pub struct ForwardPass<'a> {
    pub graph: Graph<'a>,
    pub output: NodeId,
}

impl<'a> ForwardPass<'a> {
    pub fn output(&self) -> &Tensor {
        self.graph.value(self.output)
    }

    /// Exact parameter gradients for the given output gradient, aligned with
    /// the parameter store the pass was recorded against.
    pub fn backward(&self, params: &ParameterStore, output_grad: Tensor) -> Result<ParameterStore> {
        Ok(self.graph.backward(self.output, output_grad)?.param_grads(params))
    }
}

/// Mirror-pads a `(1, H, W)` image by `pad` pixels before and `total - pad`
/// after on each axis.
fn mirror_pad(image: &Tensor, before: usize, total: usize) -> Result<Tensor> {
    let (_, h, w) = image.chw()?;
    let (oh, ow) = (h + total, w + total);
    let src = image.data();
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let sr = interp::mirror(r as isize - before as isize, h);
        for c in 0..ow {
            out.push(src[sr * w + interp::mirror(c as isize - before as isize, w)]);
        }
    }
    Tensor::from_vec(&[1, oh, ow], out)
}

/// Records a segmentation pass whose output covers the image pixel for pixel.
/// Valid-mode U-Nets see the image mirror-padded to the smallest admissible
/// size and their output is centre-cropped back to the image size.
pub fn segmenter_pass<'a>(params: &'a ParameterStore, config: &SegmenterConfig, image: &Tensor) -> Result<ForwardPass<'a>> {
    let image = match image.shape() {
        [h, w] => image.clone().reshape(&[1, *h, *w])?,
        _ => image.clone(),
    };
    let (_, h, w) = image.chw()?;
    if h != w {
        return Err(Error::ShapeMismatch(format!("segmenters take square slices, got {h}x{w}")));
    }
    let fitted = config.fitted(h);
    let net_in = fitted.network_input_size(h);
    let input = if net_in == h { image } else { mirror_pad(&image, (net_in - h) / 2, net_in - h)? };
    let mut graph = Graph::new(params);
    let x = graph.input(input);
    let mut output = fitted.graph(&mut graph, x)?;
    let (_, oh, ow) = graph.value(output).chw()?;
    if (oh, ow) != (h, w) {
        output = graph.center_crop(output, h, w)?;
    }
    Ok(ForwardPass { graph, output })
}

pub fn classifier_pass<'a>(params: &'a ParameterStore, config: &ClassifierConfig, example: &[Tensor]) -> Result<ForwardPass<'a>> {
    let mut graph = Graph::new(params);
    let output = config.graph(&mut graph, example)?;
    Ok(ForwardPass { graph, output })
}

/// Gradient of a scalar function of the network output with respect to every
/// parameter, via a cached forward pass.
pub fn backward(params: &ParameterStore, pass: &ForwardPass<'_>, output_grad: Tensor) -> Result<ParameterStore> {
    pass.backward(params, output_grad)
}
