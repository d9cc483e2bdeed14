//! U-Net: contracting path of double 3×3 convolutions with 2×2 pooling,
//! expanding path of learnable 2× upsampling followed by crop-and-concatenate
//! skips. Valid mode uses unpadded convolutions and shrinks the output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::graph::{Graph, NodeId};
use crate::nets::params::{Initializer, ParameterStore};
use crate::nets::{conv_relu, image_input, Architecture};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub padding_mode: PaddingMode,
    /// Spatial size of the network input (after any tiling pad).
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { depth: 4, base_channels: 16, padding_mode: PaddingMode::Valid, input_size: 572 }
    }
}

/// Output side length of a valid-mode U-Net, or `None` when some feature
/// map has odd size before a pooling step.
pub fn valid_shape(config: &UNetConfig) -> Option<usize> {
    valid_output_size(config.input_size, config.depth)
}

pub fn valid_output_size(input: usize, depth: usize) -> Option<usize> {
    let mut s = input;
    for _ in 0..depth {
        s = s.checked_sub(4).filter(|&v| v > 0)?;
        if s % 2 != 0 {
            return None;
        }
        s /= 2;
    }
    s = s.checked_sub(4).filter(|&v| v > 0)?;
    for _ in 0..depth {
        s = (2 * s).checked_sub(4).filter(|&v| v > 0)?;
    }
    Some(s)
}

/// Smallest admissible valid-mode input whose output covers `target` pixels.
pub fn tile_input_size(target: usize, depth: usize) -> usize {
    (target..)
        .find(|&s| valid_output_size(s, depth).is_some_and(|o| o >= target))
        .expect("admissible sizes are unbounded")
}

impl UNetConfig {
    pub fn output_size(&self) -> Result<usize> {
        match self.padding_mode {
            PaddingMode::Valid => valid_shape(self).ok_or(Error::Inadmissible(self.input_size)),
            PaddingMode::Same => {
                let div = 1usize << self.depth;
                if self.input_size % div != 0 {
                    return Err(Error::Indivisible { size: self.input_size, divisor: div });
                }
                Ok(self.input_size)
            }
        }
    }

    fn pad(&self) -> usize {
        match self.padding_mode {
            PaddingMode::Valid => 0,
            PaddingMode::Same => 1,
        }
    }
}

impl Architecture for UNetConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("unet.depth", "must be positive"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("unet.base_channels", "must be positive"));
        }
        self.output_size().map(|_| ())
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::config("unet", "depth and base_channels must be positive"));
        }
        let mut init = Initializer::new(seed);
        let b = self.base_channels;
        let mut cin = 1;
        for i in 0..self.depth {
            let ch = b << i;
            init.conv(&format!("down{i}.conv1"), cin, ch, 3)?;
            init.conv(&format!("down{i}.conv2"), ch, ch, 3)?;
            cin = ch;
        }
        let bottom = b << self.depth;
        init.conv("bottom.conv1", cin, bottom, 3)?;
        init.conv("bottom.conv2", bottom, bottom, 3)?;
        for i in (0..self.depth).rev() {
            let ch = b << i;
            init.conv_transpose(&format!("up{i}.upconv"), 2 * ch, ch)?;
            init.conv(&format!("up{i}.conv1"), 2 * ch, ch, 3)?;
            init.conv(&format!("up{i}.conv2"), ch, ch, 3)?;
        }
        init.conv("head.conv", b, 1, 1)?;
        Ok(init.finish())
    }
}

/// Records the U-Net forward pass; returns the `(1, out, out)` probability node.
pub fn unet_graph(g: &mut Graph<'_>, x: NodeId, config: &UNetConfig) -> Result<NodeId> {
    let (_, h, w) = g.value(x).chw()?;
    if h != config.input_size || w != config.input_size {
        return Err(Error::ShapeMismatch(format!(
            "U-Net expects {0}x{0} input, got {h}x{w}",
            config.input_size
        )));
    }
    config.output_size()?;
    let pad = config.pad();
    let mut x = x;
    let mut skips = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        x = conv_relu(g, &format!("down{i}.conv1"), x, 1, pad)?;
        x = conv_relu(g, &format!("down{i}.conv2"), x, 1, pad)?;
        skips.push(x);
        x = g.max_pool2(x)?;
    }
    x = conv_relu(g, "bottom.conv1", x, 1, pad)?;
    x = conv_relu(g, "bottom.conv2", x, 1, pad)?;
    for i in (0..config.depth).rev() {
        let (w, b) = (g.param(&format!("up{i}.upconv.weight"))?, g.param(&format!("up{i}.upconv.bias"))?);
        let up = g.conv_transpose2x2(x, w, b)?;
        let (_, uh, uw) = g.value(up).chw()?;
        let skip = g.center_crop(skips[i], uh, uw)?;
        x = g.concat(skip, up)?;
        x = conv_relu(g, &format!("up{i}.conv1"), x, 1, pad)?;
        x = conv_relu(g, &format!("up{i}.conv2"), x, 1, pad)?;
    }
    let (w, b) = (g.param("head.conv.weight")?, g.param("head.conv.bias")?);
    let logits = g.conv2d(x, w, b, 1, 0)?;
    Ok(g.sigmoid(logits))
}

/// Per-pixel lesion probability map of shape `(out, out)` flattened in a
/// `(1, out, out)` tensor.
pub fn unet_forward(params: &ParameterStore, image: &Tensor, config: &UNetConfig) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = image_input(&mut g, image)?;
    let y = unet_graph(&mut g, x, config)?;
    Ok(g.value(y).clone())
}
