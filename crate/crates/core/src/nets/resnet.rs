//! Residual CNN classifier built from pre-activation bottleneck blocks.
//!
//! Each bottleneck is `y = s(x) + F(x)` where `F` spans exactly three
//! convolutions (1×1, 3×3, 1×1) and `s` is the identity or, when the shape
//! changes, a strided 1×1 projection named `shortcut`. Projections are not
//! counted among the convolutional layers, so the `resnet50` variant carries
//! 48 block convolutions plus the stem `conv1` and the `fc` head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::graph::{Graph, NodeId};
use crate::nets::params::{Initializer, ParameterStore};
use crate::nets::{conv, image_input, Architecture};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResNetVariant {
    Resnet50,
    ResnetMini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetConfig {
    pub variant: ResNetVariant,
    pub num_classes: usize,
    pub input_size: usize,
    /// Bottleneck width of the first stage; doubles per stage.
    pub base_width: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig { variant: ResNetVariant::Resnet50, num_classes: 2, input_size: 224, base_width: 64 }
    }
}

const EXPANSION: usize = 4;

impl ResNetConfig {
    pub fn blocks_per_stage(&self) -> [usize; 4] {
        match self.variant {
            ResNetVariant::Resnet50 => [3, 4, 6, 3],
            ResNetVariant::ResnetMini => [1, 1, 1, 1],
        }
    }

    fn stem_channels(&self) -> usize {
        self.base_width
    }

    /// `(prefix, in_channels, width, stride)` for every bottleneck in order.
    fn block_plan(&self) -> Vec<(String, usize, usize, usize)> {
        let mut plan = Vec::new();
        let mut cin = self.stem_channels();
        for (stage, &n) in self.blocks_per_stage().iter().enumerate() {
            let width = self.base_width << stage;
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                plan.push((format!("layer{}.{b}", stage + 1), cin, width, stride));
                cin = width * EXPANSION;
            }
        }
        plan
    }

    pub fn feature_channels(&self) -> usize {
        (self.base_width << 3) * EXPANSION
    }
}

/// True for weight tensors counted as convolutional or dense layers
/// (`conv*` / `fc*`), which excludes projection shortcuts.
pub fn is_counted_layer(name: &str) -> bool {
    let Some(stem) = name.strip_suffix(".weight") else { return false };
    let last = stem.rsplit('.').next().unwrap_or(stem);
    last.starts_with("conv") || last.starts_with("fc")
}

impl Architecture for ResNetConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("resnet.num_classes", "must be positive"));
        }
        if self.base_width == 0 {
            return Err(Error::config("resnet.base_width", "must be positive"));
        }
        let min = match self.variant {
            ResNetVariant::Resnet50 => 32,
            ResNetVariant::ResnetMini => 8,
        };
        if self.input_size < min {
            return Err(Error::config("resnet.input_size", format!("must be at least {min}")));
        }
        Ok(())
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        self.validate()?;
        let mut init = Initializer::new(seed);
        let k = match self.variant {
            ResNetVariant::Resnet50 => 7,
            ResNetVariant::ResnetMini => 3,
        };
        init.conv("conv1", 1, self.stem_channels(), k)?;
        let plan = self.block_plan();
        // Without normalization layers every residual branch adds variance;
        // shrinking each branch's last layer by L^(-1/4) (L blocks, three
        // layers per branch) keeps the signal bounded with depth.
        let branch_gain = (plan.len() as f64).powf(-0.25);
        for (prefix, cin, width, stride) in plan {
            let cout = width * EXPANSION;
            init.conv(&format!("{prefix}.conv1"), cin, width, 1)?;
            init.conv(&format!("{prefix}.conv2"), width, width, 3)?;
            init.scaled_conv(&format!("{prefix}.conv3"), width, cout, 1, branch_gain)?;
            if cin != cout || stride != 1 {
                init.conv(&format!("{prefix}.shortcut"), cin, cout, 1)?;
            }
        }
        init.dense("fc", self.feature_channels(), self.num_classes)?;
        Ok(init.finish())
    }
}

/// One pre-activation bottleneck: `s(x) + conv3(relu(conv2(relu(conv1(relu(x))))))`.
pub fn bottleneck(g: &mut Graph<'_>, prefix: &str, x: NodeId, stride: usize) -> Result<NodeId> {
    let a = g.relu(x);
    let h = conv(g, &format!("{prefix}.conv1"), a, 1, 0)?;
    let h = g.relu(h);
    let h = conv(g, &format!("{prefix}.conv2"), h, stride, 1)?;
    let h = g.relu(h);
    let h = conv(g, &format!("{prefix}.conv3"), h, 1, 0)?;
    let shortcut_name = format!("{prefix}.shortcut");
    let skip = if g.has_param(&format!("{shortcut_name}.weight")) {
        conv(g, &shortcut_name, a, stride, 0)?
    } else {
        x
    };
    g.add(skip, h)
}

pub fn resnet_graph(g: &mut Graph<'_>, x: NodeId, config: &ResNetConfig) -> Result<NodeId> {
    config.validate()?;
    let (_, h, w) = g.value(x).chw()?;
    if h != config.input_size || w != config.input_size {
        return Err(Error::ShapeMismatch(format!(
            "ResNet expects {0}x{0} input, got {h}x{w}",
            config.input_size
        )));
    }
    let mut x = match config.variant {
        ResNetVariant::Resnet50 => {
            let s = conv(g, "conv1", x, 2, 3)?;
            let s = g.relu(s);
            g.max_pool2(s)?
        }
        ResNetVariant::ResnetMini => conv(g, "conv1", x, 1, 1)?,
    };
    for (prefix, _, _, stride) in config.block_plan() {
        x = bottleneck(g, &prefix, x, stride)?;
    }
    let x = g.relu(x);
    let pooled = g.global_avg_pool(x)?;
    let (w, b) = (g.param("fc.weight")?, g.param("fc.bias")?);
    g.linear(pooled, w, b)
}

pub fn resnet_forward(params: &ParameterStore, image: &Tensor, config: &ResNetConfig) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = image_input(&mut g, image)?;
    let y = resnet_graph(&mut g, x, config)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize) -> Tensor {
        Tensor::from_vec(&[1, n, n], (0..n * n).map(|v| ((v * 7) % 11) as f64 / 11.0 - 0.4).collect()).unwrap()
    }

    #[test]
    fn resnet50_counts_48_convs_plus_stem_and_head() {
        let cfg = ResNetConfig { base_width: 2, input_size: 32, ..Default::default() };
        let p = cfg.init_params(0).unwrap();
        let counted: Vec<&str> = p.names().filter(|n| is_counted_layer(n)).collect();
        assert_eq!(counted.len(), 48 + 1 + 1);
        let block_convs = counted.iter().filter(|n| n.starts_with("layer")).count();
        assert_eq!(block_convs, 48);
        assert!(counted.contains(&"conv1.weight") && counted.contains(&"fc.weight"));
        // every bottleneck spans exactly conv1..conv3
        for (prefix, ..) in cfg.block_plan() {
            let convs = counted.iter().filter(|n| n.starts_with(&format!("{prefix}."))).count();
            assert_eq!(convs, 3, "{prefix}");
        }
    }

    #[test]
    fn logits_have_num_classes() {
        let cfg = ResNetConfig { variant: ResNetVariant::ResnetMini, num_classes: 2, input_size: 16, base_width: 2 };
        let p = cfg.init_params(5).unwrap();
        let out = resnet_forward(&p, &image(16), &cfg).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert!(out.all_finite());

        let big = ResNetConfig { base_width: 2, input_size: 32, ..Default::default() };
        let p = big.init_params(5).unwrap();
        assert_eq!(resnet_forward(&p, &image(32), &big).unwrap().shape(), &[2]);
    }

    #[test]
    fn zeroed_branch_makes_identity_block() {
        let cfg = ResNetConfig { base_width: 2, input_size: 32, ..Default::default() };
        let mut p = cfg.init_params(3).unwrap();
        // layer1.1 is an identity-shortcut block (in = out = 8 channels, stride 1)
        assert!(!p.contains("layer1.1.shortcut.weight"));
        p.get_mut("layer1.1.conv3.weight").unwrap().fill(0.0);
        p.get_mut("layer1.1.conv3.bias").unwrap().fill(0.0);
        let x = Tensor::from_vec(&[8, 5, 5], (0..200).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new(&p);
        let xi = g.input(x.clone());
        let y = bottleneck(&mut g, "layer1.1", xi, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }
}
