//! DeepSegNet-style encoder/decoder: same-padded convolutions, learnable
//! upsampling, and additive (not concatenative) encoder skips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::graph::{Graph, NodeId};
use crate::nets::params::{Initializer, ParameterStore};
use crate::nets::{conv_relu, image_input, Architecture};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepSegNetConfig {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for DeepSegNetConfig {
    fn default() -> Self {
        DeepSegNetConfig { depth: 4, base_channels: 16 }
    }
}

impl Architecture for DeepSegNetConfig {
    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("deepsegnet.depth", "must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("deepsegnet.base_channels", "must be positive"));
        }
        Ok(())
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        self.validate()?;
        let mut init = Initializer::new(seed);
        let b = self.base_channels;
        let mut cin = 1;
        for i in 0..self.depth {
            let ch = b << i;
            init.conv(&format!("enc{i}.conv1"), cin, ch, 3)?;
            init.conv(&format!("enc{i}.conv2"), ch, ch, 3)?;
            cin = ch;
        }
        let bridge = b << self.depth;
        init.conv("bridge.conv1", cin, bridge, 3)?;
        init.conv("bridge.conv2", bridge, bridge, 3)?;
        for i in (0..self.depth).rev() {
            let ch = b << i;
            init.conv_transpose(&format!("dec{i}.up"), 2 * ch, ch)?;
            init.conv(&format!("dec{i}.conv"), ch, ch, 3)?;
        }
        init.conv("dec.out", b, 1, 1)?;
        Ok(init.finish())
    }
}

pub fn deepsegnet_graph(g: &mut Graph<'_>, x: NodeId, config: &DeepSegNetConfig) -> Result<NodeId> {
    config.validate()?;
    let (_, h, w) = g.value(x).chw()?;
    let div = 1usize << config.depth;
    for size in [h, w] {
        if size % div != 0 {
            return Err(Error::Indivisible { size, divisor: div });
        }
    }
    let mut x = x;
    let mut skips = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        x = conv_relu(g, &format!("enc{i}.conv1"), x, 1, 1)?;
        x = conv_relu(g, &format!("enc{i}.conv2"), x, 1, 1)?;
        skips.push(x);
        x = g.max_pool2(x)?;
    }
    x = conv_relu(g, "bridge.conv1", x, 1, 1)?;
    x = conv_relu(g, "bridge.conv2", x, 1, 1)?;
    for i in (0..config.depth).rev() {
        let (w, b) = (g.param(&format!("dec{i}.up.weight"))?, g.param(&format!("dec{i}.up.bias"))?);
        let up = g.conv_transpose2x2(x, w, b)?;
        let merged = g.add(up, skips[i])?;
        x = conv_relu(g, &format!("dec{i}.conv"), merged, 1, 1)?;
    }
    let (w, b) = (g.param("dec.out.weight")?, g.param("dec.out.bias")?);
    let logits = g.conv2d(x, w, b, 1, 0)?;
    Ok(g.sigmoid(logits))
}

pub fn deepsegnet_forward(params: &ParameterStore, image: &Tensor, config: &DeepSegNetConfig) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = image_input(&mut g, image)?;
    let y = deepsegnet_graph(&mut g, x, config)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::graph::sigmoid;

    fn ramp(n: usize) -> Tensor {
        Tensor::from_vec(&[1, n, n], (0..n * n).map(|v| (v % 13) as f64 / 13.0 - 0.5).collect()).unwrap()
    }

    #[test]
    fn same_size_probability_map() {
        let cfg = DeepSegNetConfig { depth: 4, base_channels: 2 };
        let p = cfg.init_params(4).unwrap();
        let out = deepsegnet_forward(&p, &ramp(64), &cfg).unwrap();
        assert_eq!(out.shape(), &[1, 64, 64]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = DeepSegNetConfig { depth: 4, base_channels: 2 };
        let p = cfg.init_params(4).unwrap();
        assert!(matches!(
            deepsegnet_forward(&p, &ramp(60), &cfg),
            Err(Error::Indivisible { size: 60, divisor: 16 })
        ));
    }

    #[test]
    fn zero_decoder_gives_sigmoid_of_final_bias() {
        let cfg = DeepSegNetConfig { depth: 2, base_channels: 3 };
        let mut p = cfg.init_params(9).unwrap();
        let bias = -0.8125;
        for (name, t) in p.iter_mut() {
            if name.starts_with("dec") {
                t.fill(if name == "dec.out.bias" { bias } else { 0.0 });
            }
        }
        let out = deepsegnet_forward(&p, &ramp(16), &cfg).unwrap();
        let expected = 1.0 / (1.0 + (-bias as f64).exp());
        assert!((expected - sigmoid(bias)).abs() < 1e-15);
        assert!(out.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }
}
