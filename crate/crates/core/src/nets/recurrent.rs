//! Sequence classifiers over per-slice embeddings: a plain tanh recurrent
//! cell and a gated (input/forget/output) cell with a separate memory state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::graph::{Graph, NodeId};
use crate::nets::params::{Initializer, ParameterStore};
use crate::nets::{conv_relu, image_input, Architecture};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Plain,
    Gated,
}

/// Shared convolutional embedder: 3×3 convolutions with the given output
/// channels and strides, then global average pooling. An empty encoder flattens
/// the slice instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { channels: vec![8, 16], strides: vec![2, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecurrentConfig {
    pub cell: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderSpec,
    /// Side length of each ROI slice.
    pub input_size: usize,
}

impl Default for RecurrentConfig {
    fn default() -> Self {
        RecurrentConfig {
            cell: CellKind::Gated,
            input_dim: 16,
            hidden_dim: 16,
            num_classes: 2,
            encoder: EncoderSpec::default(),
            input_size: 32,
        }
    }
}

pub const GATES: [&str; 4] = ["input_gate", "forget_gate", "candidate", "output_gate"];

impl Architecture for RecurrentConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_classes == 0 || self.input_dim == 0 {
            return Err(Error::config("recurrent", "input_dim, hidden_dim and num_classes must be positive"));
        }
        let enc = &self.encoder;
        if enc.channels.len() != enc.strides.len() {
            return Err(Error::config("recurrent.encoder", "channels and strides differ in length"));
        }
        if enc.strides.contains(&0) || enc.channels.contains(&0) {
            return Err(Error::config("recurrent.encoder", "channels and strides must be positive"));
        }
        let embed = enc.channels.last().copied().unwrap_or(self.input_size * self.input_size);
        if embed != self.input_dim {
            return Err(Error::config(
                "recurrent.input_dim",
                format!("encoder produces {embed} features but input_dim is {}", self.input_dim),
            ));
        }
        Ok(())
    }

    fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        self.validate()?;
        let mut init = Initializer::new(seed);
        let mut cin = 1;
        for (i, &ch) in self.encoder.channels.iter().enumerate() {
            init.conv(&format!("encoder.conv{i}"), cin, ch, 3)?;
            cin = ch;
        }
        let (d, h) = (self.input_dim, self.hidden_dim);
        match self.cell {
            CellKind::Plain => {
                init.gaussian("cell.w_x", &[h, d], d)?;
                init.gaussian("cell.w_h", &[h, h], h)?;
                init.constant("cell.bias", &[h], 0.0)?;
            }
            CellKind::Gated => {
                for gate in GATES {
                    init.gaussian(&format!("cell.{gate}.w_x"), &[h, d], d)?;
                    init.gaussian(&format!("cell.{gate}.w_h"), &[h, h], h)?;
                    let bias = if gate == "forget_gate" { 1.0 } else { 0.0 };
                    init.constant(&format!("cell.{gate}.bias"), &[h], bias)?;
                }
            }
        }
        init.dense("fc", h, self.num_classes)?;
        Ok(init.finish())
    }
}

/// Hidden (and, for the gated cell, memory) state between steps.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub hidden: NodeId,
    pub memory: Option<NodeId>,
}

pub fn embed_slice(g: &mut Graph<'_>, x: NodeId, config: &RecurrentConfig) -> Result<NodeId> {
    let (_, h, w) = g.value(x).chw()?;
    if h != config.input_size || w != config.input_size {
        return Err(Error::ShapeMismatch(format!(
            "recurrent encoder expects {0}x{0} slices, got {h}x{w}",
            config.input_size
        )));
    }
    if config.encoder.channels.is_empty() {
        return Ok(x);
    }
    let mut x = x;
    for (i, &stride) in config.encoder.strides.iter().enumerate() {
        x = conv_relu(g, &format!("encoder.conv{i}"), x, stride, 1)?;
    }
    g.global_avg_pool(x)
}

fn affine(g: &mut Graph<'_>, prefix: &str, x: NodeId, h: NodeId) -> Result<NodeId> {
    let (wx, wh, b) = (
        g.param(&format!("{prefix}.w_x"))?,
        g.param(&format!("{prefix}.w_h"))?,
        g.param(&format!("{prefix}.bias"))?,
    );
    let a = g.linear(x, wx, b)?;
    let r = g.matvec(h, wh)?;
    g.add(a, r)
}

pub fn initial_state(g: &mut Graph<'_>, config: &RecurrentConfig) -> CellState {
    let hidden = g.input(Tensor::zeros(&[config.hidden_dim]));
    let memory = (config.cell == CellKind::Gated).then(|| g.input(Tensor::zeros(&[config.hidden_dim])));
    CellState { hidden, memory }
}

/// One recurrence step on an embedded input `x`.
pub fn cell_step(g: &mut Graph<'_>, config: &RecurrentConfig, x: NodeId, state: CellState) -> Result<CellState> {
    match config.cell {
        CellKind::Plain => {
            let z = affine(g, "cell", x, state.hidden)?;
            Ok(CellState { hidden: g.tanh(z), memory: None })
        }
        CellKind::Gated => {
            let memory = state.memory.ok_or_else(|| Error::MissingCache("gated cell needs a memory state".into()))?;
            let zi = affine(g, "cell.input_gate", x, state.hidden)?;
            let zf = affine(g, "cell.forget_gate", x, state.hidden)?;
            let zc = affine(g, "cell.candidate", x, state.hidden)?;
            let zo = affine(g, "cell.output_gate", x, state.hidden)?;
            let i = g.sigmoid(zi);
            let f = g.sigmoid(zf);
            let cand = g.tanh(zc);
            let o = g.sigmoid(zo);
            let kept = g.mul(f, memory)?;
            let written = g.mul(i, cand)?;
            let c = g.add(kept, written)?;
            let tc = g.tanh(c);
            let h = g.mul(o, tc)?;
            Ok(CellState { hidden: h, memory: Some(c) })
        }
    }
}

pub fn recurrent_graph(g: &mut Graph<'_>, sequence: &[Tensor], config: &RecurrentConfig) -> Result<NodeId> {
    if sequence.is_empty() {
        return Err(Error::EmptyDataset("recurrent classifier needs a non-empty sequence".into()));
    }
    config.validate()?;
    let mut state = initial_state(g, config);
    for slice in sequence {
        let x = image_input(g, slice)?;
        let e = embed_slice(g, x, config)?;
        state = cell_step(g, config, e, state)?;
    }
    let (w, b) = (g.param("fc.weight")?, g.param("fc.bias")?);
    g.linear(state.hidden, w, b)
}

pub fn recurrent_forward(params: &ParameterStore, sequence: &[Tensor], config: &RecurrentConfig) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let y = recurrent_graph(&mut g, sequence, config)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::graph::sigmoid;

    fn flat_config(cell: CellKind, n: usize, hidden: usize) -> RecurrentConfig {
        RecurrentConfig {
            cell,
            input_dim: n * n,
            hidden_dim: hidden,
            num_classes: 2,
            encoder: EncoderSpec { channels: vec![], strides: vec![] },
            input_size: n,
        }
    }

    fn slice(n: usize, phase: f64) -> Tensor {
        Tensor::from_vec(&[1, n, n], (0..n * n).map(|v| (v as f64 * 0.7 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn forget_bias_is_one() {
        let cfg = RecurrentConfig::default();
        let p = cfg.init_params(0).unwrap();
        assert!(p.get("cell.forget_gate.bias").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("cell.input_gate.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_cell_with_zero_weights_outputs_tanh_bias() {
        let cfg = flat_config(CellKind::Plain, 4, 3);
        let mut p = cfg.init_params(1).unwrap();
        p.get_mut("cell.w_x").unwrap().fill(0.0);
        p.get_mut("cell.w_h").unwrap().fill(0.0);
        let b = [0.3, -1.2, 2.0];
        p.set("cell.bias", Tensor::from_vec(&[3], b.to_vec()).unwrap()).unwrap();
        let mut g = Graph::new(&p);
        let mut state = initial_state(&mut g, &cfg);
        for t in 0..5 {
            let x = g.input(slice(4, t as f64).reshape(&[16]).unwrap());
            state = cell_step(&mut g, &cfg, x, state).unwrap();
            for (h, bv) in g.value(state.hidden).data().iter().zip(b) {
                assert_eq!(*h, f64::tanh(bv));
            }
        }
    }

    #[test]
    fn saturated_gates_hold_memory() {
        let cfg = flat_config(CellKind::Gated, 3, 4);
        let mut p = cfg.init_params(2).unwrap();
        for gate in ["input_gate", "forget_gate"] {
            p.get_mut(&format!("cell.{gate}.w_x")).unwrap().fill(0.0);
            p.get_mut(&format!("cell.{gate}.w_h")).unwrap().fill(0.0);
        }
        p.get_mut("cell.forget_gate.bias").unwrap().fill(1e3);
        p.get_mut("cell.input_gate.bias").unwrap().fill(-1e3);
        let mut g = Graph::new(&p);
        let c0 = Tensor::from_vec(&[4], vec![0.5, -0.25, 1.5, -2.0]).unwrap();
        let mut state = CellState { hidden: g.input(Tensor::zeros(&[4])), memory: Some(g.input(c0.clone())) };
        for t in 0..7 {
            let x = g.input(slice(3, t as f64).reshape(&[9]).unwrap());
            state = cell_step(&mut g, &cfg, x, state).unwrap();
        }
        assert_eq!(g.value(state.memory.unwrap()), &c0);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        for cell in [CellKind::Plain, CellKind::Gated] {
            let cfg = flat_config(cell, 2, 2);
            let p = cfg.init_params(7).unwrap();
            let s = slice(2, 0.3);
            let x = s.data();
            let logits = recurrent_forward(&p, std::slice::from_ref(&s), &cfg).unwrap();
            let mv = |name: &str, v: &[f64]| -> Vec<f64> {
                let w = p.get(name).unwrap();
                let cols = w.shape()[1];
                (0..w.shape()[0]).map(|r| (0..cols).map(|c| w.data()[r * cols + c] * v[c]).sum()).collect()
            };
            let bias = |name: &str| p.get(name).unwrap().data().to_vec();
            let h: Vec<f64> = match cell {
                CellKind::Plain => {
                    let a = mv("cell.w_x", x);
                    a.iter().zip(bias("cell.bias")).map(|(a, b)| (a + b).tanh()).collect()
                }
                CellKind::Gated => {
                    let pre = |gate: &str| -> Vec<f64> {
                        let a = mv(&format!("cell.{gate}.w_x"), x);
                        a.iter().zip(bias(&format!("cell.{gate}.bias"))).map(|(a, b)| a + b).collect()
                    };
                    let (i, c, o) = (pre("input_gate"), pre("candidate"), pre("output_gate"));
                    (0..2)
                        .map(|k| {
                            let mem = sigmoid(i[k]) * c[k].tanh();
                            sigmoid(o[k]) * mem.tanh()
                        })
                        .collect()
                }
            };
            let fc = mv("fc.weight", &h);
            let expected: Vec<f64> = fc.iter().zip(bias("fc.bias")).map(|(a, b)| a + b).collect();
            for (a, b) in logits.data().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10, "{cell:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let cfg = RecurrentConfig::default();
        let p = cfg.init_params(0).unwrap();
        assert!(recurrent_forward(&p, &[], &cfg).is_err());
    }

    #[test]
    fn conv_encoder_sequence() {
        let cfg = RecurrentConfig { input_size: 16, ..Default::default() };
        let p = cfg.init_params(0).unwrap();
        let seq: Vec<Tensor> = (0..3).map(|t| slice(16, t as f64)).collect();
        let out = recurrent_forward(&p, &seq, &cfg).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert!(out.all_finite());
    }
}
