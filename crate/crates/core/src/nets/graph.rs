//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] borrows the [`ParameterStore`] it reads weights from; the tape
//! itself is the cached forward state consumed by [`Graph::backward`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::params::ParameterStore;
use crate::rng::mix;
use crate::tensor::{gemm, Tensor};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize, cols: Vec<f64> },
    ConvTranspose2x2 { x: NodeId, w: NodeId, b: NodeId },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(NodeId, NodeId),
    CenterCrop { x: NodeId, top: usize, left: usize },
    GlobalAvgPool(NodeId),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Slice { x: NodeId, start: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

pub struct Graph<'a> {
    params: &'a ParameterStore,
    nodes: Vec<Node<'a>>,
    param_nodes: BTreeMap<String, NodeId>,
    fingerprint: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient store aligned name-for-name with `params`; parameters the
    /// graph never touched get zero gradients.
    pub fn param_grads(&self, params: &ParameterStore) -> ParameterStore {
        let mut out = params.zeros_like();
        for (name, &id) in &self.param_nodes {
            if let (Some(g), Some(dst)) = (self.node(id), out.get_mut(name)) {
                dst.add_assign(g);
            }
        }
        out
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParameterStore) -> Self {
        Graph { params, nodes: Vec::new(), param_nodes: BTreeMap::new(), fingerprint: 0 }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every non-smooth branch taken so far (ReLU signs, pooling
    /// winners). Two evaluations with equal fingerprints lie on the same
    /// smooth piece of the network function.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Input)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let params = self.params;
        let t = params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let id = self.push(Cow::Borrowed(t), Op::Param);
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [cout, cin, k, k2] = ws[..] else {
            return Err(Error::ShapeMismatch(format!("conv weight must be rank 4, got {ws:?}")));
        };
        if cin != c || k != k2 {
            return Err(shape_err("conv2d input/weight", &[c, h, wd], &ws));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err("conv2d bias", self.value(b).shape(), &[cout]));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "conv2d kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let n = ho * wo;
        let kk = cin * k * k;
        let xv = self.value(x).data();
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct { Vec::new() } else { im2col(xv, c, h, wd, k, stride, pad, ho, wo) };
        let mut out = vec![0.0; cout * n];
        let src = if direct { xv } else { &cols[..] };
        gemm(cout, kk, n, self.value(w).data(), kk, 1, src, n, 1, &mut out, 0.0);
        let bias = self.value(b).data();
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[co]);
        }
        let t = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(Cow::Owned(t), Op::Conv2d { x, w, b, stride, pad, cols }))
    }

    pub fn conv_transpose2x2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [cin, cout, 2, 2] = ws[..] else {
            return Err(Error::ShapeMismatch(format!("transposed conv weight must be (Cin,Cout,2,2), got {ws:?}")));
        };
        if cin != c {
            return Err(shape_err("conv_transpose input/weight", &[c, h, wd], &ws));
        }
        if self.value(b).shape() != [cout] {
            return Err(shape_err("conv_transpose bias", self.value(b).shape(), &[cout]));
        }
        let n = h * wd;
        let r = cout * 4;
        let mut y = vec![0.0; r * n];
        gemm(r, cin, n, self.value(w).data(), 1, r, self.value(x).data(), n, 1, &mut y, 0.0);
        let bias = self.value(b).data();
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &y[(co * 4 + a * 2 + bb) * n..][..n];
                    for i in 0..h {
                        let dst = &mut out[co * ho * wo + (2 * i + a) * wo..][..wo];
                        for j in 0..wd {
                            dst[2 * j + bb] = row[i * wd + j] + bias[co];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[cout, ho, wo], out)?;
        Ok(self.push(Cow::Owned(t), Op::ConvTranspose2x2 { x, w, b }))
    }

    /// 2×2 max pooling with stride 2; a trailing odd row/column is dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::ShapeMismatch(format!("cannot pool {h}x{w}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = ch * h * w + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(xv[best]);
                }
            }
        }
        self.fingerprint = argmax.iter().fold(mix(self.fingerprint ^ 0x5051), |f, &a| mix(f ^ a as u64));
        let t = Tensor::from_vec(&[c, ho, wo], out)?;
        Ok(self.push(Cow::Owned(t), Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        let mut fp = mix(self.fingerprint ^ 0x7265);
        for chunk in self.value(x).data().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |m, (i, &a)| m | (u64::from(a > 0.0) << i));
            fp = mix(fp ^ bits);
        }
        self.fingerprint = fp;
        self.push(Cow::Owned(v), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(Cow::Owned(v), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(Cow::Owned(v), Op::Tanh(x))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(Cow::Owned(t), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(Cow::Owned(t), Op::Mul(a, b)))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(shape_err("concat", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(Cow::Owned(t), Op::Concat(a, b)))
    }

    pub fn center_crop(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if height > h || width > w {
            return Err(Error::ShapeMismatch(format!("cannot crop {h}x{w} to {height}x{width}")));
        }
        let (top, left) = ((h - height) / 2, (w - width) / 2);
        if height == h && width == w {
            return Ok(x);
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for i in 0..height {
                let start = ch * h * w + (top + i) * w + left;
                data.extend_from_slice(&xv[start..start + width]);
            }
        }
        let t = Tensor::from_vec(&[c, height, width], data)?;
        Ok(self.push(Cow::Owned(t), Op::CenterCrop { x, top, left }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let n = (h * w) as f64;
        let data = self.value(x).data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / n).collect();
        let t = Tensor::from_vec(&[c], data)?;
        Ok(self.push(Cow::Owned(t), Op::GlobalAvgPool(x)))
    }

    /// `W·x + b` with `W` of shape `(out, in)`; `x` is flattened.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.dense(x, w, Some(b))
    }

    /// `W·x` without a bias term.
    pub fn matvec(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.dense(x, w, None)
    }

    fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let ws = self.value(w).shape().to_vec();
        let [o, i] = ws[..] else {
            return Err(Error::ShapeMismatch(format!("dense weight must be rank 2, got {ws:?}")));
        };
        if self.value(x).len() != i || b.is_some_and(|b| self.value(b).shape() != [o]) {
            return Err(shape_err("linear", self.value(x).shape(), &ws));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = |r: usize| b.map_or(0.0, |b| self.value(b).data()[r]);
        let data = (0..o)
            .map(|r| wv[r * i..(r + 1) * i].iter().zip(xv).map(|(p, q)| p * q).sum::<f64>() + bias(r))
            .collect();
        let t = Tensor::from_vec(&[o], data)?;
        Ok(self.push(Cow::Owned(t), Op::Linear { x, w, b }))
    }

    /// Contiguous slice of a flattened tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x).data();
        if start + len > xv.len() {
            return Err(Error::ShapeMismatch(format!("slice {start}+{len} beyond {}", xv.len())));
        }
        let t = Tensor::from_vec(&[len], xv[start..start + len].to_vec())?;
        Ok(self.push(Cow::Owned(t), Op::Slice { x, start }))
    }

    /// Backpropagate `grad` from `output` through the whole tape.
    pub fn backward(&self, output: NodeId, grad: Tensor) -> Result<Gradients> {
        let out = self
            .nodes
            .get(output)
            .ok_or_else(|| Error::MissingCache(format!("node {output} not recorded")))?;
        if out.value.shape() != grad.shape() {
            return Err(shape_err("output gradient", grad.shape(), out.value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(grad);
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, param_nodes: self.param_nodes.clone() })
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xt = self.value(*x);
                let (c, h, wd) = xt.chw().expect("conv input rank");
                let ws = self.value(*w).shape();
                let (cout, k) = (ws[0], ws[2]);
                let (_, ho, wo) = node.value.chw().expect("conv output rank");
                let n = ho * wo;
                let kk = c * k * k;
                let src = if cols.is_empty() { xt.data() } else { &cols[..] };
                let mut dw = vec![0.0; cout * kk];
                gemm(cout, n, kk, gd, n, 1, src, 1, n, &mut dw, 0.0);
                accumulate(grads, *w, ws, dw);
                let db = gd.chunks(n).map(|r| r.iter().sum()).collect();
                accumulate(grads, *b, &[cout], db);
                let mut dcols = vec![0.0; kk * n];
                gemm(kk, cout, n, self.value(*w).data(), 1, kk, gd, n, 1, &mut dcols, 0.0);
                let dx = if cols.is_empty() { dcols } else { col2im(&dcols, c, h, wd, k, *stride, *pad, ho, wo) };
                accumulate(grads, *x, &[c, h, wd], dx);
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let xt = self.value(*x);
                let (cin, h, wd) = xt.chw().expect("convT input rank");
                let cout = self.value(*w).shape()[1];
                let (n, r) = (h * wd, cout * 4);
                let (ho, wo) = (2 * h, 2 * wd);
                let mut gy = vec![0.0; r * n];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for a in 0..2 {
                        for bb in 0..2 {
                            let row = &mut gy[(co * 4 + a * 2 + bb) * n..][..n];
                            for i in 0..h {
                                let src = &gd[co * ho * wo + (2 * i + a) * wo..][..wo];
                                for j in 0..wd {
                                    row[i * wd + j] = src[2 * j + bb];
                                    db[co] += src[2 * j + bb];
                                }
                            }
                        }
                    }
                }
                let mut dx = vec![0.0; cin * n];
                gemm(cin, r, n, self.value(*w).data(), r, 1, &gy, n, 1, &mut dx, 0.0);
                let mut dw = vec![0.0; cin * r];
                gemm(cin, n, r, xt.data(), n, 1, &gy, 1, n, &mut dw, 0.0);
                accumulate(grads, *x, &[cin, h, wd], dx);
                accumulate(grads, *w, &[cin, cout, 2, 2], dw);
                accumulate(grads, *b, &[cout], db);
            }
            Op::MaxPool2 { x, argmax } => {
                let xs = self.value(*x).shape();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                accumulate(grads, *x, xs, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 }).collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = y.iter().zip(gd).map(|(&t, &gv)| gv * (1.0 - t * t)).collect();
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = bv.iter().zip(gd).map(|(p, q)| p * q).collect();
                let db = av.iter().zip(gd).map(|(p, q)| p * q).collect();
                accumulate(grads, *a, g.shape(), da);
                accumulate(grads, *b, g.shape(), db);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                accumulate(grads, *a, self.value(*a).shape(), gd[..na].to_vec());
                accumulate(grads, *b, self.value(*b).shape(), gd[na..].to_vec());
            }
            Op::CenterCrop { x, top, left } => {
                let (c, h, w) = self.value(*x).chw().expect("crop input rank");
                let (_, ch, cw) = node.value.chw().expect("crop output rank");
                let mut dx = vec![0.0; c * h * w];
                for k in 0..c {
                    for i in 0..ch {
                        let dst = k * h * w + (top + i) * w + left;
                        dx[dst..dst + cw].copy_from_slice(&gd[(k * ch + i) * cw..][..cw]);
                    }
                }
                accumulate(grads, *x, &[c, h, w], dx);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw().expect("gap input rank");
                let n = h * w;
                let mut dx = Vec::with_capacity(c * n);
                for &gv in gd.iter().take(c) {
                    dx.extend(std::iter::repeat_n(gv / n as f64, n));
                }
                accumulate(grads, *x, &[c, h, w], dx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (o, i) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![0.0; i];
                let mut dw = vec![0.0; o * i];
                for r in 0..o {
                    let gr = gd[r];
                    for c in 0..i {
                        dx[c] += wv[r * i + c] * gr;
                        dw[r * i + c] = gr * xv[c];
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), dx);
                accumulate(grads, *w, ws, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, &[o], gd.to_vec());
                }
            }
            Op::Slice { x, start } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*start..*start + gd.len()].copy_from_slice(gd);
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_vec(shape, data).expect("gradient shape"));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * n..][..n];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &x[ch * h * w + ih as usize * w..][..w];
                    let dst = &mut row[oh * wo..][..wo];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * n..][..n];
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ch * h * w + ih as usize * w..][..w];
                    for ow in 0..wo {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
    x
}
