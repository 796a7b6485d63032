//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value. [`Tape::backward`] replays the nodes in reverse and
//! accumulates vector-Jacobian products. Network weights enter the tape as
//! shared constants (`Arc<Tensor>`); only values created with [`Tape::var`]
//! and everything computed from them receive gradients.

use std::sync::Arc;

use rayon::prelude::*;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a constant; gradient passes straight through.
    Offset(Var),
    MulConst(Var, Arc<Tensor>),
    Square(Var),
    Powf(Var, f64),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    MatVec(Var, Arc<Tensor>),
    Conv2d(Var, Arc<Tensor>),
    ScaleChannels(Var, Var),
    MulSpatial(Var, Arc<Tensor>),
    Upsample2x(Var),
    AvgPool2x(Var),
    Row(Var, usize),
    SumLeading(Var),
    ChannelNormalize(Var, f64),
    SumChannels(Var),
    Gram(Var),
    CrossEntropy(Var, Arc<Vec<u16>>),
    Resample(Var, Arc<Tensor>, Arc<Tensor>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected a (C, H, W) tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let out = self.value(a).zip_map(c, |x, y| x + y);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    /// Adds a per-channel constant to a `(C, H, W)` tensor.
    pub fn add_channel_const(&mut self, a: Var, bias: &[f64]) -> Var {
        let (c, h, w) = chw(self.shape(a));
        assert_eq!(bias.len(), c);
        let mut out = self.value(a).clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = bias[ch];
            plane.iter_mut().for_each(|v| *v += b);
        }
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(out, Op::Powf(a, p), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// `matrix · a` for a constant `(rows, cols)` matrix and a length-`cols` vector.
    pub fn matvec(&mut self, a: Var, matrix: Arc<Tensor>) -> Var {
        let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
        let x = self.value(a).data();
        assert_eq!(x.len(), cols, "matvec: vector length {} vs {} columns", x.len(), cols);
        let m = matrix.data();
        let out: Vec<f64> = (0..rows)
            .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![rows], out), Op::MatVec(a, matrix), rg)
    }

    /// Same-padded, stride-1 convolution of a `(C, H, W)` input with a
    /// constant `(C_out, C_in, k, k)` kernel, `k` odd.
    pub fn conv2d(&mut self, a: Var, weight: Arc<Tensor>) -> Var {
        let in_shape = self.shape(a).to_vec();
        let out = conv2d_forward(self.value(a).data(), &in_shape, &weight);
        let (_, h, w) = chw(&in_shape);
        let rg = self.rg(a);
        self.push(
            Tensor::from_parts(vec![weight.shape()[0], h, w], out),
            Op::Conv2d(a, weight),
            rg,
        )
    }

    /// Multiplies channel `c` of a `(C, H, W)` tensor by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let sv = self.value(s).data();
        assert_eq!(sv.len(), c);
        let mut out = self.value(x).clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let f = sv[ch];
            plane.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::ScaleChannels(x, s), rg)
    }

    /// Multiplies every channel of a `(C, H, W)` tensor by a constant `(H, W)` map.
    pub fn mul_spatial(&mut self, x: Var, mask: Arc<Tensor>) -> Var {
        let (_, h, w) = chw(self.shape(x));
        assert_eq!(mask.shape(), &[h, w]);
        let mut out = self.value(x).clone();
        for plane in out.data_mut().chunks_mut(h * w) {
            for (v, m) in plane.iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MulSpatial(x, mask), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, h2, w2], out), Op::Upsample2x(x), rg)
    }

    /// 2x2 average pooling; odd trailing rows/columns are dropped.
    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let (h2, w2) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let base = ch * h * w;
                    let s = src[base + 2 * y * w + 2 * xx]
                        + src[base + 2 * y * w + 2 * xx + 1]
                        + src[base + (2 * y + 1) * w + 2 * xx]
                        + src[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * h2 + y) * w2 + xx] = 0.25 * s;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, h2, w2], out), Op::AvgPool2x(x), rg)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let shape = self.shape(x);
        assert_eq!(shape.len(), 2);
        let cols = shape[1];
        assert!(i < shape[0], "row {} of {:?}", i, shape);
        let data = self.value(x).data()[i * cols..(i + 1) * cols].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![cols], data), Op::Row(x, i), rg)
    }

    /// Sums over the leading axis.
    pub fn sum_leading(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        let mut out = vec![0.0; inner];
        for chunk in self.value(x).data().chunks(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape[1..].to_vec(), out), Op::SumLeading(x), rg)
    }

    /// Divides each spatial site's channel vector by its L2 norm plus `eps`.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let hw = h * w;
        let src = self.value(x).data();
        let mut norms = vec![0.0; hw];
        for ch in 0..c {
            for (p, n) in norms.iter_mut().enumerate() {
                let v = src[ch * hw + p];
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let mut out = src.to_vec();
        for ch in 0..c {
            for p in 0..hw {
                out[ch * hw + p] /= norms[p] + eps;
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![c, h, w], out),
            Op::ChannelNormalize(x, eps),
            rg,
        )
    }

    /// `(C, H, W) -> (H, W)` by summing channels.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![h, w], out), Op::SumChannels(x), rg)
    }

    /// Gram matrix `γᵀγ` where `γ` is the `(H·W) × C` matrix of activations.
    pub fn gram(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let out = gram_forward(self.value(x).data(), c, h * w);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![c, c], out), Op::Gram(x), rg)
    }

    /// Mean per-pixel softmax cross-entropy of `(C, H, W)` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<u16>>) -> Var {
        let (c, h, w) = chw(self.shape(logits));
        let hw = h * w;
        assert_eq!(labels.len(), hw);
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (p, &lab) in labels.iter().enumerate() {
            let lab = lab as usize;
            assert!(lab < c, "label {} >= {} classes", lab, c);
            let mx = (0..c).map(|k| z[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).map(|k| (z[k * hw + p] - mx).exp()).sum::<f64>().ln();
            total += lse - z[lab * hw + p];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / hw as f64),
            Op::CrossEntropy(logits, labels),
            rg,
        )
    }

    /// Separable linear resampling: `out[c] = ry · x[c] · rxᵀ`.
    pub fn resample(&mut self, x: Var, ry: Arc<Tensor>, rx: Arc<Tensor>) -> Var {
        let shape = self.shape(x).to_vec();
        let out = resample_forward(self.value(x).data(), &shape, &ry, &rx);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![shape[0], ry.shape()[0], rx.shape()[0]], out),
            Op::Resample(x, ry, rx),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape preserves element count");
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Offset(a) | Op::Reshape(a) => {
                acc(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))
            }
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, y| x * y)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Powf(a, p) => {
                let ga = Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gv, x)| gv * p * x.powf(p - 1.0))
                        .collect(),
                );
                acc(*a, ga);
            }
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, t| x * (1.0 - t * t))),
            Op::LeakyRelu(a, slope) => {
                acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { slope * x }))
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::MatVec(a, m) => {
                let (rows, cols) = (m.shape()[0], m.shape()[1]);
                let md = m.data();
                let mut ga = vec![0.0; cols];
                for (r, gv) in g.data().iter().enumerate().take(rows) {
                    for (o, mv) in ga.iter_mut().zip(&md[r * cols..(r + 1) * cols]) {
                        *o += gv * mv;
                    }
                }
                acc(*a, Tensor::from_parts(vec![cols], ga));
            }
            Op::Conv2d(a, w) => {
                let shape = val(*a).shape().to_vec();
                let ga = conv2d_backward_input(g.data(), &shape, w);
                acc(*a, Tensor::from_parts(shape, ga));
            }
            Op::ScaleChannels(x, s) => {
                let (c, h, w) = chw(val(*x).shape());
                let hw = h * w;
                let sv = val(*s).data();
                let xv = val(*x).data();
                let gd = g.data();
                if self.nodes[x.0].requires_grad {
                    let mut gx = gd.to_vec();
                    for (ch, plane) in gx.chunks_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v *= sv[ch]);
                    }
                    acc(*x, Tensor::from_parts(vec![c, h, w], gx));
                }
                if self.nodes[s.0].requires_grad {
                    let gs: Vec<f64> = (0..c)
                        .map(|ch| {
                            gd[ch * hw..(ch + 1) * hw]
                                .iter()
                                .zip(&xv[ch * hw..(ch + 1) * hw])
                                .map(|(p, q)| p * q)
                                .sum()
                        })
                        .collect();
                    acc(*s, Tensor::from_parts(vec![c], gs));
                }
            }
            Op::MulSpatial(x, mask) => {
                let mut gx = g.clone();
                let hw = mask.len();
                for plane in gx.data_mut().chunks_mut(hw) {
                    for (v, m) in plane.iter_mut().zip(mask.data()) {
                        *v *= m;
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = chw(val(*x).shape());
                let (h2, w2) = (2 * h, 2 * w);
                let gd = g.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            gx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![c, h, w], gx));
            }
            Op::AvgPool2x(x) => {
                let (c, h, w) = chw(val(*x).shape());
                let (h2, w2) = (h / 2, w / 2);
                let gd = g.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let v = 0.25 * gd[(ch * h2 + y) * w2 + xx];
                            let base = ch * h * w;
                            gx[base + 2 * y * w + 2 * xx] += v;
                            gx[base + 2 * y * w + 2 * xx + 1] += v;
                            gx[base + (2 * y + 1) * w + 2 * xx] += v;
                            gx[base + (2 * y + 1) * w + 2 * xx + 1] += v;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![c, h, w], gx));
            }
            Op::Row(x, i) => {
                let shape = val(*x).shape().to_vec();
                let cols = shape[1];
                let mut gx = vec![0.0; shape[0] * cols];
                gx[i * cols..(i + 1) * cols].copy_from_slice(g.data());
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::SumLeading(x) => {
                let shape = val(*x).shape().to_vec();
                let mut gx = Vec::with_capacity(val(*x).len());
                for _ in 0..shape[0] {
                    gx.extend_from_slice(g.data());
                }
                acc(*x, Tensor::from_parts(shape, gx));
            }
            Op::ChannelNormalize(x, eps) => {
                let (c, h, w) = chw(val(*x).shape());
                let hw = h * w;
                let xv = val(*x).data();
                let gd = g.data();
                let mut gx = vec![0.0; c * hw];
                for p in 0..hw {
                    let n = (0..c).map(|ch| xv[ch * hw + p].powi(2)).sum::<f64>().sqrt();
                    let d = n + eps;
                    let dot: f64 = (0..c).map(|ch| gd[ch * hw + p] * xv[ch * hw + p]).sum();
                    let k = if n > 0.0 { dot / (n * d * d) } else { 0.0 };
                    for ch in 0..c {
                        gx[ch * hw + p] = gd[ch * hw + p] / d - xv[ch * hw + p] * k;
                    }
                }
                acc(*x, Tensor::from_parts(vec![c, h, w], gx));
            }
            Op::SumChannels(x) => {
                let (c, h, w) = chw(val(*x).shape());
                let mut gx = Vec::with_capacity(c * h * w);
                for _ in 0..c {
                    gx.extend_from_slice(g.data());
                }
                acc(*x, Tensor::from_parts(vec![c, h, w], gx));
            }
            Op::Gram(x) => {
                let (c, h, w) = chw(val(*x).shape());
                let n = h * w;
                let xv = val(*x).data();
                let gd = g.data();
                // dX = (G + Gᵀ) X
                let mut gx = vec![0.0; c * n];
                gx.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
                    for j in 0..c {
                        let s = gd[i * c + j] + gd[j * c + i];
                        if s == 0.0 {
                            continue;
                        }
                        for (o, v) in out.iter_mut().zip(&xv[j * n..(j + 1) * n]) {
                            *o += s * v;
                        }
                    }
                });
                acc(*x, Tensor::from_parts(vec![c, h, w], gx));
            }
            Op::CrossEntropy(logits, labels) => {
                let (c, h, w) = chw(val(*logits).shape());
                let hw = h * w;
                let z = val(*logits).data();
                let scale = g.item() / hw as f64;
                let mut gz = vec![0.0; c * hw];
                for (p, &lab) in labels.iter().enumerate() {
                    let mx = (0..c).map(|k| z[k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..c).map(|k| (z[k * hw + p] - mx).exp()).sum();
                    for k in 0..c {
                        let prob = (z[k * hw + p] - mx).exp() / denom;
                        let target = if k == lab as usize { 1.0 } else { 0.0 };
                        gz[k * hw + p] = scale * (prob - target);
                    }
                }
                acc(*logits, Tensor::from_parts(vec![c, h, w], gz));
            }
            Op::Resample(x, ry, rx) => {
                let shape = val(*x).shape().to_vec();
                let gx = resample_backward(g.data(), &shape, ry, rx);
                acc(*x, Tensor::from_parts(shape, gx));
            }
        }
    }
}

fn conv2d_forward(input: &[f64], in_shape: &[usize], weight: &Tensor) -> Vec<f64> {
    let (ci, h, w) = chw(in_shape);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be (C_out, C_in, k, k)");
    assert_eq!(ws[1], ci, "conv weight expects {} input channels, got {}", ws[1], ci);
    let (co, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let wd = weight.data();
    let hw = h * w;
    let mut out = vec![0.0; co * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(o, plane)| {
        for c in 0..ci {
            let inp = &input[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let wv = wd[((o * ci + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    for y in y0..y1 {
                        let src_row = ((y as isize + dy) as usize) * w;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let src = &inp[(src_row as isize + x0 as isize + dx) as usize
                            ..(src_row as isize + x1 as isize + dx) as usize];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_backward_input(gout: &[f64], in_shape: &[usize], weight: &Tensor) -> Vec<f64> {
    let (ci, h, w) = chw(in_shape);
    let ws = weight.shape();
    let (co, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let wd = weight.data();
    let hw = h * w;
    let mut gin = vec![0.0; ci * hw];
    gin.par_chunks_mut(hw).enumerate().for_each(|(c, plane)| {
        for o in 0..co {
            let go = &gout[o * hw..(o + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let wv = wd[((o * ci + c) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    for y in y0..y1 {
                        let in_row = ((y as isize + dy) as usize) * w;
                        let src = &go[y * w + x0..y * w + x1];
                        let dst = &mut plane[(in_row as isize + x0 as isize + dx) as usize
                            ..(in_row as isize + x1 as isize + dx) as usize];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Output coordinates `y` with `0 <= y + d < n`.
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

fn gram_forward(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let v: f64 = x[i * n..(i + 1) * n]
                .iter()
                .zip(&x[j * n..(j + 1) * n])
                .map(|(a, b)| a * b)
                .sum();
            out[i * c + j] = v;
            out[j * c + i] = v;
        }
    }
    out
}

pub(crate) fn resample_forward(x: &[f64], shape: &[usize], ry: &Tensor, rx: &Tensor) -> Vec<f64> {
    let (c, hi, wi) = chw(shape);
    let (ho, wo) = (ry.shape()[0], rx.shape()[0]);
    assert_eq!(ry.shape()[1], hi);
    assert_eq!(rx.shape()[1], wi);
    let (ryd, rxd) = (ry.data(), rx.data());
    let mut out = vec![0.0; c * ho * wo];
    let mut tmp = vec![0.0; hi * wo];
    for ch in 0..c {
        let plane = &x[ch * hi * wi..(ch + 1) * hi * wi];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..hi {
            for j in 0..wo {
                let mut s = 0.0;
                for b in 0..wi {
                    let r = rxd[j * wi + b];
                    if r != 0.0 {
                        s += r * plane[a * wi + b];
                    }
                }
                tmp[a * wo + j] = s;
            }
        }
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for i in 0..ho {
            for a in 0..hi {
                let r = ryd[i * hi + a];
                if r == 0.0 {
                    continue;
                }
                for j in 0..wo {
                    dst[i * wo + j] += r * tmp[a * wo + j];
                }
            }
        }
    }
    out
}

fn resample_backward(g: &[f64], in_shape: &[usize], ry: &Tensor, rx: &Tensor) -> Vec<f64> {
    let (c, hi, wi) = chw(in_shape);
    let (ho, wo) = (ry.shape()[0], rx.shape()[0]);
    let (ryd, rxd) = (ry.data(), rx.data());
    let mut gx = vec![0.0; c * hi * wi];
    let mut tmp = vec![0.0; hi * wo];
    for ch in 0..c {
        let gp = &g[ch * ho * wo..(ch + 1) * ho * wo];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..ho {
            for a in 0..hi {
                let r = ryd[i * hi + a];
                if r == 0.0 {
                    continue;
                }
                for j in 0..wo {
                    tmp[a * wo + j] += r * gp[i * wo + j];
                }
            }
        }
        let dst = &mut gx[ch * hi * wi..(ch + 1) * hi * wi];
        for a in 0..hi {
            for j in 0..wo {
                let t = tmp[a * wo + j];
                if t == 0.0 {
                    continue;
                }
                for b in 0..wi {
                    dst[a * wi + b] += t * rxd[j * wi + b];
                }
            }
        }
    }
    gx
}
