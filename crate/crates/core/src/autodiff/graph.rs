//! The recorded-operation graph. Nodes are appended in execution order, so
//! parents always precede children and the backward pass is a single reverse
//! sweep that touches each node exactly once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::array::Array;
use super::conv::{conv_backward, conv_forward, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a tensor node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { geom: ConvGeom },
    MaxPool2 { argmax: Vec<u32> },
    Upsample2,
    Concat { split: usize },
    Relu,
    Tanh,
    Noise,
    Triplicate { scale: [f64; 3] },
    ReduceL1 { weight: Option<Vec<f64>> },
    ReduceMse,
    Sum,
    Mean,
    Add,
    Scale { factor: f64 },
}

struct Node {
    op: Op,
    parents: Vec<TensorId>,
    value: Array,
    grad: Option<Array>,
    requires_grad: bool,
}

/// A reverse-mode autodiff tape over dense tensors.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, parents: Vec<TensorId>, value: Array) -> TensorId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { op, parents, value, grad: None, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            value,
            grad: None,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Scalar value of a rank-0/1 single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    /// Same-padding dilated 3x3/1x1/... convolution, stride 1.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        dilation: usize,
    ) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let geom = ConvGeom::new(x, w, dilation).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("input {:?} incompatible with weight {:?} (dilation {dilation})", x.shape(), w.shape()),
            )
        })?;
        let b = match bias {
            Some(bid) => {
                let b = &self.nodes[bid.0].value;
                if b.shape() != [geom.cout] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {:?} does not match {} output channels", b.shape(), geom.cout),
                    ));
                }
                Some(b)
            }
            None => None,
        };
        let out = conv_forward(x, w, b, &geom);
        let mut parents = vec![input, weight];
        if let Some(bid) = bias {
            parents.push(bid);
        }
        Ok(self.push(Op::Conv2d { geom }, parents, out))
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.nchw()?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::shape("maxpool2", format!("spatial dims {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let xd = x.data();
        let od = out.data_mut();
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best_idx = in_base + (2 * i) * w + 2 * j;
                    let mut best = xd[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * i + dy) * w + 2 * j + dx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    od[out_base + i * ow + j] = best;
                    argmax[out_base + i * ow + j] = best_idx as u32;
                }
            }
        }
        Ok(self.push(Op::MaxPool2 { argmax }, vec![input], out))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, input: TensorId) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.nchw()?;
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Array::zeros(&[n, c, oh, ow]);
        let xd = x.data();
        let od = out.data_mut();
        for nc in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    let v = xd[nc * h * w + i * w + j];
                    let base = nc * oh * ow + 2 * i * ow + 2 * j;
                    od[base] = v;
                    od[base + 1] = v;
                    od[base + ow] = v;
                    od[base + ow + 1] = v;
                }
            }
        }
        Ok(self.push(Op::Upsample2, vec![input], out))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, ca, h, w) = av.nchw()?;
        let (nb, cb, hb, wb) = bv.nchw()?;
        if n != nb || h != hb || w != wb {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let plane = h * w;
        let mut out = Array::zeros(&[n, ca + cb, h, w]);
        let od = out.data_mut();
        for i in 0..n {
            let dst = i * (ca + cb) * plane;
            od[dst..dst + ca * plane]
                .copy_from_slice(&av.data()[i * ca * plane..(i + 1) * ca * plane]);
            od[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&bv.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(self.push(Op::Concat { split: ca }, vec![a, b], out))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let x = &self.nodes[input.0].value;
        let mut out = x.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu, vec![input], out)
    }

    pub fn tanh_act(&mut self, input: TensorId) -> TensorId {
        let x = &self.nodes[input.0].value;
        let mut out = x.clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.push(Op::Tanh, vec![input], out)
    }

    /// Adds seeded Gaussian noise in training mode; identity otherwise.
    /// Backward is the identity either way.
    pub fn gaussian_noise(
        &mut self,
        input: TensorId,
        std: f64,
        training: bool,
        seed: u64,
    ) -> TensorId {
        assert!(std >= 0.0, "noise std must be non-negative");
        let x = &self.nodes[input.0].value;
        let mut out = x.clone();
        if training && std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in out.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += std * n;
            }
        }
        self.push(Op::Noise, vec![input], out)
    }

    /// Duplicates a single-channel batch into three channels, then applies
    /// the per-channel `(x + offset) * scale` input transform.
    pub fn triplicate(
        &mut self,
        input: TensorId,
        offset: [f64; 3],
        scale: [f64; 3],
    ) -> Result<TensorId> {
        let x = &self.nodes[input.0].value;
        let (n, c, h, w) = x.nchw()?;
        if c != 1 {
            return Err(Error::shape("triplicate", format!("input must be single-channel, got {c}")));
        }
        let plane = h * w;
        let mut out = Array::zeros(&[n, 3, h, w]);
        let od = out.data_mut();
        for i in 0..n {
            let src = &x.data()[i * plane..(i + 1) * plane];
            for (ch, (off, sc)) in offset.iter().zip(&scale).enumerate() {
                let dst = (i * 3 + ch) * plane;
                for (o, s) in od[dst..dst + plane].iter_mut().zip(src) {
                    *o = (s + off) * sc;
                }
            }
        }
        Ok(self.push(Op::Triplicate { scale }, vec![input], out))
    }

    /// Mean of |a - b|, optionally weighted elementwise by a constant field.
    pub fn reduce_l1(
        &mut self,
        a: TensorId,
        b: TensorId,
        weight: Option<&Array>,
    ) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::shape("reduce_l1", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        if let Some(w) = weight {
            if w.numel() != av.numel() {
                return Err(Error::shape(
                    "reduce_l1",
                    format!("weight numel {} vs operand numel {}", w.numel(), av.numel()),
                ));
            }
        }
        let n = av.numel() as f64;
        let sum: f64 = match weight {
            Some(w) => av
                .data()
                .iter()
                .zip(bv.data())
                .zip(w.data())
                .map(|((x, y), wi)| wi * (x - y).abs())
                .sum(),
            None => av.data().iter().zip(bv.data()).map(|(x, y)| (x - y).abs()).sum(),
        };
        let op = Op::ReduceL1 { weight: weight.map(|w| w.data().to_vec()) };
        Ok(self.push(op, vec![a, b], Array::scalar(sum / n)))
    }

    /// Mean of (a - b)^2.
    pub fn reduce_mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::shape("reduce_mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = av.numel() as f64;
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::ReduceMse, vec![a, b], Array::scalar(sum / n)))
    }

    pub fn sum(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.nodes[input.0].value.data().iter().sum();
        self.push(Op::Sum, vec![input], Array::scalar(s))
    }

    pub fn mean(&mut self, input: TensorId) -> TensorId {
        let v = &self.nodes[input.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean, vec![input], Array::scalar(s))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let mut out = self.nodes[input.0].value.clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        self.push(Op::Scale { factor }, vec![input], out)
    }

    /// Reverse sweep from a scalar loss. Transient gradients are propagated
    /// through the tape and then added into each node's accumulator, so
    /// calling backward twice without zeroing doubles every gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut transient: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        transient[loss.0] = Some(Array::from_vec(self.nodes[loss.0].value.shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                transient[i] = None;
                continue;
            }
            let Some(gout) = transient[i].take() else { continue };
            let contributions = self.parent_grads(i, &gout)?;
            for (pid, contrib) in contributions {
                match &mut transient[pid.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&gout),
                slot @ None => *slot = Some(gout),
            }
        }
        Ok(())
    }

    /// Gradient contributions to each parent that requires grad.
    fn parent_grads(&self, i: usize, gout: &Array) -> Result<Vec<(TensorId, Array)>> {
        let node = &self.nodes[i];
        let needs = |p: TensorId| self.nodes[p.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { geom } => {
                let input = node.parents[0];
                let weight = node.parents[1];
                let bias = node.parents.get(2).copied();
                let grads = conv_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    gout,
                    geom,
                    needs(input),
                    needs(weight),
                    bias.map(needs).unwrap_or(false),
                );
                if let Some(g) = grads.input {
                    out.push((input, g));
                }
                if let Some(g) = grads.weight {
                    out.push((weight, g));
                }
                if let (Some(bid), Some(g)) = (bias, grads.bias) {
                    out.push((bid, g));
                }
            }
            Op::MaxPool2 { argmax } => {
                let p = node.parents[0];
                if needs(p) {
                    let mut g = Array::zeros(self.nodes[p.0].value.shape());
                    let gd = g.data_mut();
                    for (gi, &src) in gout.data().iter().zip(argmax) {
                        gd[src as usize] += gi;
                    }
                    out.push((p, g));
                }
            }
            Op::Upsample2 => {
                let p = node.parents[0];
                if needs(p) {
                    let (n, c, h, w) = self.nodes[p.0].value.nchw()?;
                    let (oh, ow) = (h * 2, w * 2);
                    let mut g = Array::zeros(&[n, c, h, w]);
                    let gd = g.data_mut();
                    let god = gout.data();
                    for nc in 0..n * c {
                        for i in 0..h {
                            for j in 0..w {
                                let base = nc * oh * ow + 2 * i * ow + 2 * j;
                                gd[nc * h * w + i * w + j] =
                                    god[base] + god[base + 1] + god[base + ow] + god[base + ow + 1];
                            }
                        }
                    }
                    out.push((p, g));
                }
            }
            Op::Concat { split } => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let (n, ctot, h, w) = node.value.nchw()?;
                let plane = h * w;
                let ca = *split;
                let cb = ctot - ca;
                if needs(a) {
                    let mut g = Array::zeros(self.nodes[a.0].value.shape());
                    for i in 0..n {
                        let src = i * ctot * plane;
                        g.data_mut()[i * ca * plane..(i + 1) * ca * plane]
                            .copy_from_slice(&gout.data()[src..src + ca * plane]);
                    }
                    out.push((a, g));
                }
                if needs(b) {
                    let mut g = Array::zeros(self.nodes[b.0].value.shape());
                    for i in 0..n {
                        let src = i * ctot * plane + ca * plane;
                        g.data_mut()[i * cb * plane..(i + 1) * cb * plane]
                            .copy_from_slice(&gout.data()[src..src + cb * plane]);
                    }
                    out.push((b, g));
                }
            }
            Op::Relu => {
                let p = node.parents[0];
                if needs(p) {
                    let mut g = gout.clone();
                    // Subgradient 0 at exactly zero.
                    for (gv, xv) in g.data_mut().iter_mut().zip(self.nodes[p.0].value.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    out.push((p, g));
                }
            }
            Op::Tanh => {
                let p = node.parents[0];
                if needs(p) {
                    let mut g = gout.clone();
                    for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    out.push((p, g));
                }
            }
            Op::Noise => {
                let p = node.parents[0];
                if needs(p) {
                    out.push((p, gout.clone()));
                }
            }
            Op::Triplicate { scale } => {
                let p = node.parents[0];
                if needs(p) {
                    let (n, _, h, w) = node.value.nchw()?;
                    let plane = h * w;
                    let mut g = Array::zeros(self.nodes[p.0].value.shape());
                    let gd = g.data_mut();
                    for i in 0..n {
                        for (ch, sc) in scale.iter().enumerate() {
                            let src = (i * 3 + ch) * plane;
                            for (o, gi) in gd[i * plane..(i + 1) * plane]
                                .iter_mut()
                                .zip(&gout.data()[src..src + plane])
                            {
                                *o += sc * gi;
                            }
                        }
                    }
                    out.push((p, g));
                }
            }
            Op::ReduceL1 { weight } => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let g0 = gout.data()[0];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let n = av.numel() as f64;
                let signed = |i: usize| {
                    let d = av.data()[i] - bv.data()[i];
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    let w = weight.as_ref().map(|w| w[i]).unwrap_or(1.0);
                    g0 * w * s / n
                };
                if needs(a) {
                    let data: Vec<f64> = (0..av.numel()).map(signed).collect();
                    out.push((a, Array::from_vec(av.shape(), data)?));
                }
                if needs(b) {
                    let data: Vec<f64> = (0..av.numel()).map(|i| -signed(i)).collect();
                    out.push((b, Array::from_vec(bv.shape(), data)?));
                }
            }
            Op::ReduceMse => {
                let (a, b) = (node.parents[0], node.parents[1]);
                let g0 = gout.data()[0];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let n = av.numel() as f64;
                if needs(a) {
                    let data: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| g0 * 2.0 * (x - y) / n)
                        .collect();
                    out.push((a, Array::from_vec(av.shape(), data)?));
                }
                if needs(b) {
                    let data: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| -g0 * 2.0 * (x - y) / n)
                        .collect();
                    out.push((b, Array::from_vec(bv.shape(), data)?));
                }
            }
            Op::Sum => {
                let p = node.parents[0];
                if needs(p) {
                    let g0 = gout.data()[0];
                    let v = &self.nodes[p.0].value;
                    out.push((p, Array::from_vec(v.shape(), vec![g0; v.numel()])?));
                }
            }
            Op::Mean => {
                let p = node.parents[0];
                if needs(p) {
                    let v = &self.nodes[p.0].value;
                    let g0 = gout.data()[0] / v.numel() as f64;
                    out.push((p, Array::from_vec(v.shape(), vec![g0; v.numel()])?));
                }
            }
            Op::Add => {
                for p in [node.parents[0], node.parents[1]] {
                    if needs(p) {
                        out.push((p, gout.clone()));
                    }
                }
            }
            Op::Scale { factor } => {
                let p = node.parents[0];
                if needs(p) {
                    let mut g = gout.clone();
                    for v in g.data_mut() {
                        *v *= factor;
                    }
                    out.push((p, g));
                }
            }
        }
        Ok(out)
    }
}
