//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] owns every tensor produced during a forward pass and records
//! each operation in execution order. [`Graph::backward`] replays that record
//! in reverse, accumulating gradients into every node that tracks one.
//!
//! ```
//! use tnet_core::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{dims4, Tensor};

/// Handle to a tensor owned by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Mean {
        input: NodeId,
    },
    DiceLoss {
        pred: NodeId,
        target: NodeId,
        eps: T,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    SoftArgmax {
        input: NodeId,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample2_nearest",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::DiceLoss { .. } => "dice_loss",
            Op::Mse { .. } => "loc_loss",
            Op::SoftArgmax { .. } => "spatial_soft_argmax",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![input, kernel, bias],
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::Sigmoid { input }
            | Op::Relu { input }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::SoftArgmax { input, .. } => vec![input],
            Op::Concat { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::DiceLoss { pred, target, .. } | Op::Mse { pred, target } => vec![pred, target],
        }
    }
}

#[derive(Clone, Debug)]
struct Record<T> {
    op: Op<T>,
    output: NodeId,
}

/// Summary of one recorded operation, for inspection and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpInfo {
    pub name: &'static str,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Tensor<T>>,
    leaves: Vec<bool>,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: Vec::new(),
            records: Vec::new(),
        }
    }

    fn push(&mut self, tensor: Tensor<T>, leaf: bool) -> NodeId {
        self.nodes.push(tensor);
        self.leaves.push(leaf);
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; it tracks a gradient iff `tensor` does.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        self.push(tensor, true)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.set_requires_grad(false);
        self.push(tensor, true)
    }

    /// Inserts a copy of `tensor` as a gradient-tracking leaf with a fresh
    /// zeroed gradient buffer.
    pub fn param(&mut self, tensor: &Tensor<T>) -> NodeId {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec())
            .expect("tensor invariants already hold");
        t.set_requires_grad(true);
        self.push(t, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Recorded operations in execution order.
    pub fn ops(&self) -> Vec<OpInfo> {
        self.records
            .iter()
            .map(|r| OpInfo {
                name: r.op.name(),
                inputs: r.op.inputs(),
                output: r.output,
            })
            .collect()
    }

    /// Hash of every piecewise branch taken in the forward pass: the sign
    /// pattern of each ReLU input and the winner of each max-pool window.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for r in &self.records {
            match &r.op {
                Op::Relu { input } => {
                    for &v in self.nodes[input.0].data() {
                        mix((v > T::zero()) as u64);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Zeroes every gradient buffer, leaves included.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(Tensor::zero_grad);
    }

    fn record(&mut self, op: Op<T>, shape: &[usize], data: Vec<T>) -> NodeId {
        let track = op.inputs().iter().any(|&i| self.requires_grad(i));
        let mut out = Tensor::new(shape, data).expect("op produced consistent shape");
        out.set_requires_grad(track);
        let id = self.push(out, false);
        self.records.push(Record { op, output: id });
        id
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: usize,
    ) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(input).shape(), "conv2d")?;
        let (f, kc, kh, kw) = dims4(self.value(kernel).shape(), "conv2d")?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be odd and square, got {kh}x{kw}")));
        }
        if self.value(bias).shape() != [f] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} for {f} filters", self.value(bias).shape()),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh} exceeds padded input {h}x{w}")));
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            out_ch: f,
            h,
            w,
            k: kh,
            pad: padding,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![T::zero(); b * f * oh * ow];
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &mut out,
        );
        Ok(self.record(
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[b, f, oh, ow],
            out,
        ))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(input).shape(), "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("spatial extent {h}x{w} is not even")));
        }
        let mut out = vec![T::zero(); b * c * h * w / 4];
        let argmax = kernels::maxpool2_forward(b * c, h, w, self.value(input).data(), &mut out);
        Ok(self.record(Op::MaxPool2 { input, argmax }, &[b, c, h / 2, w / 2], out))
    }

    pub fn upsample2_nearest(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(input).shape(), "upsample2_nearest")?;
        let mut out = vec![T::zero(); b * c * h * w * 4];
        kernels::upsample2_forward(b * c, h, w, self.value(input).data(), &mut out);
        Ok(self.record(Op::Upsample2 { input }, &[b, c, 2 * h, 2 * w], out))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out = x.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        self.record(Op::Sigmoid { input }, &shape, out)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out = x.data().iter().map(|&v| v.max(T::zero())).collect();
        self.record(Op::Relu { input }, &shape, out)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, ca, ha, wa) = dims4(self.value(a).shape(), "concat_channels")?;
        let (bb, cb, hb, wb) = dims4(self.value(b).shape(), "concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for n in 0..ba {
            out.extend_from_slice(&xa[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&xb[n * cb * plane..(n + 1) * cb * plane]);
        }
        Ok(self.record(Op::Concat { a, b }, &[ba, ca + cb, ha, wa], out))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.record(Op::Add { a, b }, &shape, out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.record(Op::Mul { a, b }, &shape, out))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().copied().sum();
        self.record(Op::Sum { input }, &[1], vec![s])
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input).data();
        let s: T = x.iter().copied().sum::<T>() / T::of(x.len().max(1) as f64);
        self.record(Op::Mean { input }, &[1], vec![s])
    }

    /// Soft dice loss: `1 - mean over (batch, channel) of
    /// 2 sum(p g) / (sum(p^2) + sum(g^2) + eps)`, sums taken over each map.
    pub fn dice_loss(&mut self, pred: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
        let shape = self.same_shape("dice_loss", pred, target)?;
        let (b, n, h, w) = dims4(&shape, "dice_loss")?;
        let eps = T::of(eps);
        let stats = dice_stats(self.value(pred).data(), self.value(target).data(), h * w);
        let mean_dice = stats
            .iter()
            .map(|s| (s.inter + s.inter) / (s.pp + s.gg + eps))
            .sum::<T>()
            / T::of((b * n) as f64);
        Ok(self.record(Op::DiceLoss { pred, target, eps }, &[1], vec![T::one() - mean_dice]))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("loc_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = s / T::of(p.len().max(1) as f64);
        Ok(self.record(Op::Mse { pred, target }, &[1], vec![v]))
    }

    /// Softmax over each `[H, W]` map of a `[B, 1, H, W]` tensor, followed by
    /// the expected pixel-centre coordinate `((j + 0.5) / W, (i + 0.5) / H)`.
    /// Output is `[B, 2]` holding `(x, y)` in the open unit square.
    pub fn spatial_soft_argmax(&mut self, input: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(input).shape(), "spatial_soft_argmax")?;
        if c != 1 {
            return Err(Error::shape("spatial_soft_argmax", format!("expected 1 channel, got {c}")));
        }
        let x = self.value(input).data();
        let plane = h * w;
        let mut probs = vec![T::zero(); b * plane];
        let mut out = Vec::with_capacity(2 * b);
        for n in 0..b {
            let logits = &x[n * plane..(n + 1) * plane];
            let p = &mut probs[n * plane..(n + 1) * plane];
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pi, &l) in p.iter_mut().zip(logits) {
                *pi = (l - m).exp();
                z += *pi;
            }
            let (mut ex, mut ey) = (T::zero(), T::zero());
            for (k, pi) in p.iter_mut().enumerate() {
                *pi /= z;
                ex += *pi * grid_coord(k % w, w);
                ey += *pi * grid_coord(k / w, h);
            }
            out.push(ex);
            out.push(ey);
        }
        Ok(self.record(Op::SoftArgmax { input, probs }, &[b, 2], out))
    }

    /// Accumulates d`loss`/d(node) into every gradient-tracking node.
    ///
    /// Intermediate gradients are reset first; leaf gradients keep
    /// accumulating across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        for (t, &leaf) in self.nodes.iter_mut().zip(&self.leaves) {
            if !leaf {
                t.zero_grad();
            }
        }
        self.nodes[loss.0].grad_mut().expect("tracked")[0] += T::one();
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev().filter(|r| r.output <= loss) {
            let Some(gout) = self.nodes[rec.output.0].take_grad() else {
                continue;
            };
            self.backprop(&rec.op, rec.output, &gout);
            self.nodes[rec.output.0].put_grad(Some(gout));
        }
        self.records = records;
        Ok(())
    }

    /// Gradient buffer of `id` if it tracks one; borrowed mutably.
    fn gbuf(&mut self, id: NodeId) -> Option<&mut [T]> {
        self.nodes[id.0].grad_mut()
    }

    fn backprop(&mut self, op: &Op<T>, output: NodeId, gout: &[T]) {
        match op {
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut dx = self.nodes[input.0].take_grad();
                let mut dw = self.nodes[kernel.0].take_grad();
                let mut db = self.nodes[bias.0].take_grad();
                kernels::conv2d_backward(
                    geom,
                    self.nodes[input.0].data(),
                    self.nodes[kernel.0].data(),
                    gout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.nodes[input.0].put_grad(dx);
                self.nodes[kernel.0].put_grad(dw);
                self.nodes[bias.0].put_grad(db);
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = self.gbuf(*input) {
                    for (&src, &g) in argmax.iter().zip(gout) {
                        dx[src] += g;
                    }
                }
            }
            Op::Upsample2 { input } => {
                let (b, c, h, w) = dims4(self.value(*input).shape(), "upsample2_nearest")
                    .expect("validated in forward");
                if let Some(dx) = self.gbuf(*input) {
                    kernels::upsample2_backward(b * c, h, w, gout, dx);
                }
            }
            Op::Sigmoid { input } => {
                let y = self.value(output).data().to_vec();
                if let Some(dx) = self.gbuf(*input) {
                    for ((d, &yv), &g) in dx.iter_mut().zip(&y).zip(gout) {
                        *d += g * yv * (T::one() - yv);
                    }
                }
            }
            Op::Relu { input } => {
                let mut dx = self.nodes[input.0].take_grad();
                if let Some(dx) = dx.as_deref_mut() {
                    for ((d, &xv), &g) in dx.iter_mut().zip(self.nodes[input.0].data()).zip(gout) {
                        if xv > T::zero() {
                            *d += g;
                        }
                    }
                }
                self.nodes[input.0].put_grad(dx);
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = dims4(self.value(*a).shape(), "concat").expect("validated");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let (sa, sb) = (ca * plane, cb * plane);
                if let Some(da) = self.gbuf(*a) {
                    for i in 0..n {
                        let src = &gout[i * (sa + sb)..i * (sa + sb) + sa];
                        da[i * sa..(i + 1) * sa].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(db) = self.gbuf(*b) {
                    for i in 0..n {
                        let src = &gout[i * (sa + sb) + sa..(i + 1) * (sa + sb)];
                        db[i * sb..(i + 1) * sb].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(d) = self.gbuf(id) {
                        d.iter_mut().zip(gout).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(d) = self.gbuf(*a) {
                    for ((d, &y), &g) in d.iter_mut().zip(&vb).zip(gout) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.gbuf(*b) {
                    for ((d, &x), &g) in d.iter_mut().zip(&va).zip(gout) {
                        *d += g * x;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(d) = self.gbuf(*input) {
                    d.iter_mut().for_each(|d| *d += gout[0]);
                }
            }
            Op::Mean { input } => {
                let n = T::of(self.value(*input).numel().max(1) as f64);
                if let Some(d) = self.gbuf(*input) {
                    d.iter_mut().for_each(|d| *d += gout[0] / n);
                }
            }
            Op::DiceLoss { pred, target, eps } => {
                let (b, n, h, w) = dims4(self.value(*pred).shape(), "dice_loss").expect("validated");
                let plane = h * w;
                let (p, g) = (self.value(*pred).data().to_vec(), self.value(*target).data().to_vec());
                let stats = dice_stats(&p, &g, plane);
                let scale = gout[0] / T::of((b * n) as f64);
                let two = T::of(2.0);
                // d(1 - dice)/dp_i = -(2 g_i / s - 4 I p_i / s^2), symmetric in (p, g)
                let mut grad_of = |id: NodeId, own: &[T], other: &[T]| {
                    if let Some(d) = self.gbuf(id) {
                        for (m, s) in stats.iter().enumerate() {
                            let denom = s.pp + s.gg + *eps;
                            let a = two / denom;
                            let c = two * (s.inter + s.inter) / (denom * denom);
                            for i in m * plane..(m + 1) * plane {
                                d[i] -= scale * (a * other[i] - c * own[i]);
                            }
                        }
                    }
                };
                grad_of(*pred, &p, &g);
                grad_of(*target, &g, &p);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data().to_vec(), self.value(*target).data().to_vec());
                let k = T::of(2.0) * gout[0] / T::of(p.len().max(1) as f64);
                if let Some(d) = self.gbuf(*pred) {
                    for ((d, &a), &b) in d.iter_mut().zip(&p).zip(&t) {
                        *d += k * (a - b);
                    }
                }
                if let Some(d) = self.gbuf(*target) {
                    for ((d, &a), &b) in d.iter_mut().zip(&p).zip(&t) {
                        *d -= k * (a - b);
                    }
                }
            }
            Op::SoftArgmax { input, probs } => {
                let (b, _, h, w) = dims4(self.value(*input).shape(), "spatial_soft_argmax").expect("validated");
                let plane = h * w;
                let out = self.value(output).data().to_vec();
                if let Some(d) = self.gbuf(*input) {
                    for n in 0..b {
                        let (ex, ey) = (out[2 * n], out[2 * n + 1]);
                        let (gx, gy) = (gout[2 * n], gout[2 * n + 1]);
                        for k in 0..plane {
                            let p = probs[n * plane + k];
                            let cx = grid_coord::<T>(k % w, w) - ex;
                            let cy = grid_coord::<T>(k / w, h) - ey;
                            d[n * plane + k] += p * (gx * cx + gy * cy);
                        }
                    }
                }
            }
        }
    }
}

fn grid_coord<T: Scalar>(index: usize, extent: usize) -> T {
    T::of((index as f64 + 0.5) / extent as f64)
}

struct DiceStats<T> {
    inter: T,
    pp: T,
    gg: T,
}

fn dice_stats<T: Scalar>(p: &[T], g: &[T], plane: usize) -> Vec<DiceStats<T>> {
    p.chunks_exact(plane.max(1))
        .zip(g.chunks_exact(plane.max(1)))
        .map(|(pm, gm)| DiceStats {
            inter: pm.iter().zip(gm).map(|(&a, &b)| a * b).sum(),
            pp: pm.iter().map(|&a| a * a).sum(),
            gg: gm.iter().map(|&b| b * b).sum(),
        })
        .collect()
}
