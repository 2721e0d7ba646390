//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every node that depends on a trainable leaf.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::ss2d::{scan_backward, scan_forward, ScanShape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Exp,
    Abs,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `[C, ...] + [C]` broadcast over positions.
    AddChannelBias(Var, Var),
    /// `[C, P] * [1, P]` broadcast over channels.
    MulPositions(Var, Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    /// `out[c, i] = in[c, index[i]]` over the flattened trailing axes.
    Gather { input: Var, index: Arc<[usize]> },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GlobalAvgPool(Var),
    Softmax(Var),
    Reshape(Var),
    Upsample(Var, usize),
    AvgPool(Var, usize),
    Concat(Vec<Var>),
    SliceChannels { input: Var, start: usize },
    Sum(Var),
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        shape: ScanShape,
        states: Vec<T>,
    },
    StructureLoss {
        logits: Var,
        target: Arc<Tensor<T>>,
        weight: Arc<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let va = self.value(a);
        let c = va.shape()[0];
        let vb = self.value(bias);
        assert_eq!(vb.len(), c, "bias length must equal channel count");
        let per = va.len() / c;
        let mut t = va.clone();
        for (ch, chunk) in t.data_mut().chunks_mut(per).enumerate() {
            let b = vb.data()[ch];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(t, Op::AddChannelBias(a, bias), ng)
    }

    /// Multiplies every channel of `a: [C, ...]` by `m: [1, ...]`.
    pub fn mul_positions(&mut self, a: Var, m: Var) -> Var {
        let (va, vm) = (self.value(a), self.value(m));
        let per = vm.len();
        assert_eq!(va.len() % per, 0, "mul_positions: incompatible sizes");
        assert_eq!(&va.shape()[1..], &vm.shape()[1..], "mul_positions: spatial mismatch");
        let mut t = va.clone();
        for chunk in t.data_mut().chunks_mut(per) {
            for (v, &g) in chunk.iter_mut().zip(vm.data()) {
                *v *= g;
            }
        }
        let ng = self.ng(a) || self.ng(m);
        self.push(t, Op::MulPositions(a, m), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => |x: T| x.sigmoid(),
            Unary::Silu => |x: T| x * x.sigmoid(),
            Unary::Relu => |x: T| x.max(T::zero()),
            Unary::Softplus => |x: T| x.softplus(),
            Unary::Exp => |x: T| x.exp(),
            Unary::Abs => |x: T| x.abs(),
        };
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, Op::Unary(a, kind), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// `w: [M, K] @ x: [K, ...]` with the trailing axes flattened.
    pub fn matmul(&mut self, w: Var, x: Var) -> Var {
        let (vw, vx) = (self.value(w), self.value(x));
        assert_eq!(vw.shape().len(), 2, "matmul: lhs must be 2-D");
        let (m, k) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.shape()[0], k, "matmul: inner dimension mismatch");
        let n = vx.len() / k;
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(vw.data(), vx.data(), m, k, n, &mut out);
        let mut shape = vx.shape().to_vec();
        shape[0] = m;
        let t = Tensor::from_vec(&shape, out).unwrap();
        let ng = self.ng(w) || self.ng(x);
        self.push(t, Op::MatMul(w, x), ng)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let (ci, h, w) = self.value(input).chw();
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin/g, k, k]");
        assert_eq!(ws[1] * groups, ci, "conv: input channels {} vs weight {:?} groups {}", ci, ws, groups);
        let geo = ConvGeometry {
            in_channels: ci,
            out_channels: ws[0],
            height: h,
            width: w,
            kernel: ws[2],
            stride,
            pad,
            groups,
        };
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let mut out = vec![T::zero(); geo.out_channels * ho * wo];
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        kernels::conv2d_forward(&geo, self.value(input).data(), self.value(weight).data(), bias_data.as_deref(), &mut out);
        let t = Tensor::from_vec(&[geo.out_channels, ho, wo], out).unwrap();
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv2d { input, weight, bias, geo }, ng)
    }

    /// Gathers positions of `[C, ...]`; the result is `[C, index.len()]`.
    pub fn gather(&mut self, input: Var, index: Arc<[usize]>) -> Var {
        let v = self.value(input);
        let c = v.shape()[0];
        let per = v.len() / c;
        let mut out = Vec::with_capacity(c * index.len());
        for ch in 0..c {
            let row = &v.data()[ch * per..(ch + 1) * per];
            out.extend(index.iter().map(|&i| row[i]));
        }
        let t = Tensor::from_vec(&[c, index.len()], out).unwrap();
        let ng = self.ng(input);
        self.push(t, Op::Gather { input, index }, ng)
    }

    /// Normalizes `[C, ...]` over the channel axis at every position.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let v = self.value(input);
        let c = v.shape()[0];
        let p = v.len() / c;
        let x = v.data();
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            for (m, &xv) in mean.iter_mut().zip(&x[ch * p..(ch + 1) * p]) {
                *m += xv;
            }
        }
        let inv_c = T::one() / T::lit(c as f64);
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for ((s, &xv), &m) in var.iter_mut().zip(&x[ch * p..(ch + 1) * p]).zip(&mean) {
                let d = xv - m;
                *s += d * d;
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_c + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); c * p];
        let mut out = vec![T::zero(); c * p];
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        for ch in 0..c {
            for i in 0..p {
                let xh = (x[ch * p + i] - mean[i]) * rstd[i];
                xhat[ch * p + i] = xh;
                out[ch * p + i] = gm[ch] * xh + bt[ch];
            }
        }
        let t = Tensor::from_vec(v.shape(), out).unwrap();
        let ng = self.ng(input) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let c = v.shape()[0];
        let per = v.len() / c;
        let inv = T::one() / T::lit(per as f64);
        let data = v.data().chunks(per).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let t = Tensor::from_vec(&[c], data).unwrap();
        let ng = self.ng(input);
        self.push(t, Op::GlobalAvgPool(input), ng)
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let m = v.data().iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = v.data().iter().map(|&x| (x - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        let t = Tensor::from_vec(v.shape(), e.into_iter().map(|x| x / s).collect()).unwrap();
        let ng = self.ng(input);
        self.push(t, Op::Softmax(input), ng)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Var {
        let t = self.value(input).clone().reshape(shape).expect("reshape: element count mismatch");
        let ng = self.ng(input);
        self.push(t, Op::Reshape(input), ng)
    }

    /// Nearest-neighbour upsampling of `[C, H, W]`.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Var {
        if factor == 1 {
            return input;
        }
        let (c, h, w) = self.value(input).chw();
        let data = kernels::upsample_nearest(self.value(input).data(), c, h, w, factor);
        let t = Tensor::from_vec(&[c, h * factor, w * factor], data).unwrap();
        let ng = self.ng(input);
        self.push(t, Op::Upsample(input, factor), ng)
    }

    /// Average pooling of `[C, H, W]` over non-overlapping `factor` blocks.
    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Var {
        if factor == 1 {
            return input;
        }
        let (c, h, w) = self.value(input).chw();
        assert!(h % factor == 0 && w % factor == 0, "avg_pool: {h}x{w} not divisible by {factor}");
        let inv = T::one() / T::lit((factor * factor) as f64);
        let data = kernels::sum_pool(self.value(input).data(), c, h, w, factor)
            .into_iter()
            .map(|v| v * inv)
            .collect();
        let t = Tensor::from_vec(&[c, h / factor, w / factor], data).unwrap();
        let ng = self.ng(input);
        self.push(t, Op::AvgPool(input, factor), ng)
    }

    /// Concatenates along axis 0; trailing shapes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Var {
        let tail = self.value(inputs[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            assert_eq!(&t.shape()[1..], &tail[..], "concat: trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::from_vec(&shape, data).unwrap();
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(t, Op::Concat(inputs.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Var {
        let v = self.value(input);
        let per = v.len() / v.shape()[0];
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let t = Tensor::from_vec(&shape, v.data()[start * per..(start + len) * per].to_vec()).unwrap();
        let ng = self.ng(input);
        self.push(t, Op::SliceChannels { input, start }, ng)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let t = Tensor::scalar(self.value(input).sum());
        let ng = self.ng(input);
        self.push(t, Op::Sum(input), ng)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        let s = self.sum(input);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Diagonal selective scan. Shapes: `x, delta: [C, L]`, `a: [C, N]`,
    /// `b, c: [N, L]`, `d: [C]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape(&[0, 0], &xs));
        }
        let (channels, len) = (xs[0], xs[1]);
        let n = self.value(a).shape().get(1).copied().unwrap_or(0);
        let shape = ScanShape {
            channels,
            len,
            state: n,
        };
        self.value(delta).ensure_shape(&[channels, len])?;
        self.value(a).ensure_shape(&[channels, n])?;
        self.value(b).ensure_shape(&[n, len])?;
        self.value(c).ensure_shape(&[n, len])?;
        self.value(d).ensure_shape(&[channels])?;
        let mut states = vec![T::zero(); channels * len * n];
        let y = scan_forward(
            &shape,
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            Some(&mut states),
        );
        let t = Tensor::from_vec(&[channels, len], y).unwrap();
        let ng = [x, delta, a, b, c, d].iter().any(|&v| self.ng(v));
        Ok(self.push(
            t,
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d,
                shape,
                states,
            },
            ng,
        ))
    }

    /// Pixel-weighted BCE plus weighted IoU on logits against a binary
    /// target; `weight` is the per-pixel boundary emphasis.
    pub fn structure_loss(&mut self, logits: Var, target: Arc<Tensor<T>>, weight: Arc<Tensor<T>>) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != target.len() || z.len() != weight.len() {
            return Err(Error::shape(target.shape(), z.shape()));
        }
        let v = crate::model::loss::structure_loss_value(z.data(), target.data(), weight.data());
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(v), Op::StructureLoss { logits, target, weight }, ng))
    }

    /// Reverse sweep from a scalar `root`. Returns per-node gradients; nodes
    /// that do not depend on a trainable leaf yield `None`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.acc(grads, v, |dst| add_into(dst, gd));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |dst| {
                    for ((d, &gv), &y) in dst.iter_mut().zip(gd).zip(vb) {
                        *d += gv * y;
                    }
                });
                self.acc(grads, *b, |dst| {
                    for ((d, &gv), &x) in dst.iter_mut().zip(gd).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(gd) {
                        *d += gv * s;
                    }
                });
            }
            Op::AddChannelBias(a, b) => {
                self.acc(grads, *a, |dst| add_into(dst, gd));
                let c = self.value(*b).len();
                let per = gd.len() / c;
                self.acc(grads, *b, |dst| {
                    for (ch, chunk) in gd.chunks(per).enumerate() {
                        dst[ch] += chunk.iter().copied().sum();
                    }
                });
            }
            Op::MulPositions(a, m) => {
                let (va, vm) = (self.value(*a).data(), self.value(*m).data());
                let per = vm.len();
                self.acc(grads, *a, |dst| {
                    for (dchunk, gchunk) in dst.chunks_mut(per).zip(gd.chunks(per)) {
                        for ((d, &gv), &mv) in dchunk.iter_mut().zip(gchunk).zip(vm) {
                            *d += gv * mv;
                        }
                    }
                });
                self.acc(grads, *m, |dst| {
                    for (gchunk, achunk) in gd.chunks(per).zip(va.chunks(per)) {
                        for ((d, &gv), &av) in dst.iter_mut().zip(gchunk).zip(achunk) {
                            *d += gv * av;
                        }
                    }
                });
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = self.nodes[i].value.data();
                let kind = *kind;
                self.acc(grads, *a, |dst| {
                    for (((d, &gv), &xv), &yv) in dst.iter_mut().zip(gd).zip(x).zip(y) {
                        let dy = match kind {
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Silu => {
                                let s = xv.sigmoid();
                                s * (T::one() + xv * (T::one() - s))
                            }
                            Unary::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Softplus => xv.sigmoid(),
                            Unary::Exp => yv,
                            Unary::Abs => xv.signum(),
                        };
                        *d += gv * dy;
                    }
                });
            }
            Op::MatMul(w, x) => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, k) = (vw.shape()[0], vw.shape()[1]);
                let n = vx.len() / k;
                let need_w = self.ng(*w);
                let need_x = self.ng(*x);
                let mut gw = need_w.then(|| vec![T::zero(); m * k]);
                let mut gx = need_x.then(|| vec![T::zero(); k * n]);
                kernels::matmul_backward(vw.data(), vx.data(), gd, m, k, n, gw.as_deref_mut(), gx.as_deref_mut());
                if let Some(gw) = gw {
                    self.acc(grads, *w, |dst| add_into(dst, &gw));
                }
                if let Some(gx) = gx {
                    self.acc(grads, *x, |dst| add_into(dst, &gx));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            } => {
                let (vi, vw) = (self.value(*input), self.value(*weight));
                let mut gi = self.ng(*input).then(|| vec![T::zero(); vi.len()]);
                let mut gw = self.ng(*weight).then(|| vec![T::zero(); vw.len()]);
                let mut gb = bias.filter(|b| self.ng(*b)).map(|b| vec![T::zero(); self.value(b).len()]);
                kernels::conv2d_backward(geo, vi.data(), vw.data(), gd, gi.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(gi) = gi {
                    self.acc(grads, *input, |dst| add_into(dst, &gi));
                }
                if let Some(gw) = gw {
                    self.acc(grads, *weight, |dst| add_into(dst, &gw));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.acc(grads, *b, |dst| add_into(dst, &gb));
                }
            }
            Op::Gather { input, index } => {
                let v = self.value(*input);
                let c = v.shape()[0];
                let per = v.len() / c;
                let n = index.len();
                self.acc(grads, *input, |dst| {
                    for ch in 0..c {
                        let drow = &mut dst[ch * per..(ch + 1) * per];
                        for (k, &src) in index.iter().enumerate() {
                            drow[src] += gd[ch * n + k];
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).len();
                let p = xhat.len() / c;
                let gm = self.value(*gamma).data();
                self.acc(grads, *gamma, |dst| {
                    for ch in 0..c {
                        let mut acc = T::zero();
                        for k in 0..p {
                            acc += gd[ch * p + k] * xhat[ch * p + k];
                        }
                        dst[ch] += acc;
                    }
                });
                self.acc(grads, *beta, |dst| {
                    for ch in 0..c {
                        dst[ch] += gd[ch * p..(ch + 1) * p].iter().copied().sum();
                    }
                });
                if self.ng(*input) {
                    let mut s1 = vec![T::zero(); p];
                    let mut s2 = vec![T::zero(); p];
                    for ch in 0..c {
                        for k in 0..p {
                            let gx = gd[ch * p + k] * gm[ch];
                            s1[k] += gx;
                            s2[k] += gx * xhat[ch * p + k];
                        }
                    }
                    let inv_c = T::one() / T::lit(c as f64);
                    self.acc(grads, *input, |dst| {
                        for ch in 0..c {
                            for k in 0..p {
                                let gx = gd[ch * p + k] * gm[ch];
                                dst[ch * p + k] += rstd[k] * (gx - inv_c * (s1[k] + xhat[ch * p + k] * s2[k]));
                            }
                        }
                    });
                }
            }
            Op::GlobalAvgPool(a) => {
                let v = self.value(*a);
                let c = v.shape()[0];
                let per = v.len() / c;
                let inv = T::one() / T::lit(per as f64);
                self.acc(grads, *a, |dst| {
                    for (ch, chunk) in dst.chunks_mut(per).enumerate() {
                        let gv = gd[ch] * inv;
                        chunk.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let dot: T = y.iter().zip(gd).map(|(&yv, &gv)| yv * gv).sum();
                self.acc(grads, *a, |dst| {
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gd) {
                        *d += yv * (gv - dot);
                    }
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, |dst| add_into(dst, gd)),
            Op::Upsample(a, f) => {
                let (c, h, w) = self.value(*a).chw();
                let pooled = kernels::sum_pool(gd, c, h * f, w * f, *f);
                self.acc(grads, *a, |dst| add_into(dst, &pooled));
            }
            Op::AvgPool(a, f) => {
                let (c, h, w) = self.value(*a).chw();
                let inv = T::one() / T::lit((f * f) as f64);
                let up = kernels::upsample_nearest(gd, c, h / f, w / f, *f);
                self.acc(grads, *a, |dst| {
                    for (d, &u) in dst.iter_mut().zip(&up) {
                        *d += u * inv;
                    }
                });
            }
            Op::Concat(inputs) => {
                let mut off = 0;
                for &v in inputs {
                    let n = self.value(v).len();
                    self.acc(grads, v, |dst| add_into(dst, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::SliceChannels { input, start } => {
                let v = self.value(*input);
                let per = v.len() / v.shape()[0];
                let off = start * per;
                self.acc(grads, *input, |dst| add_into(&mut dst[off..off + gd.len()], gd));
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.acc(grads, *a, |dst| dst.iter_mut().for_each(|d| *d += gv));
            }
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d,
                shape,
                states,
            } => {
                let sg = scan_backward(
                    shape,
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d).data(),
                    states,
                    gd,
                );
                self.acc(grads, *x, |dst| add_into(dst, &sg.x));
                self.acc(grads, *delta, |dst| add_into(dst, &sg.delta));
                self.acc(grads, *a, |dst| add_into(dst, &sg.a));
                self.acc(grads, *b, |dst| add_into(dst, &sg.b));
                self.acc(grads, *c, |dst| add_into(dst, &sg.c));
                self.acc(grads, *d, |dst| add_into(dst, &sg.d));
            }
            Op::StructureLoss { logits, target, weight } => {
                let z = self.value(*logits).data();
                let gz = crate::model::loss::structure_loss_grad(z, target.data(), weight.data());
                let gv = gd[0];
                self.acc(grads, *logits, |dst| {
                    for (d, &v) in dst.iter_mut().zip(&gz) {
                        *d += gv * v;
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}
