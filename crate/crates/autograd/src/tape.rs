use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::conv;
use crate::ops::norm::{self, BatchStats};
use crate::ops::spatial;
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel batch mean and unbiased batch variance.
pub type RunningStats<T> = (Vec<T>, Vec<T>);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Select(Var, usize),
    Cat0(Vec<Var>),
    StraightThrough(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    ChannelScale(Var, Var),
    ExpandSpatial(Var),
    UpsampleNearest2(Var),
    Unpool2(Var, Arc<[u8]>),
    Blur(Var, Vec<T>),
    BlockDct(Var, bool),
    PixelLinear(Var, [[f64; 3]; 3]),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only record of a computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push_op(v, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push_op(v, Op::Sigmoid(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push_op(v, Op::Ln(a), &[a])
    }

    /// Clamp to `[lo, hi]`; the gradient passes where the input lies inside
    /// the closed interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push_op(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push_op(v, Op::Mean(a), &[a])
    }

    /// Mean squared error between equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    /// Concatenate along axis 1. All parts share axis 0 and every axis after 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(Error::invalid("concat", "parts need at least two axes"));
        }
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape("concat", &base, s));
            }
            width += s[1];
        }
        let n = base[0];
        let mut shape = base.clone();
        shape[1] = width;
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let inner = t.len() / n;
                data.extend_from_slice(&t.data()[b * inner..(b + 1) * inner]);
            }
        }
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Item `index` along axis 0, keeping the axis (`[1, ...]`).
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        let n = t.dim(0);
        if index >= n {
            return Err(Error::invalid("select", format!("index {index} out of {n}")));
        }
        let inner = t.len() / n;
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let v = Tensor::from_vec(&shape, t.data()[index * inner..(index + 1) * inner].to_vec())?;
        Ok(self.push_op(v, Op::Select(a, index), &[a]))
    }

    /// Concatenate along axis 0.
    pub fn cat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cat0", "nothing to concatenate"))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != rest[..] {
                return Err(Error::shape("cat0", &rest, &s[1..]));
            }
            n += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&rest);
        let v = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(v, Op::Cat0(parts.to_vec()), parts))
    }

    /// Forward value `value`, backward identity into `a`.
    pub fn straight_through(&mut self, a: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(a) {
            return Err(Error::shape("straight_through", self.shape(a), value.shape()));
        }
        Ok(self.push_op(value, Op::StraightThrough(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(v, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = conv::conv_transpose2x2(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(v, Op::ConvTranspose2x2 { x, w, b }, &inputs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = conv::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(v, Op::Linear { x, w, b }, &inputs))
    }

    /// Batch normalization. With [`BatchStats::Batch`] the batch mean and
    /// unbiased variance are returned so the caller can track running
    /// estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let batch_stats = matches!(stats, BatchStats::Batch);
        let out = norm::batch_norm(self.value(x), self.value(gamma), self.value(beta), stats, eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: out.xhat,
            inv_std: out.inv_std,
            batch_stats,
        };
        let v = self.push_op(out.y, op, &[x, gamma, beta]);
        let running = batch_stats.then_some((out.batch_mean, out.batch_var_unbiased));
        Ok((v, running))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = spatial::global_avg_pool(self.value(x))?;
        Ok(self.push_op(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let v = spatial::channel_scale(self.value(x), self.value(s))?;
        Ok(self.push_op(v, Op::ChannelScale(x, s), &[x, s]))
    }

    pub fn expand_spatial(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let out = spatial::expand_spatial(self.value(v), h, w)?;
        Ok(self.push_op(out, Op::ExpandSpatial(v), &[v]))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let v = spatial::upsample_nearest2(self.value(x))?;
        Ok(self.push_op(v, Op::UpsampleNearest2(x), &[x]))
    }

    pub fn unpool2(&mut self, x: Var, locations: Arc<[u8]>) -> Result<Var> {
        let v = spatial::unpool2(self.value(x), &locations)?;
        Ok(self.push_op(v, Op::Unpool2(x, locations), &[x]))
    }

    pub fn separable_blur(&mut self, x: Var, taps: Vec<T>) -> Result<Var> {
        let v = spatial::separable_blur(self.value(x), &taps)?;
        Ok(self.push_op(v, Op::Blur(x, taps), &[x]))
    }

    pub fn block_dct8(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let v = spatial::block_dct8(self.value(x), inverse)?;
        Ok(self.push_op(v, Op::BlockDct(x, inverse), &[x]))
    }

    pub fn pixel_linear(&mut self, x: Var, m: [[f64; 3]; 3]) -> Result<Var> {
        let v = spatial::pixel_linear(self.value(x), &m)?;
        Ok(self.push_op(v, Op::PixelLinear(x, m), &[x]))
    }

    /// Reverse pass from a single-element node. Returns gradients for every
    /// leaf created with [`Tape::leaf`] that the output depends on.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.shape(output);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out_shape, T::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |d, y| d * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |d, x| d * x));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|d| d * s));
            }
            Op::AddScalar(a) | Op::StraightThrough(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| two * x * d));
            }
            Op::Relu(a) => {
                let dx = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = g.zip_map(&node.value, |d, y| d * y * (T::one() - y));
                self.accumulate(grads, *a, dx);
            }
            Op::Ln(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |d, x| d / x));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let dx = g.zip_map(self.value(*a), |d, x| if x >= lo && x <= hi { d } else { T::zero() });
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a) => {
                let d = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), d));
            }
            Op::Mean(a) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                let d = g.data()[0] / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), d));
            }
            Op::Reshape(a) => {
                let dx = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, dx);
            }
            Op::Concat(parts) => {
                let n = g.dim(0);
                let row = g.len() / n;
                let mut offset = 0;
                for p in parts {
                    let inner = self.value(*p).len() / n;
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(inner * n);
                        for b in 0..n {
                            data.extend_from_slice(&g.data()[b * row + offset..b * row + offset + inner]);
                        }
                        self.accumulate(grads, *p, Tensor::from_vec(self.shape(*p), data)?);
                    }
                    offset += inner;
                }
            }
            Op::Select(a, index) => {
                if self.wants(*a) {
                    let mut dx = Tensor::zeros(self.shape(*a));
                    let inner = g.len();
                    dx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                    self.accumulate(grads, *a, dx);
                }
            }
            Op::Cat0(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        let part = Tensor::from_vec(self.shape(*p), g.data()[offset..offset + len].to_vec())?;
                        self.accumulate(grads, *p, part);
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, need)?;
                self.scatter_conv(grads, cg, *x, *w, *b);
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = conv::conv_transpose2x2_backward(self.value(*x), self.value(*w), g, need)?;
                self.scatter_conv(grads, cg, *x, *w, *b);
            }
            Op::Linear { x, w, b } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = conv::linear_backward(self.value(*x), self.value(*w), g, need);
                self.scatter_conv(grads, cg, *x, *w, *b);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) =
                    norm::batch_norm_backward(g, xhat, inv_std, self.value(*gamma), *batch_stats);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let dx = spatial::global_avg_pool_backward(g, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelScale(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let hw: usize = xv.shape()[2..].iter().product();
                if self.wants(*x) {
                    let dx = Tensor::from_fn(xv.shape(), |i| g.data()[i] * sv.data()[i / hw]);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let ds = Tensor::from_fn(sv.shape(), |p| {
                        let r = p * hw..(p + 1) * hw;
                        g.data()[r.clone()].iter().zip(&xv.data()[r]).map(|(&d, &v)| d * v).sum()
                    });
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::ExpandSpatial(v) => {
                let vs = self.shape(*v);
                let hw = g.len() / vs.iter().product::<usize>();
                let dv = Tensor::from_fn(vs, |p| g.data()[p * hw..(p + 1) * hw].iter().copied().sum());
                self.accumulate(grads, *v, dv);
            }
            Op::UpsampleNearest2(x) => {
                self.accumulate(grads, *x, spatial::upsample_nearest2_backward(g));
            }
            Op::Unpool2(x, locs) => {
                self.accumulate(grads, *x, spatial::unpool2_backward(g, locs));
            }
            Op::Blur(x, taps) => {
                self.accumulate(grads, *x, spatial::separable_blur_backward(g, taps));
            }
            Op::BlockDct(x, inverse) => {
                self.accumulate(grads, *x, spatial::block_dct8(g, !*inverse)?);
            }
            Op::PixelLinear(x, m) => {
                self.accumulate(grads, *x, spatial::pixel_linear(g, &spatial::transpose3(m))?);
            }
        }
        Ok(())
    }

    fn scatter_conv(&self, grads: &mut [Option<Tensor<T>>], cg: conv::ConvGrads<T>, x: Var, w: Var, b: Option<Var>) {
        if let Some(dx) = cg.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = cg.dw {
            self.accumulate(grads, w, dw);
        }
        if let (Some(b), Some(db)) = (b, cg.db) {
            self.accumulate(grads, b, db);
        }
    }
}
