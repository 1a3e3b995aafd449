//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each forward pass records nodes on a fresh [`Tape`]. Leaves created with
//! `requires_grad` receive gradients from [`Tape::backward`]; interior nodes
//! only propagate gradients when some ancestor requires them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeom, Moments};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
    Softplus,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Gelu => x * std_normal_cdf(x),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Softplus => sigmoid(x),
            Activation::Gelu => {
                let pdf = (-(x * x) / T::c(2.0)).exp() / T::c(core::f64::consts::TAU).sqrt();
                std_normal_cdf(x) + x * pdf
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::c(0.5) * (T::one() + (x / T::c(core::f64::consts::SQRT_2)).erf())
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Standardize { x: Var, xhat: Vec<T>, moments: Moments<T>, groups: Option<usize> },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AffineScalar { x: Var, a: T },
    ChannelGate { x: Var, g: Var },
    GlobalAvgPool { x: Var },
    AvgPool { x: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    SliceChannels { x: Var, start: usize },
    ConcatChannels { parts: Vec<Var> },
    Sigmoid { x: Var },
    Log { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Gather { x: Var, index: Vec<usize> },
    RowSum { x: Var },
    Mean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the tape's gradient-requiring leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Grouped 2-D convolution, `x: [N, Cin, H, W]`, `w: [Cout, Cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_g, k, k2) = self.value(w).dims4()?;
        if k != k2 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err(
                "conv2d",
                format!("input channels {cin}, weight {:?}, groups {groups}", self.value(w).shape()),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom { kernel: k, stride, pad, groups };
        let (ho, wo) = (geom.out_size(h), geom.out_size(wd));
        let dims = ConvDims { n, cin, h, w: wd, cout, ho, wo };
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), dims, &geom);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::from_vec(&[n, cout, ho, wo], y)?, Op::Conv2d { x, w, geom }, needs))
    }

    /// `y[n, c, ..] = x[n, c, ..] * scale[c] + shift[c]` for rank-2 or rank-4 `x`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (n, c, hw) = channel_layout(self.value(x))?;
        if self.value(scale).numel() != c || self.value(shift).numel() != c {
            return Err(shape_err("channel_affine", format!("{c} channels vs affine params")));
        }
        let xs = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut y = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for (o, &v) in y[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                    *o = v * sc[ch] + sh[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::ChannelAffine { x, scale, shift }, needs))
    }

    /// Batch standardization over `(N, H, W)` per channel. Returns the batch
    /// mean and biased variance for running-statistics updates.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = channel_layout(self.value(x))?;
        let xs = self.value(x).data();
        let m = kernels::batch_moments(xs, n, c, hw, T::c(eps));
        let mut xhat = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for (o, &v) in xhat[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                    *o = (v - m.mean[ch]) * m.inv_std[ch];
                }
            }
        }
        let (mean, var) = (m.mean.clone(), m.var.clone());
        let needs = self.needs(x);
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::from_vec(&shape, xhat.clone())?;
        let v = self.push(value, Op::Standardize { x, xhat, moments: m, groups: None }, needs);
        Ok((v, mean, var))
    }

    /// Per-sample standardization over contiguous channel groups and space.
    pub fn group_standardize(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let (n, c, hw) = channel_layout(self.value(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_standardize", format!("{c} channels into {groups} groups")));
        }
        let xs = self.value(x).data();
        let m = kernels::group_moments(xs, n, c, hw, groups, T::c(eps));
        let len = c / groups * hw;
        let mut xhat = vec![T::zero(); xs.len()];
        for (i, (o, src)) in xhat.chunks_exact_mut(len).zip(xs.chunks_exact(len)).enumerate() {
            for (d, &v) in o.iter_mut().zip(src) {
                *d = (v - m.mean[i]) * m.inv_std[i];
            }
        }
        let needs = self.needs(x);
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::from_vec(&shape, xhat.clone())?;
        Ok(self.push(value, Op::Standardize { x, xhat, moments: m, groups: Some(groups) }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = self.value(x).map(|v| kind.apply(v));
        let needs = self.needs(x);
        self.push(y, Op::Act { x, kind }, needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Mul { a, b }, needs))
    }

    /// `a * x + b` elementwise with scalar constants.
    pub fn affine_scalar(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (a, b) = (T::c(a), T::c(b));
        let y = self.value(x).map(|v| a * v + b);
        let needs = self.needs(x);
        self.push(y, Op::AffineScalar { x, a }, needs)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine_scalar(x, a, 0.0)
    }

    /// `x: [N, C, H, W]` times a per-sample channel gate `g: [N, C]`.
    pub fn channel_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(g).shape() != [n, c] {
            return Err(shape_err("channel_gate", format!("gate {:?} for {n}x{c}", self.value(g).shape())));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let gs = self.value(g).data();
        let mut y = vec![T::zero(); xs.len()];
        for (i, &gv) in gs.iter().enumerate() {
            for (o, &v) in y[i * hw..(i + 1) * hw].iter_mut().zip(&xs[i * hw..(i + 1) * hw]) {
                *o = v * gv;
            }
        }
        let needs = self.needs(x) || self.needs(g);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], y)?, Op::ChannelGate { x, g }, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::one() / T::c(hw as f64);
        let y: Vec<T> = self.value(x).data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[n, c], y)?, Op::GlobalAvgPool { x }, needs))
    }

    /// Average pooling with padding counted in the divisor.
    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let geom = ConvGeom { kernel, stride, pad, groups: 1 };
        let y = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, &geom);
        let needs = self.needs(x);
        let shape = [n, c, geom.out_size(h), geom.out_size(w)];
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::AvgPool { x, geom }, needs))
    }

    /// `x: [N, In]`, `w: [Out, In]`, optional `b: [Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, din2) = self.value(w).dims2()?;
        if din != din2 || b.is_some_and(|b| self.value(b).numel() != dout) {
            return Err(shape_err("linear", format!("input {n}x{din}, weight {dout}x{din2}")));
        }
        let mut y = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bs = self.value(b).data();
            for row in y.chunks_exact_mut(dout) {
                row.copy_from_slice(bs);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        T::gemm(n, din, dout, T::one(), xs, din as isize, 1, ws, 1, din as isize, beta, &mut y, dout as isize, 1);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::from_vec(&[n, dout], y)?, Op::Linear { x, w, b }, needs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(shape_err("slice_channels", format!("[{start}, {}) of {c}", start + len)));
        }
        let hw = h * w;
        let xs = self.value(x).data();
        let mut y = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            y.extend_from_slice(&xs[(b * c + start) * hw..(b * c + start + len) * hw]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[n, len, h, w], y)?, Op::SliceChannels { x, start }, needs))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_channels", "no inputs".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err("concat_channels", format!("mismatched part {:?}", self.value(p).shape())));
            }
            total += pc;
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                y.extend_from_slice(&v.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_vec(&[n, total, h, w], y)?, Op::ConcatChannels { parts: parts.to_vec() }, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid { x }, needs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        self.push(y, Op::Log { x }, needs)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2()?;
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_exact_mut(k) {
            softmax_row(row);
        }
        let needs = self.needs(x);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::Softmax { x }, needs))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.value(x).dims2()?;
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_exact_mut(k) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(x);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::LogSoftmax { x }, needs))
    }

    /// Picks `x[n, index[n]]` from a `[N, K]` matrix.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if index.len() != n || index.iter().any(|&i| i >= k) {
            return Err(shape_err("gather", format!("{} indices into {n}x{k}", index.len())));
        }
        let xs = self.value(x).data();
        let y = index.iter().enumerate().map(|(r, &i)| xs[r * k + i]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[n], y)?, Op::Gather { x, index: index.to_vec() }, needs))
    }

    /// Largest entry of each row excluding column `exclude[n]`.
    pub fn max_other(&mut self, x: Var, exclude: &[usize]) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        if k < 2 {
            return Err(Error::Domain(format!("max over other classes needs at least 2 classes, got {k}")));
        }
        if exclude.len() != n || exclude.iter().any(|&i| i >= k) {
            return Err(shape_err("max_other", format!("{} indices into {n}x{k}", exclude.len())));
        }
        let xs = self.value(x).data();
        let arg: Vec<usize> = exclude
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &xs[r * k..(r + 1) * k];
                (0..k).filter(|&j| j != y).fold(usize::MAX, |best, j| {
                    if best == usize::MAX || row[j] > row[best] {
                        j
                    } else {
                        best
                    }
                })
            })
            .collect();
        self.gather(x, &arg)
    }

    /// Sums each row of a `[N, K]` matrix.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2()?;
        let y = self.value(x).data().chunks_exact(k).map(|r| r.iter().copied().sum()).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(&[n], y)?, Op::RowSum { x }, needs))
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::c(v.numel() as f64);
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, needs)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let m = self.mean(x);
        self.scale(m, n as f64)
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(shape_err("backward", format!("loss must be a scalar, got {:?}", seed.shape())));
        }
        self.backward_with(loss, Tensor::full(seed.shape(), T::one()))
    }

    /// Back-propagates an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward", "seed shape mismatch".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let t = Tensor::from_vec(self.value(v).shape(), g).expect("gradient shape");
        self.accumulate(grads, v, t);
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gy = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, ho, wo) = node.value.dims4()?;
                let dims = ConvDims { n, cin, h, w: wd, cout, ho, wo };
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    dims,
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate_vec(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate_vec(grads, *w, dw);
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, hw) = channel_layout(self.value(*x))?;
                let xs = self.value(*x).data();
                let sc = self.value(*scale).data();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for (d, &gv) in dx[off..off + hw].iter_mut().zip(&gy[off..off + hw]) {
                                *d = gv * sc[ch];
                            }
                        }
                    }
                    self.accumulate_vec(grads, *x, dx);
                }
                if self.needs(*scale) || self.needs(*shift) {
                    let mut dsc = vec![T::zero(); c];
                    let mut dsh = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for (&gv, &xv) in gy[off..off + hw].iter().zip(&xs[off..off + hw]) {
                                dsc[ch] += gv * xv;
                                dsh[ch] += gv;
                            }
                        }
                    }
                    self.accumulate_vec(grads, *scale, dsc);
                    self.accumulate_vec(grads, *shift, dsh);
                }
            }
            Op::Standardize { x, xhat, moments, groups } => {
                if !self.needs(*x) {
                    return Ok(());
                }
                let (n, c, hw) = channel_layout(self.value(*x))?;
                let mut dx = vec![T::zero(); xhat.len()];
                match groups {
                    None => {
                        let mut xs: Vec<&[T]> = Vec::with_capacity(n);
                        let mut ds: Vec<&[T]> = Vec::with_capacity(n);
                        for ch in 0..c {
                            xs.clear();
                            ds.clear();
                            for b in 0..n {
                                xs.push(&xhat[(b * c + ch) * hw..][..hw]);
                                ds.push(&gy[(b * c + ch) * hw..][..hw]);
                            }
                            let mut outs: Vec<&mut [T]> =
                                dx.chunks_exact_mut(hw).skip(ch).step_by(c).collect();
                            kernels::standardize_backward_group(&xs, &ds, moments.inv_std[ch], &mut outs);
                        }
                    }
                    Some(gcount) => {
                        let len = c / gcount * hw;
                        for (i, ((o, xs), ds)) in
                            dx.chunks_exact_mut(len).zip(xhat.chunks_exact(len)).zip(gy.chunks_exact(len)).enumerate()
                        {
                            kernels::standardize_backward_group(&[xs], &[ds], moments.inv_std[i], &mut [o]);
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Act { x, kind } => {
                let xs = self.value(*x).data();
                let dx = xs.iter().zip(gy).map(|(&v, &gv)| gv * kind.derivative(v)).collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate_vec(grads, *a, gy.iter().zip(vb).map(|(&gv, &v)| gv * v).collect());
                }
                if self.needs(*b) {
                    self.accumulate_vec(grads, *b, gy.iter().zip(va).map(|(&gv, &v)| gv * v).collect());
                }
            }
            Op::AffineScalar { x, a } => {
                let a = *a;
                self.accumulate(grads, *x, g.map(|v| v * a));
            }
            Op::ChannelGate { x, g: gate } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let xs = self.value(*x).data();
                let gs = self.value(*gate).data();
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xs.len()];
                    for (i, &gv) in gs.iter().enumerate() {
                        for (d, &o) in dx[i * hw..(i + 1) * hw].iter_mut().zip(&gy[i * hw..(i + 1) * hw]) {
                            *d = o * gv;
                        }
                    }
                    self.accumulate_vec(grads, *x, dx);
                }
                if self.needs(*gate) {
                    let dg = (0..gs.len())
                        .map(|i| gy[i * hw..(i + 1) * hw].iter().zip(&xs[i * hw..(i + 1) * hw]).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate_vec(grads, *gate, dg);
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let hw = h * w;
                let inv = T::one() / T::c(hw as f64);
                let mut dx = Vec::with_capacity(gy.len() * hw);
                for &gv in gy {
                    dx.extend(core::iter::repeat(gv * inv).take(hw));
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::AvgPool { x, geom } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::avg_pool_backward(gy, n * c, h, w, geom);
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2()?;
                let (dout, _) = self.value(*w).dims2()?;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    let ws = self.value(*w).data();
                    T::gemm(n, dout, din, T::one(), gy, dout as isize, 1, ws, din as isize, 1, T::zero(), &mut dx, din as isize, 1);
                    self.accumulate_vec(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    let xs = self.value(*x).data();
                    T::gemm(dout, n, din, T::one(), gy, 1, dout as isize, xs, din as isize, 1, T::zero(), &mut dw, din as isize, 1);
                    self.accumulate_vec(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in gy.chunks_exact(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate_vec(grads, *b, db);
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    dx[(b * c + start) * hw..(b * c + start + len) * hw].copy_from_slice(&gy[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::ConcatChannels { parts } => {
                let (n, total, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            dp.extend_from_slice(&gy[(b * total + offset) * hw..(b * total + offset + pc) * hw]);
                        }
                        self.accumulate_vec(grads, p, dp);
                    }
                    offset += pc;
                }
            }
            Op::Sigmoid { x } => {
                let ys = node.value.data();
                let dx = ys.iter().zip(gy).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Log { x } => {
                let xs = self.value(*x).data();
                let dx = xs.iter().zip(gy).map(|(&v, &gv)| gv / v).collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let (_, k) = node.value.dims2()?;
                let ys = node.value.data();
                let mut dx = vec![T::zero(); ys.len()];
                for ((d, s), gr) in dx.chunks_exact_mut(k).zip(ys.chunks_exact(k)).zip(gy.chunks_exact(k)) {
                    let dot: T = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((dv, &sv), &gv) in d.iter_mut().zip(s).zip(gr) {
                        *dv = sv * (gv - dot);
                    }
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::LogSoftmax { x } => {
                let (_, k) = node.value.dims2()?;
                let ys = node.value.data();
                let mut dx = vec![T::zero(); ys.len()];
                for ((d, l), gr) in dx.chunks_exact_mut(k).zip(ys.chunks_exact(k)).zip(gy.chunks_exact(k)) {
                    let total: T = gr.iter().copied().sum();
                    for ((dv, &lv), &gv) in d.iter_mut().zip(l).zip(gr) {
                        *dv = gv - lv.exp() * total;
                    }
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let (n, k) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); n * k];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * k + i] = gy[r];
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::RowSum { x } => {
                let (n, k) = self.value(*x).dims2()?;
                let mut dx = Vec::with_capacity(n * k);
                for &gv in gy {
                    dx.extend(core::iter::repeat(gv).take(k));
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Mean { x } => {
                let numel = self.value(*x).numel();
                let gv = gy[0] / T::c(numel as f64);
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gv));
            }
        }
        Ok(())
    }
}

/// `(N, C, H*W)` view of a rank-2 or rank-4 tensor.
fn channel_layout<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape()[..] {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(shape_err("channel_layout", format!("expected rank 2 or 4, got {:?}", t.shape()))),
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
