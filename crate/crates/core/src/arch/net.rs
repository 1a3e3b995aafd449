//! Executable networks built from a [`NetworkSpec`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{ActivationOrder, BlockSpec, NetworkSpec, NormKind, SeVariant, Topology};
use crate::error::{Error, Result};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Batch-norm running-average momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    ConvWeight,
    NormAffine,
    Bias,
    SeWeight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tag: ParamTag,
    pub value: Tensor<T>,
}

/// Non-trainable state such as running normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormLayer {
    scale: usize,
    shift: usize,
    groups: Option<usize>,
    /// `(running_mean, running_var)` buffer indices for batch norm.
    running: Option<(usize, usize)>,
}

/// Parameter indices of a squeeze-and-excitation gate.
#[derive(Clone, Copy, Debug)]
pub struct SeLayer {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
enum Spatial {
    Plain(ConvLayer),
    /// Split into `scales` groups; the first passes through.
    Hierarchical { convs: Vec<ConvLayer>, split: usize, stride: usize },
}

#[derive(Clone, Debug)]
struct BlockPlan {
    spec: BlockSpec,
    n1: NormLayer,
    conv1: ConvLayer,
    n2: NormLayer,
    spatial: Spatial,
    /// Third norm and 1x1 conv of bottleneck topologies.
    tail: Option<(NormLayer, ConvLayer)>,
    se: Option<SeLayer>,
    proj: Option<ConvLayer>,
}

/// Batch statistics gathered during a train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStat<T> {
    mean_buf: usize,
    var_buf: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Forward<T> {
    pub logits: Var,
    pub stats: Vec<BatchStat<T>>,
    /// Stem output followed by each block's output.
    pub features: Vec<Var>,
}

/// A network ready to run: parameters, buffers and an execution plan.
#[derive(Clone, Debug)]
pub struct BuiltNetwork<T> {
    spec: NetworkSpec,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    stem: ConvLayer,
    stem_norm: Option<NormLayer>,
    blocks: Vec<BlockPlan>,
    head_norm: Option<NormLayer>,
    fc: (usize, usize),
}

struct Builder<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn param(&mut self, name: String, tag: ParamTag, value: Tensor<T>) -> usize {
        self.params.push(Param { name, tag, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> ConvLayer {
        // fan-out scaled normal
        let std = (2.0 / (k * k * cout) as f64).sqrt();
        let w = self.normal(&[cout, cin / groups, k, k], std);
        let w = self.param(format!("{name}.weight"), ParamTag::ConvWeight, w);
        ConvLayer { w, stride, pad: k / 2, groups }
    }

    fn norm(&mut self, name: &str, kind: NormKind, c: usize) -> NormLayer {
        let scale = self.param(format!("{name}.weight"), ParamTag::NormAffine, Tensor::full(&[c], T::one()));
        let shift = self.param(format!("{name}.bias"), ParamTag::NormAffine, Tensor::zeros(&[c]));
        let running = (kind == NormKind::Batch).then(|| {
            self.buffers.push(Buffer { name: format!("{name}.running_mean"), value: Tensor::zeros(&[c]) });
            self.buffers.push(Buffer { name: format!("{name}.running_var"), value: Tensor::full(&[c], T::one()) });
            (self.buffers.len() - 2, self.buffers.len() - 1)
        });
        NormLayer { scale, shift, groups: kind.groups(c), running }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, tag: ParamTag) -> (usize, usize) {
        let w = self.normal(&[dout, din], (1.0 / din as f64).sqrt());
        let w = self.param(format!("{name}.weight"), tag, w);
        let b = self.param(format!("{name}.bias"), ParamTag::Bias, Tensor::zeros(&[dout]));
        (w, b)
    }

    fn se(&mut self, name: &str, c: usize, hidden: usize) -> SeLayer {
        let (w1, b1) = self.linear(&format!("{name}.fc1"), c, hidden, ParamTag::SeWeight);
        let (w2, b2) = self.linear(&format!("{name}.fc2"), hidden, c, ParamTag::SeWeight);
        SeLayer { w1, b1, w2, b2 }
    }

    fn spatial(&mut self, name: &str, b: &BlockSpec, stride: usize) -> Spatial {
        let width = b.widths().spatial;
        let k = b.kernel_size;
        if b.scales <= 1 {
            return Spatial::Plain(self.conv(name, width, width, k, stride, b.cardinality));
        }
        let split = width / b.scales;
        let convs = (1..b.scales)
            .map(|s| self.conv(&format!("{name}.split{s}"), split, split, k, stride, b.cardinality))
            .collect();
        Spatial::Hierarchical { convs, split, stride }
    }

    fn block(&mut self, name: &str, b: &BlockSpec) -> BlockPlan {
        let w = b.widths();
        let pre = b.activation_order == ActivationOrder::Pre;
        let k = b.kernel_size;
        let (conv1, n1, n2, spatial, tail);
        match b.topology {
            Topology::Basic => {
                n1 = self.norm(&format!("{name}.n1"), b.norm, if pre { b.in_channels } else { w.out });
                conv1 = self.conv(&format!("{name}.conv1"), b.in_channels, w.out, k, b.stride, 1);
                n2 = self.norm(&format!("{name}.n2"), b.norm, w.out);
                spatial = self.spatial(&format!("{name}.conv2"), b, 1);
                tail = None;
            }
            Topology::Bottleneck | Topology::InvertedBottleneck => {
                n1 = self.norm(&format!("{name}.n1"), b.norm, if pre { b.in_channels } else { w.reduce });
                conv1 = self.conv(&format!("{name}.conv1"), b.in_channels, w.reduce, 1, 1, 1);
                n2 = self.norm(&format!("{name}.n2"), b.norm, if pre { w.reduce } else { w.spatial });
                spatial = self.spatial(&format!("{name}.conv2"), b, b.stride);
                let n3 = self.norm(&format!("{name}.n3"), b.norm, if pre { w.spatial } else { w.out });
                let conv3 = self.conv(&format!("{name}.conv3"), w.spatial, w.out, 1, 1, 1);
                tail = Some((n3, conv3));
            }
        }
        let se = b.se_channels().map(|c| self.se(&format!("{name}.se"), c, b.se_hidden(c)));
        let proj = b.has_projection().then(|| self.conv(&format!("{name}.proj"), b.in_channels, w.out, 1, b.stride, 1));
        BlockPlan { spec: b.clone(), n1, conv1, n2, spatial, tail, se, proj }
    }
}

/// Validates `spec` and initializes a network from `rng_seed`.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, rng_seed: u64) -> Result<BuiltNetwork<T>> {
    spec.validate()?;
    let mut b = Builder { params: Vec::new(), buffers: Vec::new(), rng: ChaCha8Rng::seed_from_u64(rng_seed) };
    let pre = spec.activation_order() == ActivationOrder::Pre;
    let stem = b.conv("stem.conv", 3, spec.stem_channels, 3, 1, 1);
    let stem_norm = (!pre).then(|| b.norm("stem.norm", spec.outer_norm(), spec.stem_channels));
    let blocks = spec
        .blocks()
        .iter()
        .map(|p| b.block(&format!("s{}.b{}", p.stage + 1, p.index + 1), &p.spec))
        .collect();
    let c = spec.final_channels();
    let head_norm = pre.then(|| b.norm("head.norm", spec.outer_norm(), c));
    let fc = b.linear("head.fc", c, spec.num_classes, ParamTag::ConvWeight);
    Ok(BuiltNetwork { spec: spec.clone(), params: b.params, buffers: b.buffers, stem, stem_norm, blocks, head_norm, fc })
}

/// Applies an SE gate to `x`. Every gated variant returns `g * x`, except
/// `Residual`, which returns `x + g * x`; `None` returns `x`.
pub fn apply_se<T: Scalar>(
    tape: &mut Tape<T>,
    variant: SeVariant,
    x: Var,
    params: [Var; 4],
    act: Activation,
) -> Result<Var> {
    if variant == SeVariant::None {
        return Ok(x);
    }
    let [w1, b1, w2, b2] = params;
    let c = tape.value(x).dims4()?.1;
    if tape.value(w1).dims2()?.1 != c {
        return Err(Error::Shape { op: "apply_se", detail: format!("features have {c} channels, gate expects {:?}", tape.value(w1).shape()) });
    }
    let s = tape.global_avg_pool(x)?;
    let z = tape.linear(s, w1, Some(b1))?;
    let z = tape.activation(z, act);
    let g = tape.linear(z, w2, Some(b2))?;
    let g = tape.sigmoid(g);
    let gx = tape.channel_gate(x, g)?;
    if variant == SeVariant::Residual {
        tape.add(x, gx)
    } else {
        Ok(gx)
    }
}

impl<T: Scalar> BuiltNetwork<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// SE parameter indices of block `i`, if it has a gate.
    pub fn se_layer(&self, block: usize) -> Option<SeLayer> {
        self.blocks.get(block).and_then(|b| b.se)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Records a forward pass of `x: [N, 3, R, R]` on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, params: &[Var], x: Var, mode: Mode) -> Result<Forward<T>> {
        if params.len() != self.params.len() {
            return Err(Error::Shape { op: "forward", detail: format!("{} bound params for {}", params.len(), self.params.len()) });
        }
        let (_, c, h, w) = tape.value(x).dims4()?;
        let r = self.spec.input_resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("expected input [N, 3, {r}, {r}], got {:?}", tape.value(x).shape()),
            });
        }
        let mut run = Run { net: self, tape, params, mode, stats: Vec::new() };
        let act = self.spec.outer_activation();
        let mut h = run.conv(x, &self.stem)?;
        if let Some(n) = &self.stem_norm {
            h = run.norm(h, n)?;
            h = run.tape.activation(h, act);
        }
        let mut features = Vec::with_capacity(self.blocks.len() + 1);
        features.push(h);
        for b in &self.blocks {
            h = run.block(h, b)?;
            features.push(h);
        }
        if let Some(n) = &self.head_norm {
            h = run.norm(h, n)?;
            h = run.tape.activation(h, act);
        }
        let pooled = run.tape.global_avg_pool(h)?;
        let logits = run.tape.linear(pooled, params[self.fc.0], Some(params[self.fc.1]))?;
        let stats = run.stats;
        Ok(Forward { logits, stats, features })
    }

    /// Convenience forward without gradients. Train mode also folds the
    /// batch statistics into the running averages.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, &params, xv, mode)?;
        let logits = tape.value(out.logits).clone();
        self.apply_batch_stats(&out.stats);
        Ok(logits)
    }

    /// Eval-mode logits; never mutates the network.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_tape(&mut tape, &params, xv, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Folds train-mode batch statistics into the running averages, using the
    /// unbiased batch variance.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStat<T>]) {
        let m = T::c(BN_MOMENTUM);
        let one_m = T::one() - m;
        for s in stats {
            let unbias = if s.count > 1 { T::c(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            for (r, &v) in self.buffers[s.mean_buf].value.data_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + one_m * v;
            }
            for (r, &v) in self.buffers[s.var_buf].value.data_mut().iter_mut().zip(&s.var) {
                *r = m * *r + one_m * v * unbias;
            }
        }
    }
}

struct Run<'a, 'n, T: Scalar> {
    net: &'n BuiltNetwork<T>,
    tape: &'a mut Tape<T>,
    params: &'a [Var],
    mode: Mode,
    stats: Vec<BatchStat<T>>,
}

impl<T: Scalar> Run<'_, '_, T> {
    fn conv(&mut self, x: Var, c: &ConvLayer) -> Result<Var> {
        self.tape.conv2d(x, self.params[c.w], c.stride, c.pad, c.groups)
    }

    fn norm(&mut self, x: Var, n: &NormLayer) -> Result<Var> {
        let xhat = match (n.groups, n.running, self.mode) {
            (Some(g), _, _) => self.tape.group_standardize(x, g, NORM_EPS)?,
            (None, Some((mb, vb)), Mode::Train) => {
                let (y, mean, var) = self.tape.batch_standardize(x, NORM_EPS)?;
                let v = self.tape.value(x);
                let count = v.numel() / v.shape()[1];
                self.stats.push(BatchStat { mean_buf: mb, var_buf: vb, mean, var, count });
                y
            }
            (None, Some((mb, vb)), Mode::Eval) => {
                let mean = self.net.buffers[mb].value.data();
                let var = self.net.buffers[vb].value.data();
                let eps = T::c(NORM_EPS);
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let shift: Vec<T> = mean.iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
                let c = inv.len();
                let sc = self.tape.constant(Tensor::from_vec(&[c], inv)?);
                let sh = self.tape.constant(Tensor::from_vec(&[c], shift)?);
                self.tape.channel_affine(x, sc, sh)?
            }
            (None, None, _) => unreachable!("batch norm always has running buffers"),
        };
        self.tape.channel_affine(xhat, self.params[n.scale], self.params[n.shift])
    }

    fn se(&mut self, x: Var, b: &BlockPlan) -> Result<Var> {
        let se = b.se.expect("se layer present");
        let p = [self.params[se.w1], self.params[se.b1], self.params[se.w2], self.params[se.b2]];
        apply_se(self.tape, b.spec.se_variant, x, p, b.spec.activation)
    }

    fn maybe_se(&mut self, x: Var, b: &BlockPlan, at: &[SeVariant]) -> Result<Var> {
        if at.contains(&b.spec.se_variant) {
            self.se(x, b)
        } else {
            Ok(x)
        }
    }

    fn spatial(&mut self, x: Var, s: &Spatial) -> Result<Var> {
        match s {
            Spatial::Plain(c) => self.conv(x, c),
            Spatial::Hierarchical { convs, split, stride } => {
                let first = self.tape.slice_channels(x, 0, *split)?;
                let mut outs = Vec::with_capacity(convs.len() + 1);
                outs.push(if *stride == 1 { first } else { self.tape.avg_pool(first, 3, *stride, 1)? });
                let mut prev: Option<Var> = None;
                for (i, c) in convs.iter().enumerate() {
                    let xs = self.tape.slice_channels(x, (i + 1) * split, *split)?;
                    let inp = match prev {
                        Some(p) if *stride == 1 => self.tape.add(xs, p)?,
                        _ => xs,
                    };
                    let y = self.conv(inp, c)?;
                    outs.push(y);
                    prev = Some(y);
                }
                self.tape.concat_channels(&outs)
            }
        }
    }

    fn block(&mut self, x: Var, b: &BlockPlan) -> Result<Var> {
        let act = b.spec.activation;
        match b.spec.activation_order {
            ActivationOrder::Pre => {
                let o = self.norm(x, &b.n1)?;
                let o = self.tape.activation(o, act);
                let mut sc = match &b.proj {
                    Some(p) => self.conv(o, p)?,
                    None => x,
                };
                let inp = self.maybe_se(o, b, &[SeVariant::Pre])?;
                let mut h = self.conv(inp, &b.conv1)?;
                h = self.norm(h, &b.n2)?;
                h = self.tape.activation(h, act);
                h = self.spatial(h, &b.spatial)?;
                h = self.maybe_se(h, b, &[SeVariant::Conv3x3])?;
                if let Some((n3, conv3)) = &b.tail {
                    h = self.norm(h, n3)?;
                    h = self.tape.activation(h, act);
                    h = self.conv(h, conv3)?;
                }
                h = self.maybe_se(h, b, &[SeVariant::Standard, SeVariant::Residual])?;
                sc = self.maybe_se(sc, b, &[SeVariant::Identity])?;
                self.tape.add(sc, h)
            }
            ActivationOrder::Post => {
                let mut sc = match &b.proj {
                    Some(p) => self.conv(x, p)?,
                    None => x,
                };
                let inp = self.maybe_se(x, b, &[SeVariant::Pre])?;
                let mut h = self.conv(inp, &b.conv1)?;
                h = self.norm(h, &b.n1)?;
                h = self.tape.activation(h, act);
                h = self.spatial(h, &b.spatial)?;
                h = self.norm(h, &b.n2)?;
                if let Some((n3, conv3)) = &b.tail {
                    h = self.tape.activation(h, act);
                    h = self.maybe_se(h, b, &[SeVariant::Conv3x3])?;
                    h = self.conv(h, conv3)?;
                    h = self.norm(h, n3)?;
                } else {
                    h = self.maybe_se(h, b, &[SeVariant::Conv3x3])?;
                }
                h = self.maybe_se(h, b, &[SeVariant::Standard, SeVariant::Residual])?;
                sc = self.maybe_se(sc, b, &[SeVariant::Identity])?;
                let s = self.tape.add(sc, h)?;
                Ok(self.tape.activation(s, act))
            }
        }
    }
}
