//! Adversarial training: recipes, optimizer, weight averaging and the loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::arch::{build_network, BuiltNetwork, Mode, NetworkSpec, ParamTag};
use crate::attacks::{AttackConfig, StepSchedule, DEFAULT_ALPHA, DEFAULT_EPSILON};
use crate::data::{Batch, DatasetHandle, SplitKind};
use crate::error::{Error, Result};
use crate::evaluation::{count_correct, evaluate, RobustRunRecord};
use crate::losses::{mart_loss, sat_loss, smoothed_targets, trades_loss, LossKind, LossTerms};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    Advanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub regime: Regime,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_schedule: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub exclude_norm_affine_from_decay: bool,
    #[serde(default = "default_gamma")]
    pub trades_gamma: f64,
    #[serde(default = "default_lambda")]
    pub mart_lambda: f64,
    pub inner: AttackConfig,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    /// Random crop and flip on training batches.
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Beta parameter of CutMix; `None` disables it.
    #[serde(default)]
    pub cutmix_alpha: Option<f64>,
}

fn default_decay_factor() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    6.0
}
fn default_lambda() -> f64 {
    5.0
}
fn default_true() -> bool {
    true
}

pub const DEFAULT_WEIGHT_DECAYS: [f64; 3] = [1e-4, 2e-4, 5e-4];

impl TrainRecipe {
    /// 100 epochs, batch 128, lr 0.1 decayed at 75 and 90, PGD-10 inner
    /// maximization (PGD-7 for inputs of 64 pixels or more).
    pub fn baseline(loss: LossKind, resolution: usize) -> Self {
        let steps = if resolution >= 64 { 7 } else { 10 };
        Self {
            regime: Regime::Baseline,
            loss,
            epochs: 100,
            batch_size: 128,
            lr_initial: 0.1,
            lr_schedule: vec![75, 90],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 2e-4,
            exclude_norm_affine_from_decay: false,
            trades_gamma: 6.0,
            mart_lambda: 5.0,
            inner: AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, steps, true),
            ema_decay: None,
            augment: true,
            label_smoothing: 0.0,
            cutmix_alpha: None,
        }
    }

    /// 400 epochs of TRADES, batch 512, Nesterov, lr 0.2 with one decay at
    /// epoch 267, weight averaging with decay 0.999.
    pub fn advanced(resolution: usize) -> Self {
        let mut inner = TrainRecipe::baseline(LossKind::Trades, resolution).inner;
        inner.step_schedule = Some(StepSchedule::advanced());
        let epochs = 400;
        Self {
            regime: Regime::Advanced,
            epochs,
            batch_size: 512,
            lr_initial: 0.2,
            lr_schedule: vec![(2 * epochs).div_ceil(3)],
            nesterov: true,
            inner,
            ema_decay: Some(0.999),
            ..TrainRecipe::baseline(LossKind::Trades, resolution)
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.lr_schedule.iter().filter(|&&e| e <= epoch).count();
        self.lr_initial * self.lr_decay_factor.powi(k as i32)
    }

    /// Short identifier such as `baseline-trades-wd2e-4`.
    pub fn id(&self) -> String {
        let regime = match self.regime {
            Regime::Baseline => "baseline",
            Regime::Advanced => "advanced",
        };
        let loss = match self.loss {
            LossKind::Sat => "sat",
            LossKind::Trades => "trades",
            LossKind::Mart => "mart",
        };
        let mut id = format!("{regime}-{loss}-e{}-wd{:e}", self.epochs, self.weight_decay);
        if self.exclude_norm_affine_from_decay {
            id.push_str("-xnorm");
        }
        if self.inner.epsilon == 0.0 {
            id.push_str("-erm");
        }
        id
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push(String::from("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            errs.push(String::from("batch_size must be >= 1"));
        }
        if !(self.lr_initial > 0.0) {
            errs.push(format!("lr_initial {} must be > 0", self.lr_initial));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.nesterov && self.momentum == 0.0 {
            errs.push(String::from("nesterov needs momentum > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.trades_gamma >= 0.0) {
            errs.push(format!("trades_gamma {} must be >= 0", self.trades_gamma));
        }
        if !(self.mart_lambda >= 0.0) {
            errs.push(format!("mart_lambda {} must be >= 0", self.mart_lambda));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                errs.push(format!("ema_decay {d} must be in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push(format!("label_smoothing {} must be in [0, 1)", self.label_smoothing));
        }
        if let Some(a) = self.cutmix_alpha {
            if !(a > 0.0) {
                errs.push(format!("cutmix_alpha {a} must be > 0"));
            }
            if self.loss == LossKind::Mart {
                errs.push(String::from("cutmix is not supported with the MART loss"));
            }
        }
        if self.label_smoothing > 0.0 && self.loss == LossKind::Mart {
            errs.push(String::from("label smoothing is not supported with the MART loss"));
        }
        if let Err(Error::InvalidSpec(e)) = self.inner.validate() {
            errs.extend(e.into_iter().map(|m| format!("inner: {m}")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }
}

/// SGD with momentum: `g += wd * w` (unless masked), `buf = m * buf + g`,
/// step along `buf` or, with Nesterov, `g + m * buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Whether each parameter receives weight decay.
    pub decay_mask: Vec<bool>,
    pub buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(net: &BuiltNetwork<T>, recipe: &TrainRecipe) -> Self {
        let decay_mask = net
            .params()
            .iter()
            .map(|p| !(recipe.exclude_norm_affine_from_decay && p.tag == ParamTag::NormAffine))
            .collect();
        Self {
            momentum: recipe.momentum,
            nesterov: recipe.nesterov,
            weight_decay: recipe.weight_decay,
            decay_mask,
            buffers: vec![None; net.params().len()],
        }
    }

    /// Loss gradient plus the weight-decay term for parameter `i`.
    pub fn regularized_gradient(&self, i: usize, w: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let mut d = g.clone();
        if self.decay_mask[i] && self.weight_decay != 0.0 {
            let wd = T::c(self.weight_decay);
            for (dv, &wv) in d.data_mut().iter_mut().zip(w.data()) {
                *dv += wd * wv;
            }
        }
        d
    }

    /// Updates `net` in place. Missing gradients count as zero.
    pub fn step(&mut self, net: &mut BuiltNetwork<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        let m = T::c(self.momentum);
        let lr = T::c(lr);
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let g = match grads.get(i).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape()),
            };
            let mut d = self.regularized_gradient(i, &p.value, &g);
            if self.momentum != 0.0 {
                let buf = match self.buffers[i].take() {
                    None => d.clone(),
                    Some(mut b) => {
                        for (bv, &dv) in b.data_mut().iter_mut().zip(d.data()) {
                            *bv = m * *bv + dv;
                        }
                        b
                    }
                };
                if self.nesterov {
                    for (dv, &bv) in d.data_mut().iter_mut().zip(buf.data()) {
                        *dv += m * bv;
                    }
                } else {
                    d = buf.clone();
                }
                self.buffers[i] = Some(buf);
            }
            for (w, &dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                *w -= lr * dv;
            }
        }
    }
}

/// Exponential moving average of parameters and buffers:
/// `shadow = decay * shadow + (1 - decay) * w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema<T> {
    pub decay: f64,
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Ema<T> {
    pub fn new(net: &BuiltNetwork<T>, decay: f64) -> Self {
        Self {
            decay,
            params: net.params().iter().map(|p| p.value.clone()).collect(),
            buffers: net.buffers().iter().map(|b| b.value.clone()).collect(),
        }
    }

    pub fn blend(decay: f64, shadow: &mut Tensor<T>, w: &Tensor<T>) {
        let d = T::c(decay);
        let e = T::one() - d;
        for (s, &v) in shadow.data_mut().iter_mut().zip(w.data()) {
            *s = d * *s + e * v;
        }
    }

    pub fn update(&mut self, net: &BuiltNetwork<T>) {
        for (s, p) in self.params.iter_mut().zip(net.params()) {
            Self::blend(self.decay, s, &p.value);
        }
        for (s, b) in self.buffers.iter_mut().zip(net.buffers()) {
            Self::blend(self.decay, s, &b.value);
        }
    }

    /// Copy of `net` carrying the shadow values.
    pub fn network(&self, net: &BuiltNetwork<T>) -> BuiltNetwork<T> {
        let mut out = net.clone();
        for (p, s) in out.params_mut().iter_mut().zip(&self.params) {
            p.value = s.clone();
        }
        for (b, s) in out.buffers_mut().iter_mut().zip(&self.buffers) {
            b.value = s.clone();
        }
        out
    }
}

/// Training statistics of one epoch. Accuracies are percentages over the
/// training batches as seen by the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    /// L2 norm over all norm-affine parameters after the epoch.
    pub norm_affine_l2: f64,
    /// L2 norm over every other parameter after the epoch.
    pub other_l2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Complete resumable training state. The epoch RNG is derived from
/// `(seed, epoch)`, so the pair is the full RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: NetworkSpec,
    pub recipe: TrainRecipe,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<NamedTensor<T>>,
    pub buffers: Vec<NamedTensor<T>>,
    pub momentum: Vec<Option<Tensor<T>>>,
    pub ema_params: Option<Vec<Tensor<T>>>,
    pub ema_buffers: Option<Vec<Tensor<T>>>,
    pub metrics: Vec<EpochMetrics>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Rebuilds the network, matching stored values by name and shape.
    pub fn network(&self) -> Result<BuiltNetwork<T>> {
        let mut net = build_network::<T>(&self.spec, 0)?;
        load_named(net.params_mut().iter_mut().map(|p| (&p.name, &mut p.value)), &self.params)?;
        load_named(net.buffers_mut().iter_mut().map(|b| (&b.name, &mut b.value)), &self.buffers)?;
        Ok(net)
    }

    /// Network carrying the weight-averaged values, if any.
    pub fn ema_network(&self) -> Result<Option<BuiltNetwork<T>>> {
        match (&self.ema_params, &self.ema_buffers, self.recipe.ema_decay) {
            (Some(p), Some(b), Some(decay)) => {
                let net = self.network()?;
                Ok(Some(Ema { decay, params: p.clone(), buffers: b.clone() }.network(&net)))
            }
            _ => Ok(None),
        }
    }
}

fn load_named<'a, T: Scalar + 'a>(
    slots: impl ExactSizeIterator<Item = (&'a String, &'a mut Tensor<T>)>,
    stored: &[NamedTensor<T>],
) -> Result<()> {
    if slots.len() != stored.len() {
        return Err(Error::Shape { op: "checkpoint", detail: format!("{} stored tensors for {} slots", stored.len(), slots.len()) });
    }
    for ((name, slot), s) in slots.zip(stored) {
        if *name != s.name || slot.shape() != s.value.shape() {
            return Err(Error::Shape {
                op: "checkpoint",
                detail: format!("slot {name} {:?} does not match stored {} {:?}", slot.shape(), s.name, s.value.shape()),
            });
        }
        *slot = s.value.clone();
    }
    Ok(())
}

/// RNG for one epoch: data order, augmentation and attack starts.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Mixes a box of a permuted batch into each image and returns soft targets
/// weighted by the kept area.
pub fn cutmix<T: Scalar, R: Rng + ?Sized>(batch: &mut Batch<T>, classes: usize, alpha: f64, smoothing: f64, rng: &mut R) -> Result<Tensor<T>> {
    let (n, c, h, w) = batch.x.dims4()?;
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::Domain(format!("cutmix alpha {alpha}")))?;
    let lam: f64 = beta.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let cut = libm::sqrt(1.0 - lam);
    let (bh, bw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
    let (cy, cx) = (rng.gen_range(0..h), rng.gen_range(0..w));
    let (y0, y1) = (cy.saturating_sub(bh / 2), (cy + bh / 2).min(h));
    let (x0, x1) = (cx.saturating_sub(bw / 2), (cx + bw / 2).min(w));
    let src = batch.x.clone();
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let dst = (i * c + ch) * plane;
            let from = (perm[i] * c + ch) * plane;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    batch.x.data_mut()[dst + yy * w + xx] = src.data()[from + yy * w + xx];
                }
            }
        }
    }
    let kept = 1.0 - ((y1 - y0) * (x1 - x0)) as f64 / plane as f64;
    let a: Tensor<T> = smoothed_targets(&batch.y, classes, smoothing);
    let b: Tensor<T> = smoothed_targets(&perm.iter().map(|&p| batch.y[p]).collect::<Vec<_>>(), classes, smoothing);
    let mut t = a.map(|v| v * T::c(kept));
    for (tv, &bv) in t.data_mut().iter_mut().zip(b.data()) {
        *tv += bv * T::c(1.0 - kept);
    }
    Ok(t)
}

/// Owns one training run.
pub struct Trainer<T> {
    net: BuiltNetwork<T>,
    recipe: TrainRecipe,
    sgd: Sgd<T>,
    ema: Option<Ema<T>>,
    seed: u64,
    epoch: usize,
    metrics: Vec<EpochMetrics>,
}

pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    pub network: BuiltNetwork<T>,
    pub ema_network: Option<BuiltNetwork<T>>,
    pub metrics: Vec<EpochMetrics>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: BuiltNetwork<T>, recipe: TrainRecipe, seed: u64) -> Result<Self> {
        recipe.validate()?;
        let sgd = Sgd::new(&net, &recipe);
        let ema = recipe.ema_decay.map(|d| Ema::new(&net, d));
        Ok(Self { net, recipe, sgd, ema, seed, epoch: 0, metrics: Vec::new() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let net = ckpt.network()?;
        let mut t = Self::new(net, ckpt.recipe.clone(), ckpt.seed)?;
        if ckpt.momentum.len() != t.sgd.buffers.len() {
            return Err(Error::Shape { op: "checkpoint", detail: String::from("optimizer state length") });
        }
        t.sgd.buffers = ckpt.momentum.clone();
        if let (Some(e), Some(p), Some(b)) = (t.ema.as_mut(), &ckpt.ema_params, &ckpt.ema_buffers) {
            e.params = p.clone();
            e.buffers = b.clone();
        }
        t.epoch = ckpt.epoch;
        t.metrics = ckpt.metrics.clone();
        Ok(t)
    }

    pub fn network(&self) -> &BuiltNetwork<T> {
        &self.net
    }

    pub fn ema_network(&self) -> Option<BuiltNetwork<T>> {
        self.ema.as_ref().map(|e| e.network(&self.net))
    }

    pub fn recipe(&self) -> &TrainRecipe {
        &self.recipe
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.recipe.epochs
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let named_p = self.net.params().iter().map(|p| NamedTensor { name: p.name.clone(), value: p.value.clone() }).collect();
        let named_b = self.net.buffers().iter().map(|b| NamedTensor { name: b.name.clone(), value: b.value.clone() }).collect();
        Checkpoint {
            spec: self.net.spec().clone(),
            recipe: self.recipe.clone(),
            seed: self.seed,
            epoch: self.epoch,
            params: named_p,
            buffers: named_b,
            momentum: self.sgd.buffers.clone(),
            ema_params: self.ema.as_ref().map(|e| e.params.clone()),
            ema_buffers: self.ema.as_ref().map(|e| e.buffers.clone()),
            metrics: self.metrics.clone(),
        }
    }

    fn check_dataset(&self, data: &DatasetHandle) -> Result<()> {
        let spec = self.net.spec();
        if data.resolution != spec.input_resolution || data.train.resolution != spec.input_resolution {
            return Err(Error::Shape {
                op: "train",
                detail: format!("dataset resolution {} but network expects {}", data.resolution, spec.input_resolution),
            });
        }
        if data.classes != spec.num_classes {
            return Err(Error::Shape { op: "train", detail: format!("dataset has {} classes, network {}", data.classes, spec.num_classes) });
        }
        if data.train.is_empty() {
            return Err(Error::Domain(String::from("empty training split")));
        }
        Ok(())
    }

    /// Runs one epoch and records its metrics.
    pub fn run_epoch(&mut self, data: &DatasetHandle) -> Result<EpochMetrics> {
        self.check_dataset(data)?;
        let epoch = self.epoch;
        let lr = self.recipe.lr_at(epoch);
        let mut rng = epoch_rng(self.seed, epoch);
        let batches = data.train.epoch_batches::<T>(self.recipe.batch_size, &mut rng, self.recipe.augment);
        let (mut loss_sum, mut seen, mut clean_hits, mut adv_hits) = (0.0f64, 0usize, 0usize, 0usize);
        for (step, mut batch) in batches.into_iter().enumerate() {
            let targets = match self.recipe.cutmix_alpha {
                Some(a) => Some(cutmix(&mut batch, data.classes, a, self.recipe.label_smoothing, &mut rng)?),
                None if self.recipe.label_smoothing > 0.0 => Some(smoothed_targets(&batch.y, data.classes, self.recipe.label_smoothing)),
                None => None,
            };
            let (loss, clean, adv) = self.step(&batch, targets.as_ref(), lr, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let n = batch.y.len();
            loss_sum += loss * n as f64;
            seen += n;
            clean_hits += clean;
            adv_hits += adv;
        }
        let (mut na, mut other) = (0.0f64, 0.0f64);
        for p in self.net.params() {
            let s: f64 = p.value.data().iter().map(|v| v.f64() * v.f64()).sum();
            if p.tag == ParamTag::NormAffine {
                na += s;
            } else {
                other += s;
            }
        }
        let pct = |c: usize| 100.0 * c as f64 / seen as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / seen as f64,
            clean_acc: pct(clean_hits),
            robust_acc: pct(adv_hits),
            norm_affine_l2: libm::sqrt(na),
            other_l2: libm::sqrt(other),
        };
        self.epoch += 1;
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// One optimizer update; returns `(loss, clean hits, adversarial hits)`.
    fn step(&mut self, batch: &Batch<T>, targets: Option<&Tensor<T>>, lr: f64, rng: &mut ChaCha8Rng) -> Result<(f64, usize, usize)> {
        let mut tape = Tape::new();
        let vars = self.net.bind(&mut tape, true);
        let mut stats = Vec::new();
        let net = &self.net;
        let mut forward = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            let f = net.forward_tape(tape, &vars, x, Mode::Train)?;
            stats.extend(f.stats);
            Ok(f.logits)
        };
        let r = &self.recipe;
        let LossTerms { loss, adv_logits, clean_logits } = match r.loss {
            LossKind::Sat => sat_loss(net, &mut forward, &mut tape, &batch.x, &batch.y, &r.inner, rng, targets)?,
            LossKind::Trades => trades_loss(net, &mut forward, &mut tape, &batch.x, &batch.y, r.trades_gamma, &r.inner, rng, targets)?,
            LossKind::Mart => mart_loss(net, &mut forward, &mut tape, &batch.x, &batch.y, r.mart_lambda, &r.inner, rng)?,
        };
        let clean_hits = match clean_logits {
            Some(z) => count_correct(tape.value(z), &batch.y)?,
            None => count_correct(&net.predict(&batch.x)?, &batch.y)?,
        };
        let adv_hits = count_correct(tape.value(adv_logits), &batch.y)?;
        let value = tape.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Ok((value, clean_hits, adv_hits));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
        self.net.apply_batch_stats(&stats);
        self.sgd.step(&mut self.net, &grads, lr);
        if let Some(e) = self.ema.as_mut() {
            e.update(&self.net);
        }
        Ok((value, clean_hits, adv_hits))
    }

    pub fn finish(self) -> TrainOutcome<T> {
        let checkpoint = self.checkpoint();
        let ema_network = self.ema_network();
        TrainOutcome { checkpoint, network: self.net, ema_network, metrics: self.metrics }
    }
}

/// Trains `net` for `recipe.epochs` epochs.
pub fn train<T: Scalar>(net: BuiltNetwork<T>, recipe: &TrainRecipe, dataset: &DatasetHandle, seed: u64) -> Result<TrainOutcome<T>> {
    let mut t = Trainer::new(net, recipe.clone(), seed)?;
    while !t.is_finished() {
        t.run_epoch(dataset)?;
    }
    Ok(t.finish())
}

/// One run of a weight-decay sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub activation: Activation,
    pub weight_decay: f64,
    pub record: RobustRunRecord,
    pub metrics: Vec<EpochMetrics>,
}

/// Inputs shared by every run of a sweep.
pub struct SweepSetup<'a> {
    pub spec: &'a NetworkSpec,
    pub dataset: &'a DatasetHandle,
    pub eval_attacks: &'a [AttackConfig],
    pub eval_batch: usize,
    pub seed: u64,
}

/// Trains one network per (activation, weight decay) pair, in that nesting
/// order, and evaluates each on the test split. The EMA network is evaluated
/// when the recipe averages weights.
pub fn weight_decay_sweep<T: Scalar>(
    setup: &SweepSetup<'_>,
    recipe: &TrainRecipe,
    values: &[f64],
    activations: &[Activation],
) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::Domain(String::from("weight decay sweep needs at least one value")));
    }
    if activations.is_empty() {
        return Err(Error::Domain(String::from("weight decay sweep needs at least one activation")));
    }
    let mut out = Vec::new();
    for &act in activations {
        let mut spec = setup.spec.clone();
        for s in &mut spec.stages {
            s.block_template.activation = act;
        }
        spec.name = format!("{}-{}", setup.spec.name, activation_name(act));
        for &wd in values {
            let mut r = recipe.clone();
            r.weight_decay = wd;
            let net = build_network::<T>(&spec, setup.seed)?;
            let outcome = train(net, &r, setup.dataset, setup.seed)?;
            let model = outcome.ema_network.as_ref().unwrap_or(&outcome.network);
            let mut rng = epoch_rng(setup.seed, usize::MAX - 1);
            let acc = evaluate(model, setup.dataset.split(SplitKind::Test), setup.eval_attacks, setup.eval_batch, &mut rng)?;
            let record = RobustRunRecord::for_spec(&spec, &r.id(), setup.seed, &acc)?;
            out.push(SweepRun { activation: act, weight_decay: wd, record, metrics: outcome.metrics });
        }
    }
    Ok(out)
}

pub fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Silu => "silu",
        Activation::Softplus => "softplus",
        Activation::Gelu => "gelu",
    }
}
