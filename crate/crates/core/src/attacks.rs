//! White-box L-infinity attacks: FGSM, PGD and PGD on the CW margin.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::arch::{BuiltNetwork, Mode};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// A model whose logits can be recorded on a tape with fixed parameters.
///
/// Implementations must not mutate any state: attacks call this repeatedly
/// and rely on evaluation-mode behaviour.
pub trait Differentiable<T: Scalar> {
    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;

    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.logits_on_tape(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }
}

impl<T: Scalar> Differentiable<T> for BuiltNetwork<T> {
    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let params = self.bind(tape, false);
        Ok(self.forward_tape(tape, &params, x, Mode::Eval)?.logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    CwPgd,
}

/// Objective the attacker ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    CwMargin,
    /// `KL(p_clean || p_adv)` against the clean prediction.
    Kl,
}

/// Piecewise-constant step size: `initial` for the first `decay_after` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_after: usize,
}

impl StepSchedule {
    /// 0.1, then 0.01 from the sixth step on.
    pub fn advanced() -> Self {
        Self { initial: 0.1, decayed: 0.01, decay_after: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    #[serde(default)]
    pub step_schedule: Option<StepSchedule>,
    /// Overrides the family's default objective.
    #[serde(default)]
    pub loss: Option<AttackLoss>,
}

pub const DEFAULT_EPSILON: f64 = 8.0 / 255.0;
pub const DEFAULT_ALPHA: f64 = 2.0 / 255.0;

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self { family: AttackFamily::Fgsm, epsilon, alpha: epsilon, steps: 1, random_start: false, step_schedule: None, loss: None }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize, random_start: bool) -> Self {
        Self { family: AttackFamily::Pgd, epsilon, alpha, steps, random_start, step_schedule: None, loss: None }
    }

    /// Margin-loss PGD with the default step size and no restarts.
    pub fn cw(epsilon: f64, steps: usize) -> Self {
        Self { family: AttackFamily::CwPgd, epsilon, alpha: DEFAULT_ALPHA, steps, random_start: true, step_schedule: None, loss: None }
    }

    pub fn objective(&self) -> AttackLoss {
        self.loss.unwrap_or(match self.family {
            AttackFamily::Fgsm | AttackFamily::Pgd => AttackLoss::CrossEntropy,
            AttackFamily::CwPgd => AttackLoss::CwMargin,
        })
    }

    pub fn alpha_at(&self, step: usize) -> f64 {
        match self.step_schedule {
            Some(s) if step < s.decay_after => s.initial,
            Some(s) => s.decayed,
            None => self.alpha,
        }
    }

    /// Short label such as `pgd20` or `cw40`.
    pub fn label(&self) -> String {
        match self.family {
            AttackFamily::Fgsm => String::from("fgsm"),
            AttackFamily::Pgd => format!("pgd{}", self.steps),
            AttackFamily::CwPgd => format!("cw{}", self.steps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.epsilon >= 0.0) {
            errors.push(format!("epsilon {} must be >= 0", self.epsilon));
        }
        if !(self.alpha >= 0.0) {
            errors.push(format!("alpha {} must be >= 0", self.alpha));
        }
        if self.steps == 0 {
            errors.push(String::from("steps must be >= 1"));
        }
        if self.family == AttackFamily::Fgsm && self.steps != 1 {
            errors.push(String::from("fgsm takes exactly one step"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errors))
        }
    }
}

/// Mean cross-entropy of `logits: [N, K]` against integer labels.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.gather(ls, y)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// `max_{i != y} z_i - z_y` per example.
pub fn cw_margin_loss<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let m = cw_margin_on_tape(&mut tape, z, y)?;
    Ok(tape.value(m).data().to_vec())
}

pub fn cw_margin_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &[usize]) -> Result<Var> {
    let other = tape.max_other(logits, y)?;
    let own = tape.gather(logits, y)?;
    tape.sub(other, own)
}

/// Per-row `KL(p || q)` from log-probabilities, summed over classes.
pub fn kl_rows<T: Scalar>(tape: &mut Tape<T>, log_p: Var, log_q: Var) -> Result<Var> {
    let p = exp_of_log(tape, log_p)?;
    let d = tape.sub(log_p, log_q)?;
    let w = tape.mul(p, d)?;
    tape.row_sum(w)
}

fn exp_of_log<T: Scalar>(tape: &mut Tape<T>, log_p: Var) -> Result<Var> {
    // softmax(log p) = p for normalized log-probabilities
    tape.softmax(log_p)
}

pub fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn clip01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Projects `x_adv` onto the epsilon-ball around `x` intersected with `[0, 1]`.
pub fn project<T: Scalar>(x_adv: &mut [T], x: &[T], epsilon: T) {
    for (a, &o) in x_adv.iter_mut().zip(x) {
        *a = clip01(a.max(o - epsilon).min(o + epsilon));
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, y: &[usize]) -> Result<()> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n != y.len() {
        return Err(Error::Shape { op: "attack", detail: format!("{n} inputs, {} labels", y.len()) });
    }
    if let Some(i) = x.data().iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::Domain(format!("input element {i} outside [0, 1]")));
    }
    Ok(())
}

/// Gradient of the summed attack objective with respect to the input.
pub fn input_gradient<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    objective: &mut dyn FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let z = model.logits_on_tape(&mut tape, xv)?;
    let loss = objective(&mut tape, z)?;
    let mut g = tape.backward(loss)?;
    let grad = g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    if let Some(i) = grad.data().iter().position(|v| !v.is_finite()) {
        let per = grad.numel() / y.len().max(1);
        return Err(Error::NonFinite { context: String::from("attack input gradient"), index: i / per.max(1) });
    }
    Ok(grad)
}

/// Summed per-example objective for the built-in loss kinds.
pub fn objective_for<T: Scalar>(
    kind: AttackLoss,
    y: Vec<usize>,
    clean_log_probs: Option<Tensor<T>>,
) -> impl FnMut(&mut Tape<T>, Var) -> Result<Var> {
    move |tape: &mut Tape<T>, z: Var| match kind {
        AttackLoss::CrossEntropy => {
            let ls = tape.log_softmax(z)?;
            let picked = tape.gather(ls, &y)?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0))
        }
        AttackLoss::CwMargin => {
            let m = cw_margin_on_tape(tape, z, &y)?;
            Ok(tape.sum(m))
        }
        AttackLoss::Kl => {
            let clean = clean_log_probs.clone().ok_or_else(|| Error::Domain(String::from("KL objective needs clean predictions")))?;
            let lp = tape.constant(clean);
            let lq = tape.log_softmax(z)?;
            let kl = kl_rows(tape, lp, lq)?;
            Ok(tape.sum(kl))
        }
    }
}

/// General PGD ascent on a caller-supplied objective.
pub fn pgd_with<T: Scalar, M: Differentiable<T> + ?Sized, R: RngCore + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
    objective: &mut dyn FnMut(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_input(x, y)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = T::c(cfg.epsilon);
    let mut adv = x.clone();
    if cfg.random_start {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            let u: f64 = rng.gen_range(-cfg.epsilon..=cfg.epsilon);
            *a = clip01(o + T::c(u));
        }
    }
    for step in 0..cfg.steps {
        let g = input_gradient(model, &adv, y, objective)?;
        let alpha = T::c(cfg.alpha_at(step));
        for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
            *a += alpha * sign(gv);
        }
        project(adv.data_mut(), x.data(), eps);
    }
    Ok(adv)
}

/// `clip(x + eps * sign(grad), 0, 1)`.
pub fn fgsm<T: Scalar, M: Differentiable<T> + ?Sized>(model: &M, x: &Tensor<T>, y: &[usize], cfg: &AttackConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_input(x, y)?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut objective = objective_for(cfg.objective(), y.to_vec(), None);
    let g = input_gradient(model, x, y, &mut objective)?;
    let eps = T::c(cfg.epsilon);
    let mut adv = x.clone();
    for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
        *a = clip01(*a + eps * sign(gv));
    }
    Ok(adv)
}

/// PGD on the configured objective. KL objectives use the model's own clean
/// prediction as the reference distribution.
pub fn pgd<T: Scalar, M: Differentiable<T> + ?Sized, R: RngCore + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let clean = if cfg.objective() == AttackLoss::Kl { Some(clean_log_probs(model, x)?) } else { None };
    let mut objective = objective_for(cfg.objective(), y.to_vec(), clean);
    pgd_with(model, x, y, cfg, rng, &mut objective)
}

pub fn clean_log_probs<T: Scalar, M: Differentiable<T> + ?Sized>(model: &M, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = model.logits_on_tape(&mut tape, xv)?;
    let lp = tape.log_softmax(z)?;
    Ok(tape.value(lp).clone())
}

/// Dispatches on `cfg.family`.
pub fn run_attack<T: Scalar, M: Differentiable<T> + ?Sized, R: RngCore + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, x, y, cfg),
        AttackFamily::Pgd | AttackFamily::CwPgd => pgd(model, x, y, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_examples() {
        let z = Tensor::from_vec(&[3, 3], alloc::vec![2.0, 5.0, 1.0, 2.0, 5.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(cw_margin_loss::<f64>(&z, &[1, 0, 2]).unwrap(), [-3.0, 3.0, 0.0]);
        let single = Tensor::from_vec(&[1, 1], alloc::vec![1.0f64]).unwrap();
        assert!(matches!(cw_margin_loss(&single, &[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn projection_clamps_to_ball_and_box() {
        let x = [0.5f64, 0.99, 0.01];
        let mut a = [0.5 + 2.0 * 0.03, 1.5, -1.0];
        project(&mut a, &x, 0.03);
        assert_eq!(a, [0.5 + 0.03, 1.0, 0.0]);
    }

    #[test]
    fn schedule() {
        let mut c = AttackConfig::pgd(DEFAULT_EPSILON, DEFAULT_ALPHA, 10, true);
        assert_eq!(c.alpha_at(7), DEFAULT_ALPHA);
        c.step_schedule = Some(StepSchedule::advanced());
        assert_eq!((c.alpha_at(4), c.alpha_at(5)), (0.1, 0.01));
        assert_eq!(c.label(), "pgd10");
    }
}
