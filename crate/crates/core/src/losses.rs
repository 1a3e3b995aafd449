//! Adversarial training objectives.
//!
//! The composed losses take two models: an attack view (evaluation mode,
//! fixed parameters) that crafts the perturbation, and a `forward` closure
//! that records training-mode logits with trainable parameters.

use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attacks::{clean_log_probs, objective_for, pgd_with, AttackConfig, AttackLoss, Differentiable};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Sat,
    Trades,
    Mart,
}

/// Loss and the logits it was computed from.
pub struct LossTerms {
    pub loss: Var,
    pub adv_logits: Var,
    pub clean_logits: Option<Var>,
}

/// Mean cross-entropy against per-row target distributions `[N, K]`.
pub fn soft_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    if tape.value(logits).shape() != targets.shape() {
        return Err(Error::Shape { op: "soft_cross_entropy", detail: alloc::format!("{:?} vs {:?}", tape.value(logits).shape(), targets.shape()) });
    }
    let ls = tape.log_softmax(logits)?;
    let t = tape.constant(targets.clone());
    let w = tape.mul(ls, t)?;
    let rows = tape.row_sum(w)?;
    let m = tape.mean(rows);
    Ok(tape.scale(m, -1.0))
}

/// One-hot rows, optionally smoothed: `(1 - s) * onehot + s / K`.
pub fn smoothed_targets<T: Scalar>(y: &[usize], classes: usize, smoothing: f64) -> Tensor<T> {
    let off = smoothing / classes as f64;
    let mut t = Tensor::full(&[y.len(), classes], T::c(off));
    for (r, &c) in y.iter().enumerate() {
        t.data_mut()[r * classes + c] = T::c(1.0 - smoothing + off);
    }
    t
}

fn ce<T: Scalar>(tape: &mut Tape<T>, logits: Var, y: &[usize], targets: Option<&Tensor<T>>) -> Result<Var> {
    match targets {
        Some(t) => soft_cross_entropy(tape, logits, t),
        None => crate::attacks::cross_entropy(tape, logits, y),
    }
}

/// `CE(clean) + gamma * KL(p_clean || p_adv)`, averaged over the batch.
pub fn trades_objective<T: Scalar>(tape: &mut Tape<T>, clean: Var, adv: Var, y: &[usize], gamma: f64) -> Result<Var> {
    trades_objective_soft(tape, clean, adv, y, gamma, None)
}

fn trades_objective_soft<T: Scalar>(
    tape: &mut Tape<T>,
    clean: Var,
    adv: Var,
    y: &[usize],
    gamma: f64,
    targets: Option<&Tensor<T>>,
) -> Result<Var> {
    let natural = ce(tape, clean, y, targets)?;
    let lp = tape.log_softmax(clean)?;
    let lq = tape.log_softmax(adv)?;
    let kl = crate::attacks::kl_rows(tape, lp, lq)?;
    let kl = tape.mean(kl);
    let robust = tape.scale(kl, gamma);
    tape.add(natural, robust)
}

/// Misclassification-aware objective:
/// `CE(adv) - mean log(1.0001 - p_adv[y'] + 1e-12)
///  + lambda * mean(KL(p_clean || p_adv) * (1.0000001 - p_clean[y]))`
/// where `y'` is the most probable wrong class under the adversarial input.
pub fn mart_objective<T: Scalar>(tape: &mut Tape<T>, clean: Var, adv: Var, y: &[usize], lambda: f64) -> Result<Var> {
    let adv_ce = crate::attacks::cross_entropy(tape, adv, y)?;
    let p_adv = tape.softmax(adv)?;
    let wrong = strongest_other(tape.value(p_adv), y)?;
    let comp = tape.affine_scalar(p_adv, -1.0, 1.0001 + 1e-12);
    let log_comp = tape.log(comp);
    let picked = tape.gather(log_comp, &wrong)?;
    let m = tape.mean(picked);
    let margin = tape.scale(m, -1.0);
    let boosted = tape.add(adv_ce, margin)?;

    let p_nat = tape.softmax(clean)?;
    let log_nat = tape.log_softmax(clean)?;
    let shifted = tape.affine_scalar(p_adv, 1.0, 1e-12);
    let log_adv = tape.log(shifted);
    let d = tape.sub(log_nat, log_adv)?;
    let w = tape.mul(p_nat, d)?;
    let kl = tape.row_sum(w)?;
    let true_p = tape.gather(p_nat, y)?;
    let weight = tape.affine_scalar(true_p, -1.0, 1.0000001);
    let weighted = tape.mul(kl, weight)?;
    let robust = tape.mean(weighted);
    let robust = tape.scale(robust, lambda);
    tape.add(boosted, robust)
}

/// Index of the largest entry of each row other than `y`.
fn strongest_other<T: Scalar>(p: &Tensor<T>, y: &[usize]) -> Result<Vec<usize>> {
    let (_, k) = p.dims2()?;
    if k < 2 {
        return Err(Error::Domain(alloc::string::String::from("need at least two classes")));
    }
    Ok(p.data()
        .chunks_exact(k)
        .zip(y)
        .map(|(row, &t)| {
            let mut best = if t == 0 { 1 } else { 0 };
            for j in 0..k {
                if j != t && row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn inner_cfg(inner: &AttackConfig, loss: AttackLoss) -> AttackConfig {
    let mut c = inner.clone();
    c.loss = Some(loss);
    c
}

/// Cross-entropy on PGD-perturbed inputs.
pub fn sat_loss<T, M, F, R>(
    attack_model: &M,
    forward: &mut F,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    y: &[usize],
    inner: &AttackConfig,
    rng: &mut R,
    targets: Option<&Tensor<T>>,
) -> Result<LossTerms>
where
    T: Scalar,
    M: Differentiable<T> + ?Sized,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
    R: RngCore + ?Sized,
{
    let cfg = inner_cfg(inner, inner.loss.unwrap_or(AttackLoss::CrossEntropy));
    let mut objective = objective_for(cfg.objective(), y.to_vec(), None);
    let x_adv = pgd_with(attack_model, x, y, &cfg, rng, &mut objective)?;
    let xv = tape.constant(x_adv);
    let adv_logits = forward(tape, xv)?;
    let loss = ce(tape, adv_logits, y, targets)?;
    Ok(LossTerms { loss, adv_logits, clean_logits: None })
}

/// Clean cross-entropy plus `gamma`-weighted KL to the adversarial
/// prediction; the inner attack ascends the KL term.
#[allow(clippy::too_many_arguments)]
pub fn trades_loss<T, M, F, R>(
    attack_model: &M,
    forward: &mut F,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    y: &[usize],
    gamma: f64,
    inner: &AttackConfig,
    rng: &mut R,
    targets: Option<&Tensor<T>>,
) -> Result<LossTerms>
where
    T: Scalar,
    M: Differentiable<T> + ?Sized,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
    R: RngCore + ?Sized,
{
    if !(gamma >= 0.0) {
        return Err(Error::Domain(alloc::format!("trades gamma {gamma} must be >= 0")));
    }
    let cfg = inner_cfg(inner, AttackLoss::Kl);
    let clean_lp = clean_log_probs(attack_model, x)?;
    let mut objective = objective_for(AttackLoss::Kl, y.to_vec(), Some(clean_lp));
    let x_adv = pgd_with(attack_model, x, y, &cfg, rng, &mut objective)?;
    let xc = tape.constant(x.clone());
    let clean_logits = forward(tape, xc)?;
    let xa = tape.constant(x_adv);
    let adv_logits = forward(tape, xa)?;
    let loss = trades_objective_soft(tape, clean_logits, adv_logits, y, gamma, targets)?;
    Ok(LossTerms { loss, adv_logits, clean_logits: Some(clean_logits) })
}

/// Boosted cross-entropy plus `lambda`-weighted, misclassification-aware KL.
#[allow(clippy::too_many_arguments)]
pub fn mart_loss<T, M, F, R>(
    attack_model: &M,
    forward: &mut F,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    y: &[usize],
    lambda: f64,
    inner: &AttackConfig,
    rng: &mut R,
) -> Result<LossTerms>
where
    T: Scalar,
    M: Differentiable<T> + ?Sized,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
    R: RngCore + ?Sized,
{
    if !(lambda >= 0.0) {
        return Err(Error::Domain(alloc::format!("mart lambda {lambda} must be >= 0")));
    }
    let cfg = inner_cfg(inner, AttackLoss::CrossEntropy);
    let mut objective = objective_for(AttackLoss::CrossEntropy, y.to_vec(), None);
    let x_adv = pgd_with(attack_model, x, y, &cfg, rng, &mut objective)?;
    let xc = tape.constant(x.clone());
    let clean_logits = forward(tape, xc)?;
    let xa = tape.constant(x_adv);
    let adv_logits = forward(tape, xa)?;
    let loss = mart_objective(tape, clean_logits, adv_logits, y, lambda)?;
    Ok(LossTerms { loss, adv_logits, clean_logits: Some(clean_logits) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(t: &mut Tape<f64>, v: &[f64], k: usize) -> Var {
        t.constant(Tensor::from_vec(&[v.len() / k, k], v.to_vec()).unwrap())
    }

    #[test]
    fn two_logit_kl_closed_form() {
        let mut t = Tape::new();
        let c = logits(&mut t, &[0.3, -0.2], 2);
        let a = logits(&mut t, &[-0.5, 0.4], 2);
        let got = trades_objective(&mut t, c, a, &[0], 1.0).unwrap();
        let ce0 = trades_objective(&mut t, c, a, &[0], 0.0).unwrap();
        let kl = t.value(got).data()[0] - t.value(ce0).data()[0];
        let p = 1.0 / (1.0 + (-0.5f64).exp());
        let q = 1.0 / (1.0 + (0.9f64).exp());
        let want = p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        assert!((kl - want).abs() < 1e-12, "{kl} vs {want}");
    }

    #[test]
    fn mart_terms_by_hand() {
        let (zc, za, y) = ([1.0, 0.0, -1.0, 0.2, 0.1, 0.0], [0.2, 0.5, -0.3, 0.0, 1.0, 0.0], [0usize, 2]);
        let mut t = Tape::new();
        let c = logits(&mut t, &zc, 3);
        let a = logits(&mut t, &za, 3);
        let out = mart_objective(&mut t, c, a, &y, 5.0).unwrap();
        let got = t.value(out).data()[0];
        let sm = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let mut want = 0.0;
        for r in 0..2 {
            let pn = sm(&zc[3 * r..3 * r + 3]);
            let pa = sm(&za[3 * r..3 * r + 3]);
            let wrong = (0..3).filter(|&j| j != y[r]).max_by(|&i, &j| pa[i].partial_cmp(&pa[j]).unwrap()).unwrap();
            let boosted = -pa[y[r]].ln() - (1.0001 - pa[wrong] + 1e-12).ln();
            let kl: f64 = (0..3).map(|j| pn[j] * (pn[j].ln() - (pa[j] + 1e-12).ln())).sum();
            want += (boosted + 5.0 * kl * (1.0000001 - pn[y[r]])) / 2.0;
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn smoothing_rows_sum_to_one() {
        let t: Tensor<f64> = smoothed_targets(&[0, 2], 3, 0.1);
        for row in t.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((t.data()[0] - (0.9 + 0.1 / 3.0)).abs() < 1e-12);
    }
}
