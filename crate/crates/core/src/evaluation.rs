//! Robust-accuracy measurement and the analyses run over result records.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::arch::NetworkSpec;
use crate::attacks::{run_attack, AttackConfig, Differentiable};
use crate::complexity::{count_flops, count_params};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::scaling::Axis;
use crate::tensor::{Scalar, Tensor};

/// One (architecture, recipe, seed) result row. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustRunRecord {
    pub spec_id: String,
    pub recipe_id: String,
    pub seed: u64,
    pub clean_acc: f64,
    pub robust_acc: BTreeMap<String, f64>,
    pub params: u64,
    pub flops: u64,
    pub wall_time: f64,
    pub depths: [usize; 3],
    pub widths: [usize; 3],
}

impl RobustRunRecord {
    /// Record with cost fields taken from the complexity model.
    pub fn for_spec(spec: &NetworkSpec, recipe_id: &str, seed: u64, acc: &AccuracyMap) -> Result<Self> {
        let d = spec.depths();
        let w = spec.widths();
        Ok(Self {
            spec_id: spec.name.clone(),
            recipe_id: recipe_id.to_string(),
            seed,
            clean_acc: acc.clean_acc,
            robust_acc: acc.robust_acc.clone(),
            params: count_params(spec)?,
            flops: count_flops(spec, spec.input_resolution)?,
            wall_time: 0.0,
            depths: [d[0], d[1], d[2]],
            widths: [w[0], w[1], w[2]],
        })
    }

    pub fn robust(&self, attack: &str) -> Result<f64> {
        self.robust_acc
            .get(attack)
            .copied()
            .ok_or_else(|| Error::Domain(format!("record {} has no '{attack}' accuracy", self.spec_id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMap {
    pub examples: usize,
    pub clean_acc: f64,
    pub robust_acc: BTreeMap<String, f64>,
}

fn correct<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<Vec<bool>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .zip(y)
        .map(|(row, &t)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == t
        })
        .collect())
}

/// Number of argmax hits in `logits` against `y`.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, y: &[usize]) -> Result<usize> {
    Ok(correct(logits, y)?.into_iter().filter(|&c| c).count())
}

/// Clean accuracy plus one robust accuracy per attack, keyed by the attack
/// label (a suffix disambiguates repeated labels). An example counts as
/// robust only if it is classified correctly after the attack.
pub fn evaluate<T, M, R>(model: &M, split: &Split, attacks: &[AttackConfig], batch_size: usize, rng: &mut R) -> Result<AccuracyMap>
where
    T: Scalar,
    M: Differentiable<T> + ?Sized,
    R: RngCore + ?Sized,
{
    if split.is_empty() {
        return Err(Error::Domain(String::from("cannot evaluate on an empty split")));
    }
    for a in attacks {
        a.validate()?;
    }
    let labels = attack_labels(attacks);
    let mut clean = 0usize;
    let mut robust = alloc::vec![0usize; attacks.len()];
    for batch in split.batches::<T>(batch_size.max(1)) {
        clean += count_correct(&model.logits(&batch.x)?, &batch.y)?;
        for (i, cfg) in attacks.iter().enumerate() {
            let adv = run_attack(model, &batch.x, &batch.y, cfg, rng)?;
            robust[i] += count_correct(&model.logits(&adv)?, &batch.y)?;
        }
    }
    let pct = |c: usize| 100.0 * c as f64 / split.len() as f64;
    Ok(AccuracyMap {
        examples: split.len(),
        clean_acc: pct(clean),
        robust_acc: labels.into_iter().zip(robust).map(|(l, c)| (l, pct(c))).collect(),
    })
}

fn attack_labels(attacks: &[AttackConfig]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    attacks
        .iter()
        .map(|a| {
            let base = a.label();
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}#{n}")
            }
        })
        .collect()
}

/// Mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub spec_id: String,
    pub recipe_id: String,
    pub seeds: Vec<u64>,
    pub params: u64,
    pub flops: u64,
    /// `clean_acc`, `wall_time`, and one entry per attack label.
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Welford mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let n = values.len().max(1) as f64;
    MeanStd { mean, std: libm::sqrt((m2 / n).max(0.0)) }
}

/// Aggregates records that all share one (spec, recipe) key.
pub fn aggregate_group(records: &[RobustRunRecord]) -> Result<SeedAggregate> {
    let first = records.first().ok_or_else(|| Error::Grouping(String::from("empty group")))?;
    for r in records {
        if r.spec_id != first.spec_id || r.recipe_id != first.recipe_id {
            return Err(Error::Grouping(format!(
                "group mixes ({}, {}) with ({}, {})",
                first.spec_id, first.recipe_id, r.spec_id, r.recipe_id
            )));
        }
        if r.params != first.params || r.flops != first.flops {
            return Err(Error::Grouping(format!("spec {} appears with differing cost fields", r.spec_id)));
        }
        if r.robust_acc.keys().ne(first.robust_acc.keys()) {
            return Err(Error::Grouping(format!("spec {} records disagree on the attack set", r.spec_id)));
        }
    }
    let mut metrics = BTreeMap::new();
    let col = |f: &dyn Fn(&RobustRunRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    metrics.insert(String::from("clean_acc"), mean_std(&col(&|r| r.clean_acc)));
    metrics.insert(String::from("wall_time"), mean_std(&col(&|r| r.wall_time)));
    for key in first.robust_acc.keys() {
        metrics.insert(key.clone(), mean_std(&col(&|r| r.robust_acc[key])));
    }
    Ok(SeedAggregate {
        spec_id: first.spec_id.clone(),
        recipe_id: first.recipe_id.clone(),
        seeds: records.iter().map(|r| r.seed).collect(),
        params: first.params,
        flops: first.flops,
        metrics,
    })
}

/// Groups by (spec, recipe) in first-appearance order and aggregates each group.
pub fn aggregate_seeds(records: &[RobustRunRecord]) -> Result<Vec<SeedAggregate>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<RobustRunRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.spec_id.clone(), r.recipe_id.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.clone());
    }
    order.iter().map(|k| aggregate_group(&groups[k])).collect()
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (n0, n1, n2, n3, swaps) = kendall_counts(xs, ys)?;
    let num = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * swaps as i128;
    let den = libm::sqrt((n0 - n1) as f64 * (n0 - n2) as f64);
    if den == 0.0 {
        return Err(Error::Domain(String::from("kendall tau undefined for a constant sequence")));
    }
    Ok(num as f64 / den)
}

/// `(pairs, x-tied pairs, y-tied pairs, jointly tied pairs, discordant swaps)`.
fn kendall_counts(xs: &[f64], ys: &[f64]) -> Result<(u64, u64, u64, u64, u64)> {
    if xs.len() != ys.len() {
        return Err(Error::Domain(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Domain(String::from("kendall tau needs at least two points")));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Domain(String::from("kendall tau input contains NaN")));
    }
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(ys[a].total_cmp(&ys[b])));
    let pairs = |t: u64| t * t.saturating_sub(1) / 2;
    let n0 = pairs(n as u64);
    let (mut n1, mut n3) = (0u64, 0u64);
    let (mut tx, mut txy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if xs[a] == xs[b] {
            tx += 1;
            if ys[a] == ys[b] {
                txy += 1;
            } else {
                n3 += pairs(txy);
                txy = 1;
            }
        } else {
            n1 += pairs(tx);
            n3 += pairs(txy);
            tx = 1;
            txy = 1;
        }
    }
    n1 += pairs(tx);
    n3 += pairs(txy);

    let mut seq: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
    let mut buf = seq.clone();
    let swaps = merge_count(&mut seq, &mut buf);

    let mut n2 = 0u64;
    let mut ty = 1u64;
    for w in seq.windows(2) {
        if w[0] == w[1] {
            ty += 1;
        } else {
            n2 += pairs(ty);
            ty = 1;
        }
    }
    n2 += pairs(ty);
    Ok((n0, n1, n2, n3, swaps))
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut s = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            s += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..n].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParetoLabel {
    /// Not dominated: no other point is at least as cheap and as accurate.
    Efficient,
    /// On the reverse front: no other point is at least as costly and as inaccurate.
    AntiEfficient,
    Dominated,
}

/// `a` dominates `b` under (minimize cost, maximize accuracy).
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1)
}

fn front_mask(points: &[(f64, f64)]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(points[b].1.total_cmp(&points[a].1)));
    let mut on = alloc::vec![false; points.len()];
    let mut best: Option<(f64, f64)> = None;
    for i in idx {
        let p = points[i];
        let keep = match best {
            None => true,
            Some(b) => p.1 > b.1 || (p.1 == b.1 && p.0 == b.0),
        };
        if keep {
            on[i] = true;
            if best.map_or(true, |b| p.1 > b.1) {
                best = Some(p);
            }
        }
    }
    on
}

/// Labels each `(cost, accuracy)` point. Efficient takes precedence when a
/// point lies on both fronts.
pub fn pareto_labels(points: &[(f64, f64)]) -> Vec<ParetoLabel> {
    let front = front_mask(points);
    let reversed: Vec<(f64, f64)> = points.iter().map(|&(c, a)| (-c, -a)).collect();
    let anti = front_mask(&reversed);
    front
        .into_iter()
        .zip(anti)
        .map(|(f, a)| match (f, a) {
            (true, _) => ParetoLabel::Efficient,
            (false, true) => ParetoLabel::AntiEfficient,
            _ => ParetoLabel::Dominated,
        })
        .collect()
}

/// Pareto labels of records on (FLOPs, robust accuracy under `attack`).
pub fn pareto_front(records: &[RobustRunRecord], attack: &str) -> Result<Vec<ParetoLabel>> {
    if records.is_empty() {
        return Err(Error::Domain(String::from("pareto front of an empty record set")));
    }
    let pts = records.iter().map(|r| Ok((r.flops as f64, r.robust(attack)?))).collect::<Result<Vec<_>>>()?;
    Ok(pareto_labels(&pts))
}

/// Mean stage distribution of `triples`, normalized to the third stage.
pub fn stage_ratio(triples: &[[usize; 3]]) -> Result<[f64; 3]> {
    if triples.is_empty() {
        return Err(Error::Domain(String::from("empty selection")));
    }
    let mut m = [0.0f64; 3];
    for t in triples {
        for (a, &v) in m.iter_mut().zip(t) {
            *a += v as f64;
        }
    }
    if m[2] == 0.0 {
        return Err(Error::Domain(String::from("third stage mean is zero")));
    }
    Ok([m[0] / m[2], m[1] / m[2], 1.0])
}

/// Default number of top-ranked records kept per total depth (or width) level.
pub const TOP_K: usize = 5;

/// Top `k` records by robust accuracy within each level of the axis total.
pub fn select_top_k(records: &[RobustRunRecord], axis: Axis, attack: &str, k: usize) -> Result<Vec<RobustRunRecord>> {
    let triple = |r: &RobustRunRecord| match axis {
        Axis::Depth => r.depths,
        Axis::Width => r.widths,
    };
    let mut levels: BTreeMap<usize, Vec<(f64, &RobustRunRecord)>> = BTreeMap::new();
    for r in records {
        levels.entry(triple(r).iter().sum()).or_default().push((r.robust(attack)?, r));
    }
    let mut out = Vec::new();
    for (_, mut rs) in levels {
        rs.sort_by(|a, b| b.0.total_cmp(&a.0));
        out.extend(rs.into_iter().take(k).map(|(_, r)| r.clone()));
    }
    Ok(out)
}

/// Stage ratio of the top-`k` records per level on `axis`.
pub fn derive_stage_ratios(records: &[RobustRunRecord], axis: Axis, attack: &str, k: usize) -> Result<[f64; 3]> {
    let top = select_top_k(records, axis, attack, k)?;
    let triples: Vec<[usize; 3]> = top
        .iter()
        .map(|r| match axis {
            Axis::Depth => r.depths,
            Axis::Width => r.widths,
        })
        .collect();
    stage_ratio(&triples)
}
