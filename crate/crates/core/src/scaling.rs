//! Compound and independent depth/width scaling under a FLOPs budget.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arch::{robust_template, wrn_template, ActivationOrder, BlockSpec, NetworkSpec};
use crate::complexity::{count_flops, count_params, flops_continuous};
use crate::error::{Error, Result};

/// Target depth share of the compound rule.
pub const R_D: f64 = 0.7;
/// Accepted band for the depth share of an integer solution.
pub const R_D_WINDOW: (f64, f64) = (0.68, 0.72);
/// Relative distance from the budget an integer solution may have.
pub const BUDGET_TOLERANCE: f64 = 0.10;
pub const DEPTH_RATIO: [f64; 3] = [2.0, 2.0, 1.0];
pub const WIDTH_RATIO: [f64; 3] = [2.0, 2.5, 1.0];

pub const DEPTH_GRID: [usize; 7] = [2, 3, 4, 5, 7, 9, 11];
pub const WIDTH_GRID: [usize; 8] = [4, 6, 8, 10, 12, 14, 16, 20];
/// Widths held fixed when scaling depth alone.
pub const STANDARD_WIDTHS: [usize; 3] = [10, 10, 10];
/// Depths held fixed when scaling width alone.
pub const STANDARD_DEPTHS: [usize; 3] = [4, 4, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Robust,
    Basic,
}

impl BlockKind {
    pub fn template(self) -> BlockSpec {
        match self {
            BlockKind::Robust => robust_template(),
            BlockKind::Basic => wrn_template(ActivationOrder::Pre),
        }
    }
}

impl core::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robust" => Ok(BlockKind::Robust),
            "basic" => Ok(BlockKind::Basic),
            _ => Err(Error::Domain(format!("unknown block kind {s:?} (robust|basic)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Depth,
    Width,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSolution {
    pub depths: [usize; 3],
    pub widths: [usize; 3],
    pub achieved_flops: u64,
    pub achieved_r_d: f64,
    /// Real-valued stage values the integer solution was rounded from.
    pub real_depths: [f64; 3],
    pub real_widths: [f64; 3],
}

impl ScalingSolution {
    pub fn spec(&self, kind: BlockKind, num_classes: usize, resolution: usize) -> NetworkSpec {
        let d = self.depths;
        let w = self.widths;
        let name = format!("scaled-D{}-{}-{}-W{}-{}-{}", d[0], d[1], d[2], w[0], w[1], w[2]);
        NetworkSpec::from_template(name, kind.template(), d, w, num_classes, resolution)
    }
}

/// `sum(D) / (sum(D) + sum(W))`.
pub fn compute_r_d(depths: &[usize], widths: &[usize]) -> Result<f64> {
    if depths.is_empty() || widths.is_empty() {
        return Err(Error::Domain(String::from("depths and widths must be nonempty")));
    }
    if depths.iter().chain(widths).any(|&v| v == 0) {
        return Err(Error::Domain(String::from("depths and widths must be positive")));
    }
    let sd: usize = depths.iter().sum();
    let sw: usize = widths.iter().sum();
    Ok(sd as f64 / (sd + sw) as f64)
}

fn spec_for(kind: BlockKind, d: [usize; 3], w: [usize; 3], classes: usize, resolution: usize) -> NetworkSpec {
    NetworkSpec::from_template("", kind.template(), d, w, classes, resolution)
}

/// Splits a total along a ratio vector.
fn distribute(total: f64, ratio: [f64; 3]) -> [f64; 3] {
    let s: f64 = ratio.iter().sum();
    ratio.map(|r| total * r / s)
}

/// Smallest parameter `t >= lo` with `f(t) >= target`, by bisection.
fn bisect(target: f64, mut lo: f64, f: impl Fn(f64) -> f64) -> f64 {
    let mut hi = lo.max(1.0);
    while f(hi) < target {
        hi *= 2.0;
        if hi > 1e6 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Positive integers within distance 1 of `v`.
fn neighbours(v: f64) -> Vec<usize> {
    let lo = libm::floor(v).max(1.0) as usize;
    let hi = libm::ceil(v).max(1.0) as usize;
    if lo == hi {
        alloc::vec![lo]
    } else {
        alloc::vec![lo, hi]
    }
}

fn product(a: &[Vec<usize>; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for &x in &a[0] {
        for &y in &a[1] {
            for &z in &a[2] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

struct Candidate {
    d: [usize; 3],
    w: [usize; 3],
    flops: u64,
}

/// Closest to `target`; ties prefer deeper, then cheaper.
fn pick(target: u64, cands: Vec<Candidate>) -> Option<Candidate> {
    cands.into_iter().min_by(|a, b| {
        let da = a.flops.abs_diff(target);
        let db = b.flops.abs_diff(target);
        let sa: usize = a.d.iter().sum();
        let sb: usize = b.d.iter().sum();
        da.cmp(&db).then(sb.cmp(&sa)).then(a.flops.cmp(&b.flops))
    })
}

fn check_budget(target: u64, c: &Candidate) -> Result<()> {
    let rel = (c.flops as f64 - target as f64).abs() / target as f64;
    if rel > BUDGET_TOLERANCE {
        return Err(Error::Infeasible {
            target_flops: target,
            minimal_flops: c.flops,
            detail: format!("closest integer solution is {:.1}% from the budget", 100.0 * rel),
        });
    }
    Ok(())
}

fn minimal_cost(kind: BlockKind, classes: usize, resolution: usize) -> Result<u64> {
    count_flops(&spec_for(kind, [1; 3], [1; 3], classes, resolution), resolution)
}

/// Compound depth/width solution for a FLOPs budget.
///
/// Stage values follow `D = t * [2,2,1]` and `W = s * [2,2.5,1]` with `s`
/// tied to `t` so that the real-valued depth share is exactly [`R_D`]; `t` is
/// bisected against the continuous cost. Each stage is rounded to the nearest
/// integer. Only if that point leaves [`R_D_WINDOW`] or the budget band is it
/// repaired: among floor/ceil roundings inside both, those needing the fewest
/// unit moves from the rounded point are kept and the one closest to the
/// budget wins, ties going to the deeper and then the cheaper network.
pub fn solve_compound(target_flops: u64, kind: BlockKind, resolution: usize) -> Result<ScalingSolution> {
    solve_compound_for(target_flops, kind, 10, resolution)
}

pub fn solve_compound_for(target_flops: u64, kind: BlockKind, classes: usize, resolution: usize) -> Result<ScalingSolution> {
    let minimal = minimal_cost(kind, classes, resolution)?;
    if target_flops < minimal {
        return Err(Error::Infeasible {
            target_flops,
            minimal_flops: minimal,
            detail: String::from("budget below the smallest network"),
        });
    }
    let base = spec_for(kind, [1; 3], [1; 3], classes, resolution);
    let real = |sd: f64| {
        let sw = sd * (1.0 - R_D) / R_D;
        (distribute(sd, DEPTH_RATIO), distribute(sw, WIDTH_RATIO))
    };
    let cost = |sd: f64| {
        let (d, w) = real(sd);
        flops_continuous(&base, d, w, resolution)
    };
    let sd = bisect(target_flops as f64, 0.0, cost);
    let (rd, rw) = real(sd);
    let nearest = |v: f64| (libm::round(v) as usize).max(1);
    let (nd, nw) = (rd.map(nearest), rw.map(nearest));
    let r = compute_r_d(&nd, &nw)?;
    let flops = count_flops(&spec_for(kind, nd, nw, classes, resolution), resolution)?;
    let rounded = Candidate { d: nd, w: nw, flops };
    if (R_D_WINDOW.0..=R_D_WINDOW.1).contains(&r) && check_budget(target_flops, &rounded).is_ok() {
        return Ok(ScalingSolution { depths: nd, widths: nw, achieved_flops: flops, achieved_r_d: r, real_depths: rd, real_widths: rw });
    }
    // Repair: every stage moves to the other side of its real value at most.
    let ds = product(&rd.map(neighbours));
    let ws = product(&rw.map(neighbours));
    let mut cands = Vec::new();
    for &d in &ds {
        for &w in &ws {
            let r = compute_r_d(&d, &w)?;
            if r < R_D_WINDOW.0 || r > R_D_WINDOW.1 {
                continue;
            }
            let flops = count_flops(&spec_for(kind, d, w, classes, resolution), resolution)?;
            cands.push(Candidate { d, w, flops });
        }
    }
    let moves = |c: &Candidate| -> usize {
        (0..3).map(|i| c.d[i].abs_diff(nd[i]) + c.w[i].abs_diff(nw[i])).sum()
    };
    let fewest = cands
        .iter()
        .filter(|c| check_budget(target_flops, c).is_ok())
        .map(moves)
        .min()
        .unwrap_or(usize::MAX);
    cands.retain(|c| moves(c) == fewest || fewest == usize::MAX);
    let best = pick(target_flops, cands).ok_or_else(|| Error::Infeasible {
        target_flops,
        minimal_flops: minimal,
        detail: String::from("no rounding of the real solution keeps the depth share in range"),
    })?;
    check_budget(target_flops, &best)?;
    Ok(ScalingSolution {
        depths: best.d,
        widths: best.w,
        achieved_flops: best.flops,
        achieved_r_d: compute_r_d(&best.d, &best.w)?,
        real_depths: rd,
        real_widths: rw,
    })
}

/// Scales one axis along its stage ratio with the other axis held at `fixed`.
///
/// `fixed` is a full `(depths, widths)` configuration; only the entries of the
/// non-scaled axis are used, unless the budget equals the cost of `fixed`
/// itself, in which case it is returned unchanged.
pub fn solve_independent(
    target_flops: u64,
    kind: BlockKind,
    axis: Axis,
    fixed: ([usize; 3], [usize; 3]),
    resolution: usize,
) -> Result<ScalingSolution> {
    let classes = 10;
    let (fd, fw) = fixed;
    let fixed_cost = count_flops(&spec_for(kind, fd, fw, classes, resolution), resolution)?;
    if fixed_cost == target_flops {
        return Ok(ScalingSolution {
            depths: fd,
            widths: fw,
            achieved_flops: fixed_cost,
            achieved_r_d: compute_r_d(&fd, &fw)?,
            real_depths: fd.map(|v| v as f64),
            real_widths: fw.map(|v| v as f64),
        });
    }
    let minimal = match axis {
        Axis::Depth => count_flops(&spec_for(kind, [1; 3], fw, classes, resolution), resolution)?,
        Axis::Width => count_flops(&spec_for(kind, fd, [1; 3], classes, resolution), resolution)?,
    };
    if target_flops < minimal {
        return Err(Error::Infeasible { target_flops, minimal_flops: minimal, detail: format!("{axis:?} axis with the other fixed") });
    }
    let base = spec_for(kind, fd, fw, classes, resolution);
    let fdr = fd.map(|v| v as f64);
    let fwr = fw.map(|v| v as f64);
    let real = |t: f64| match axis {
        Axis::Depth => (distribute(t, DEPTH_RATIO), fwr),
        Axis::Width => (fdr, distribute(t, WIDTH_RATIO)),
    };
    let t = bisect(target_flops as f64, 0.0, |t| {
        let (d, w) = real(t);
        flops_continuous(&base, d, w, resolution)
    });
    let (rd, rw) = real(t);
    let scaled = match axis {
        Axis::Depth => product(&rd.map(neighbours)),
        Axis::Width => product(&rw.map(neighbours)),
    };
    let mut cands = Vec::new();
    for v in scaled {
        let (d, w) = match axis {
            Axis::Depth => (v, fw),
            Axis::Width => (fd, v),
        };
        let flops = count_flops(&spec_for(kind, d, w, classes, resolution), resolution)?;
        cands.push(Candidate { d, w, flops });
    }
    let best = pick(target_flops, cands).expect("at least one rounding");
    check_budget(target_flops, &best)?;
    Ok(ScalingSolution {
        depths: best.d,
        widths: best.w,
        achieved_flops: best.flops,
        achieved_r_d: compute_r_d(&best.d, &best.w)?,
        real_depths: rd,
        real_widths: rw,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridEntry {
    pub depths: [usize; 3],
    pub widths: [usize; 3],
    pub params: u64,
    pub flops: u64,
}

/// Every stage triple of the independent-scaling grid for `axis`, costed.
pub fn enumerate_grid(axis: Axis, kind: BlockKind, resolution: usize) -> Result<Vec<GridEntry>> {
    let values: &[usize] = match axis {
        Axis::Depth => &DEPTH_GRID,
        Axis::Width => &WIDTH_GRID,
    };
    let v = values.to_vec();
    let mut out = Vec::new();
    for t in product(&[v.clone(), v.clone(), v]) {
        let (d, w) = match axis {
            Axis::Depth => (t, STANDARD_WIDTHS),
            Axis::Width => (STANDARD_DEPTHS, t),
        };
        let spec = spec_for(kind, d, w, 10, resolution);
        out.push(GridEntry { depths: d, widths: w, params: count_params(&spec)?, flops: count_flops(&spec, resolution)? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_d_examples() {
        assert!((compute_r_d(&[14, 14, 7], &[5, 7, 3]).unwrap() - 0.7).abs() < 1e-12);
        assert!((compute_r_d(&[27, 28, 13], &[10, 14, 6]).unwrap() - 68.0 / 98.0).abs() < 1e-12);
        assert_eq!(compute_r_d(&[1, 1, 1], &[1, 1, 1]).unwrap(), 0.5);
        assert!(compute_r_d(&[], &[1]).is_err());
        assert!(compute_r_d(&[0, 1, 1], &[1, 1, 1]).is_err());
    }

    #[test]
    fn grids_have_expected_sizes() {
        let d = enumerate_grid(Axis::Depth, BlockKind::Basic, 32).unwrap();
        assert_eq!(d.len(), 343);
        assert!(d.iter().all(|e| e.depths.iter().all(|v| DEPTH_GRID.contains(v))));
        let w = enumerate_grid(Axis::Width, BlockKind::Basic, 32).unwrap();
        assert_eq!(w.len(), 512);
        assert!(w.iter().all(|e| e.widths.iter().all(|v| WIDTH_GRID.contains(v))));
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        match solve_compound(1000, BlockKind::Robust, 32).unwrap_err() {
            Error::Infeasible { minimal_flops, .. } => assert!(minimal_flops > 1000),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn degenerate_independent_target() {
        let fixed = ([4, 4, 4], [10, 10, 10]);
        let cost = count_flops(&spec_for(BlockKind::Basic, fixed.0, fixed.1, 10, 32), 32).unwrap();
        let s = solve_independent(cost, BlockKind::Basic, Axis::Depth, fixed, 32).unwrap();
        assert_eq!((s.depths, s.widths), fixed);
    }
}
