//! Grid analyses over stored records, and the summary table.

use std::collections::BTreeMap;
use std::path::Path;

use robustnet_core::evaluation::{
    aggregate_seeds, derive_stage_ratios, kendall_tau, pareto_labels, select_top_k, ParetoLabel, RobustRunRecord,
};
use robustnet_core::scaling::Axis;
use serde::Serialize;

use crate::error::{IoError, Result};
use crate::fsutil::write_atomic;
use crate::plots::{plot_accuracy_vs_cost, CostPoint};
use crate::tables::StoredRecord;

/// Collapses seeds: one record per (spec, recipe) with seed-mean accuracies.
pub fn seed_means(records: &[RobustRunRecord]) -> Result<Vec<RobustRunRecord>> {
    let aggs = aggregate_seeds(records)?;
    Ok(aggs
        .iter()
        .map(|a| {
            let mut r = records.iter().find(|r| r.spec_id == a.spec_id && r.recipe_id == a.recipe_id).unwrap().clone();
            r.seed = a.seeds[0];
            r.clean_acc = a.metrics["clean_acc"].mean;
            r.wall_time = a.metrics["wall_time"].mean;
            for (k, v) in r.robust_acc.iter_mut() {
                *v = a.metrics[k].mean;
            }
            r
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalysisSummary {
    pub attack: String,
    pub models: usize,
    /// Rank agreement between clean and robust accuracy.
    pub tau_clean_robust: Option<f64>,
    /// Rank agreement between FLOPs and robust accuracy.
    pub tau_flops_robust: Option<f64>,
    pub top_k: usize,
    pub depth_ratio: Option<[f64; 3]>,
    pub width_ratio: Option<[f64; 3]>,
    pub pareto_efficient: Vec<String>,
}

fn label_name(l: ParetoLabel) -> &'static str {
    match l {
        ParetoLabel::Efficient => "efficient",
        ParetoLabel::AntiEfficient => "anti_efficient",
        ParetoLabel::Dominated => "dominated",
    }
}

/// Writes `analysis.json`, `pareto.csv`, `distribution.csv` and
/// `accuracy_vs_flops.svg` into `out`.
///
/// Ratios are reported only for axes the grid actually varies.
pub fn analyze(stored: &[StoredRecord], attack: &str, top_k: usize, out: &Path) -> Result<AnalysisSummary> {
    if stored.is_empty() {
        return Err(IoError::Format("no records to analyze".into()));
    }
    let raw: Vec<RobustRunRecord> = stored.iter().map(|s| s.record.clone()).collect();
    let recs = seed_means(&raw)?;
    let robust = recs.iter().map(|r| r.robust(attack)).collect::<std::result::Result<Vec<_>, _>>()?;
    let clean: Vec<f64> = recs.iter().map(|r| r.clean_acc).collect();
    let flops: Vec<f64> = recs.iter().map(|r| r.flops as f64).collect();
    let tau_clean_robust = kendall_tau(&clean, &robust).ok();
    let tau_flops_robust = kendall_tau(&flops, &robust).ok();

    let pts: Vec<(f64, f64)> = flops.iter().copied().zip(robust.iter().copied()).collect();
    let labels = pareto_labels(&pts);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["spec_id", "recipe_id", "params", "flops", "clean_acc", "robust_acc", "label"])?;
    for ((r, &acc), &l) in recs.iter().zip(&robust).zip(&labels) {
        w.write_record([
            r.spec_id.clone(),
            r.recipe_id.clone(),
            r.params.to_string(),
            r.flops.to_string(),
            r.clean_acc.to_string(),
            acc.to_string(),
            label_name(l).to_string(),
        ])?;
    }
    write_atomic(&out.join("pareto.csv"), &w.into_inner().map_err(|e| IoError::Format(e.to_string()))?)?;

    let varies = |f: fn(&RobustRunRecord) -> [usize; 3]| recs.iter().any(|r| f(r) != f(&recs[0]));
    let mut dist = csv::Writer::from_writer(Vec::new());
    dist.write_record(["axis", "level", "rank", "spec_id", "s1", "s2", "s3", "robust_acc"])?;
    let mut ratio = |axis: Axis, f: fn(&RobustRunRecord) -> [usize; 3]| -> Result<Option<[f64; 3]>> {
        if !varies(f) {
            return Ok(None);
        }
        let top = select_top_k(&recs, axis, attack, top_k)?;
        let mut rank: BTreeMap<usize, usize> = BTreeMap::new();
        let name = if axis == Axis::Depth { "depth" } else { "width" };
        for r in &top {
            let t = f(r);
            let level = t.iter().sum::<usize>();
            let k = rank.entry(level).or_default();
            *k += 1;
            dist.write_record([
                name.to_string(),
                level.to_string(),
                k.to_string(),
                r.spec_id.clone(),
                t[0].to_string(),
                t[1].to_string(),
                t[2].to_string(),
                r.robust(attack)?.to_string(),
            ])?;
        }
        let ratio = derive_stage_ratios(&recs, axis, attack, top_k)?;
        dist.write_record([
            name.to_string(),
            "mean".into(),
            String::new(),
            "ratio".into(),
            format!("{:.4}", ratio[0]),
            format!("{:.4}", ratio[1]),
            format!("{:.4}", ratio[2]),
            String::new(),
        ])?;
        Ok(Some(ratio))
    };
    let depth_ratio = ratio(Axis::Depth, |r| r.depths)?;
    let width_ratio = ratio(Axis::Width, |r| r.widths)?;
    write_atomic(&out.join("distribution.csv"), &dist.into_inner().map_err(|e| IoError::Format(e.to_string()))?)?;

    let hash = stored[0].config_hash.clone();
    let points: Vec<CostPoint> = labels
        .iter()
        .zip(&pts)
        .map(|(&label, &(c, a))| CostPoint { cost: c / 1e9, accuracy: a, label })
        .collect();
    plot_accuracy_vs_cost(&out.join("accuracy_vs_flops.svg"), &points, &format!("{attack} vs FLOPs"), "GFLOPs", "robust accuracy (%)", &hash)?;

    let summary = AnalysisSummary {
        attack: attack.to_string(),
        models: recs.len(),
        tau_clean_robust,
        tau_flops_robust,
        top_k,
        depth_ratio,
        width_ratio,
        pareto_efficient: recs
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == ParetoLabel::Efficient)
            .map(|(r, _)| r.spec_id.clone())
            .collect(),
    };
    write_atomic(&out.join("analysis.json"), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Summary table: one row per (model, recipe) with parameter and FLOP
/// columns and mean ± std accuracy columns over seeds.
pub fn reproduce_table(stored: &[StoredRecord]) -> Result<Vec<u8>> {
    let raw: Vec<RobustRunRecord> = stored.iter().map(|s| s.record.clone()).collect();
    let aggs = aggregate_seeds(&raw)?;
    let mut attacks: Vec<String> = Vec::new();
    for a in &aggs {
        for k in a.metrics.keys() {
            if k != "clean_acc" && k != "wall_time" && !attacks.contains(k) {
                attacks.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "recipe".into(), "seeds".into(), "params_m".into(), "flops_g".into(), "clean".into()];
    header.extend(attacks.iter().cloned());
    w.write_record(&header)?;
    let cell = |m: Option<&robustnet_core::evaluation::MeanStd>| match m {
        Some(m) => format!("{:.2} ± {:.2}", m.mean, m.std),
        None => String::new(),
    };
    for a in &aggs {
        let mut row = vec![
            a.spec_id.clone(),
            a.recipe_id.clone(),
            a.seeds.len().to_string(),
            format!("{:.1}", a.params as f64 / 1e6),
            format!("{:.2}", a.flops as f64 / 1e9),
            cell(a.metrics.get("clean_acc")),
        ];
        row.extend(attacks.iter().map(|k| cell(a.metrics.get(k))));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| IoError::Format(e.to_string()))
}
