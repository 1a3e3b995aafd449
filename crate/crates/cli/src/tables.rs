//! CSV tables: cost reports, per-epoch metrics and run records.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use robustnet_core::complexity::CostReport;
use robustnet_core::evaluation::RobustRunRecord;
use robustnet_core::training::EpochMetrics;

use crate::error::{io_err, IoError, Result};
use crate::fsutil::{read, write_atomic};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| IoError::Format(e.to_string()))
}

pub fn cost_report_csv(report: &CostReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "params", "flops", "out_channels", "out_h", "out_w"])?;
    for l in &report.per_layer {
        w.write_record([
            l.layer.clone(),
            l.params.to_string(),
            l.flops.to_string(),
            l.out_shape[0].to_string(),
            l.out_shape[1].to_string(),
            l.out_shape[2].to_string(),
        ])?;
    }
    w.write_record(["total".into(), report.total_params.to_string(), report.total_flops.to_string(), String::new(), String::new(), String::new()])?;
    finish(w)
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "lr", "clean_acc", "robust_acc", "loss"];

fn metrics_row(m: &EpochMetrics) -> [String; 5] {
    [m.epoch.to_string(), format!("{}", m.lr), format!("{}", m.clean_acc), format!("{}", m.robust_acc), format!("{}", m.loss)]
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = csv::Writer::from_writer(Vec::new());
    if fresh {
        w.write_record(METRICS_HEADER)?;
    }
    for m in rows {
        w.write_record(metrics_row(m))?;
    }
    let bytes = finish(w)?;
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

/// Number of data rows in a metrics file (0 if absent).
pub fn metrics_rows(path: &Path) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let bytes = read(path)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let mut n = 0;
    for rec in r.records() {
        rec?;
        n += 1;
    }
    Ok(n)
}

/// A run record together with the hash of the config that produced it.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StoredRecord {
    pub config_hash: String,
    pub record: RobustRunRecord,
}

const FIXED: [&str; 10] = ["config_hash", "spec_id", "recipe_id", "seed", "clean_acc", "params", "flops", "wall_time", "depths", "widths"];

fn triple(t: &[usize; 3]) -> String {
    format!("{}-{}-{}", t[0], t[1], t[2])
}

fn parse_triple(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s.split('-').map(|p| p.parse().map_err(|_| IoError::Format(format!("bad stage triple '{s}'")))).collect::<Result<_>>()?;
    v.try_into().map_err(|_| IoError::Format(format!("bad stage triple '{s}'")))
}

/// CSV with one `robust:<attack>` column per attack seen in any record.
pub fn records_csv(records: &[StoredRecord]) -> Result<Vec<u8>> {
    let attacks: BTreeSet<&String> = records.iter().flat_map(|r| r.record.robust_acc.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(attacks.iter().map(|a| format!("robust:{a}")));
    w.write_record(&header)?;
    for s in records {
        let r = &s.record;
        let mut row = vec![
            s.config_hash.clone(),
            r.spec_id.clone(),
            r.recipe_id.clone(),
            r.seed.to_string(),
            format!("{}", r.clean_acc),
            r.params.to_string(),
            r.flops.to_string(),
            format!("{}", r.wall_time),
            triple(&r.depths),
            triple(&r.widths),
        ];
        row.extend(attacks.iter().map(|a| r.robust_acc.get(*a).map(|v| format!("{v}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    finish(w)
}

pub fn parse_records_csv(bytes: &[u8]) -> Result<Vec<StoredRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| IoError::Format(format!("records CSV lacks column '{name}'")));
    let idx: Vec<usize> = FIXED.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let attacks: Vec<(usize, String)> = header.iter().enumerate().filter_map(|(i, h)| h.strip_prefix("robust:").map(|a| (i, a.to_string()))).collect();
    let num = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|_| IoError::Format(format!("bad {what} '{s}'"))) };
    let int = |s: &str, what: &str| -> Result<u64> { s.parse().map_err(|_| IoError::Format(format!("bad {what} '{s}'"))) };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f = |k: usize| &row[idx[k]];
        let mut robust = BTreeMap::new();
        for (i, a) in &attacks {
            if !row[*i].is_empty() {
                robust.insert(a.clone(), num(&row[*i], a)?);
            }
        }
        out.push(StoredRecord {
            config_hash: f(0).to_string(),
            record: RobustRunRecord {
                spec_id: f(1).to_string(),
                recipe_id: f(2).to_string(),
                seed: int(f(3), "seed")?,
                clean_acc: num(f(4), "clean_acc")?,
                robust_acc: robust,
                params: int(f(5), "params")?,
                flops: int(f(6), "flops")?,
                wall_time: num(f(7), "wall_time")?,
                depths: parse_triple(f(8))?,
                widths: parse_triple(f(9))?,
            },
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[StoredRecord]) -> Result<()> {
    write_atomic(path, &records_csv(records)?)
}

pub fn read_records(path: &Path) -> Result<Vec<StoredRecord>> {
    parse_records_csv(&read(path)?)
}

/// Concatenates record sets, refusing to mix a (spec, recipe, seed) key under
/// two different config hashes.
pub fn merge_records(sets: &[Vec<StoredRecord>]) -> Result<Vec<StoredRecord>> {
    let mut seen: BTreeMap<(String, String, u64), String> = BTreeMap::new();
    let mut out = Vec::new();
    for s in sets.iter().flatten() {
        let key = (s.record.spec_id.clone(), s.record.recipe_id.clone(), s.record.seed);
        match seen.get(&key) {
            Some(h) if *h != s.config_hash => {
                return Err(IoError::Conflict(format!(
                    "record {}/{}/seed {} appears under config hashes {h} and {}",
                    key.0, key.1, key.2, s.config_hash
                )))
            }
            Some(_) => continue,
            None => {
                seen.insert(key, s.config_hash.clone());
                out.push(s.clone());
            }
        }
    }
    Ok(out)
}
