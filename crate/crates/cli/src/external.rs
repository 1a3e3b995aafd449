//! Slot for third-party attack suites (e.g. AutoAttack) run as a separate
//! process.
//!
//! Input directory contract:
//!
//! - `images.bin`: `f32` little-endian, NCHW, values in `[0, 1]`
//! - `labels.bin`: `u32` little-endian, one per image
//! - `meta.json`: [`ExternalMeta`]
//!
//! The command is invoked as `<cmd> <input_dir> <output_json>` and must write
//! [`ExternalResult`] to `<output_json>`, exiting with status 0.

use std::path::{Path, PathBuf};
use std::process::Command;

use robustnet_core::data::Split;
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::fsutil::{read, write_atomic};
use crate::tables::StoredRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalMeta {
    pub layout: String,
    pub examples: usize,
    pub channels: usize,
    pub resolution: usize,
    pub classes: usize,
    pub epsilon: f64,
    pub checkpoint: PathBuf,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalResult {
    /// Column name in `robust_acc`; defaults to `autoattack`.
    #[serde(default)]
    pub label: Option<String>,
    /// Percent of examples still classified correctly.
    pub robust_acc: f64,
}

pub fn export_split(dir: &Path, split: &Split, classes: usize, epsilon: f64, checkpoint: &Path, config_hash: &str) -> Result<ExternalMeta> {
    let images: Vec<u8> = split.images.iter().flat_map(|v| v.to_le_bytes()).collect();
    let labels: Vec<u8> = split.labels.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect();
    write_atomic(&dir.join("images.bin"), &images)?;
    write_atomic(&dir.join("labels.bin"), &labels)?;
    let meta = ExternalMeta {
        layout: "nchw_f32_le".into(),
        examples: split.len(),
        channels: 3,
        resolution: split.resolution,
        classes,
        epsilon,
        checkpoint: checkpoint.to_path_buf(),
        config_hash: config_hash.to_string(),
    };
    write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// Runs `cmd` on a prepared input directory and parses its result.
pub fn run_external(cmd: &str, input_dir: &Path, output_json: &Path) -> Result<ExternalResult> {
    let status = Command::new(cmd)
        .arg(input_dir)
        .arg(output_json)
        .status()
        .map_err(|e| IoError::External(format!("{cmd}: {e}")))?;
    if !status.success() {
        return Err(IoError::External(format!("{cmd} exited with {status}")));
    }
    let res: ExternalResult = serde_json::from_slice(&read(output_json)?)?;
    if !(0.0..=100.0).contains(&res.robust_acc) {
        return Err(IoError::External(format!("robust_acc {} outside [0, 100]", res.robust_acc)));
    }
    Ok(res)
}

/// Adds the external result as a robust-accuracy column. An existing
/// column of the same name is only replaced when `overwrite` is set.
pub fn merge_external(rec: &mut StoredRecord, res: &ExternalResult, overwrite: bool) -> Result<()> {
    let label = res.label.clone().unwrap_or_else(|| "autoattack".into());
    if rec.record.robust_acc.contains_key(&label) && !overwrite {
        return Err(IoError::Conflict(format!("record already has a '{label}' column")));
    }
    rec.record.robust_acc.insert(label, res.robust_acc);
    Ok(())
}
