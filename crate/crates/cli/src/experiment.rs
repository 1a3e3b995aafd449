//! Run orchestration: training, evaluation and artifacts for every seed.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json            config hash + config
//! config.toml
//! cost_report.csv
//! records.csv
//! seed-<s>/checkpoint.rbn  latest state (checkpoint.prev.rbn is the one before)
//! seed-<s>/checkpoint-ema.rbn
//! seed-<s>/metrics.csv     append-only
//! seed-<s>/record.json
//! plots/*.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use robustnet_core::arch::{build_network, NetworkSpec};
use robustnet_core::complexity::cost_report;
use robustnet_core::data::{DatasetHandle, SplitKind};
use robustnet_core::evaluation::{evaluate, pareto_labels, RobustRunRecord};
use robustnet_core::training::{epoch_rng, ChaCha8Rng, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{io_err, IoError, Result};
use crate::fsutil::{read, read_string, write_atomic};
use crate::plots::{plot_accuracy_vs_cost, plot_metrics, CostPoint};
use crate::tables::{append_metrics, cost_report_csv, metrics_rows, write_records, StoredRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Start fresh, or continue when the directory holds intact state for
    /// the same config. Anything else is refused.
    Auto,
    /// Like `Auto`, but recovers from a damaged latest checkpoint by falling
    /// back to the previous one and trimming the metrics log to match.
    Resume,
    /// Delete prior artifacts of this experiment directory first.
    Clean,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config_hash: String,
    config: ExperimentConfig,
}

const MANIFEST: &str = "manifest.json";

/// Evaluation RNG stream, disjoint from every training epoch stream.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    epoch_rng(seed, usize::MAX - 1)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn is_empty_dir(p: &Path) -> Result<bool> {
    if !p.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(p).map_err(io_err(p))?.next().is_none())
}

fn prepare_dir(cfg: &ExperimentConfig, mode: RunMode) -> Result<()> {
    let out = &cfg.output_dir;
    let manifest_path = out.join(MANIFEST);
    if mode == RunMode::Clean && out.exists() && !is_empty_dir(out)? {
        if !manifest_path.exists() {
            return Err(IoError::Conflict(format!("{} is not an experiment directory; not deleting it", out.display())));
        }
        fs::remove_dir_all(out).map_err(io_err(out))?;
    }
    if is_empty_dir(out)? {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let m = Manifest { schema_version: crate::config::CONFIG_SCHEMA_VERSION, config_hash: cfg.hash(), config: cfg.clone() };
        write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        return write_atomic(&manifest_path, &serde_json::to_vec_pretty(&m)?);
    }
    let text = read_string(&manifest_path).map_err(|_| {
        IoError::Conflict(format!("{} holds files but no readable manifest; rerun with clean", out.display()))
    })?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| IoError::Conflict(format!("manifest is corrupt ({e}); rerun with clean")))?;
    if m.config_hash != cfg.hash() {
        return Err(IoError::Conflict(format!(
            "{} belongs to config {} but this config hashes to {}; rerun with clean or choose another output_dir",
            out.display(),
            m.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

/// Trains and evaluates every seed, writing artifacts as it goes.
pub fn run_experiment(cfg: &ExperimentConfig, mode: RunMode) -> Result<Vec<StoredRecord>> {
    cfg.validate()?;
    let spec = cfg.resolve_spec()?;
    prepare_dir(cfg, mode)?;
    let hash = cfg.hash();
    let out = &cfg.output_dir;
    let report = cost_report(&spec)?;
    let mut cost = format!("# config_hash={hash}\n").into_bytes();
    cost.extend(cost_report_csv(&report)?);
    write_atomic(&out.join("cost_report.csv"), &cost)?;

    let mut dataset: Option<DatasetHandle> = None;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let rec_path = seed_dir(out, seed).join("record.json");
        if rec_path.exists() {
            let stored: StoredRecord = serde_json::from_slice(&read(&rec_path)?)
                .map_err(|e| IoError::Conflict(format!("{}: {e}; rerun with clean", rec_path.display())))?;
            if stored.config_hash != hash {
                return Err(IoError::Conflict(format!("{} has a foreign config hash", rec_path.display())));
            }
            records.push(stored);
            continue;
        }
        if dataset.is_none() {
            dataset = Some(cfg.dataset.load()?);
        }
        let rec = run_seed(cfg, &spec, dataset.as_ref().unwrap(), seed, mode)?;
        records.push(rec);
    }
    write_records(&out.join("records.csv"), &records)?;
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.record.flops as f64, headline(&r.record))).collect();
    let points: Vec<CostPoint> = pareto_labels(&pts)
        .into_iter()
        .zip(&pts)
        .map(|(label, &(cost, accuracy))| CostPoint { cost: cost / 1e9, accuracy, label })
        .collect();
    plot_accuracy_vs_cost(&out.join("plots").join("accuracy_vs_flops.svg"), &points, &cfg.name, "GFLOPs", "robust accuracy (%)", &hash)?;
    Ok(records)
}

/// Robust accuracy under the last listed attack, or clean accuracy when
/// no attack is configured.
fn headline(r: &RobustRunRecord) -> f64 {
    r.robust_acc.values().last().copied().unwrap_or(r.clean_acc)
}

fn open_trainer(cfg: &ExperimentConfig, spec: &NetworkSpec, dir: &Path, seed: u64, mode: RunMode) -> Result<Trainer<f32>> {
    let hash = cfg.hash();
    let latest = dir.join("checkpoint.rbn");
    let prev = dir.join("checkpoint.prev.rbn");
    let metrics = dir.join("metrics.csv");
    let try_load = |p: &Path| -> Result<Trainer<f32>> {
        let loaded = load_checkpoint::<f32>(p)?;
        if loaded.config_hash.as_deref() != Some(hash.as_str()) {
            return Err(IoError::Conflict(format!("{} was written by another config", p.display())));
        }
        Ok(Trainer::from_checkpoint(&loaded.checkpoint)?)
    };
    let trainer = if latest.exists() {
        match try_load(&latest) {
            Ok(t) => t,
            Err(e) if mode == RunMode::Resume && prev.exists() => {
                warn!("{}: {e}; falling back to the previous checkpoint", latest.display());
                try_load(&prev)?
            }
            Err(e) => return Err(IoError::Conflict(format!("{e}; rerun with resume or clean"))),
        }
    } else if prev.exists() {
        // Interrupted between rotating and writing the latest checkpoint.
        if mode != RunMode::Resume {
            return Err(IoError::Conflict(format!("{} lacks its latest checkpoint; rerun with resume or clean", dir.display())));
        }
        try_load(&prev)?
    } else if metrics_rows(&metrics)? > 0 {
        return Err(IoError::Conflict(format!("{} has metrics but no checkpoint; rerun with clean", dir.display())));
    } else {
        Trainer::new(build_network::<f32>(spec, seed)?, cfg.recipe.clone(), seed)?
    };
    let rows = metrics_rows(&metrics)?;
    let done = trainer.epoch();
    if rows > done {
        if mode != RunMode::Resume {
            return Err(IoError::Conflict(format!(
                "{} logs {rows} epochs but the checkpoint holds {done}; rerun with resume or clean",
                metrics.display()
            )));
        }
        fs::remove_file(&metrics).map_err(io_err(&metrics))?;
        append_metrics(&metrics, &trainer.metrics()[..done])?;
    } else if rows < done {
        append_metrics(&metrics, &trainer.metrics()[rows..done])?;
    }
    Ok(trainer)
}

fn run_seed(cfg: &ExperimentConfig, spec: &NetworkSpec, data: &DatasetHandle, seed: u64, mode: RunMode) -> Result<StoredRecord> {
    let hash = cfg.hash();
    let dir = seed_dir(&cfg.output_dir, seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let started = Instant::now();
    let mut trainer = open_trainer(cfg, spec, &dir, seed, mode)?;
    let latest = dir.join("checkpoint.rbn");
    let prev = dir.join("checkpoint.prev.rbn");
    let metrics = dir.join("metrics.csv");
    let mut logged = trainer.epoch();
    while !trainer.is_finished() {
        let m = trainer.run_epoch(data)?;
        info!("seed {seed} epoch {}: loss {:.4} clean {:.1} robust {:.1}", m.epoch, m.loss, m.clean_acc, m.robust_acc);
        if trainer.epoch() % cfg.checkpoint_every == 0 || trainer.is_finished() {
            if latest.exists() {
                fs::rename(&latest, &prev).map_err(io_err(&prev))?;
            }
            save_checkpoint(&latest, &trainer.checkpoint(), Some(&hash))?;
            append_metrics(&metrics, &trainer.metrics()[logged..])?;
            logged = trainer.epoch();
        }
    }
    let outcome = trainer.finish();
    if let Some(ema) = &outcome.ema_network {
        let mut c = outcome.checkpoint.clone();
        for (p, e) in c.params.iter_mut().zip(ema.params()) {
            p.value = e.value.clone();
        }
        for (b, e) in c.buffers.iter_mut().zip(ema.buffers()) {
            b.value = e.value.clone();
        }
        save_checkpoint(&dir.join("checkpoint-ema.rbn"), &c, Some(&hash))?;
    }
    let model = outcome.ema_network.as_ref().unwrap_or(&outcome.network);
    let acc = evaluate(model, data.split(SplitKind::Test), &cfg.attacks, cfg.eval_batch_size, &mut eval_rng(seed))?;
    let mut record = RobustRunRecord::for_spec(spec, &cfg.recipe.id(), seed, &acc)?;
    record.wall_time = started.elapsed().as_secs_f64();
    let stored = StoredRecord { config_hash: hash.clone(), record };
    plot_metrics(&cfg.output_dir.join("plots").join(format!("metrics-seed-{seed}.svg")), &outcome.metrics, &format!("{} seed {seed}", cfg.name), &hash)?;
    write_atomic(&dir.join("record.json"), &serde_json::to_vec_pretty(&stored)?)?;
    Ok(stored)
}
