use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use robustnet::analysis::{analyze, reproduce_table};
use robustnet::checkpoint::load_checkpoint;
use robustnet::config::{DatasetConfig, ExperimentConfig, ModelRef};
use robustnet::experiment::{eval_rng, run_experiment, seed_dir, RunMode};
use robustnet::external::{export_split, merge_external, run_external};
use robustnet::fsutil::write_atomic;
use robustnet::spec_doc::save_spec;
use robustnet::tables::{cost_report_csv, merge_records, read_records, write_records, StoredRecord};
use robustnet_core::arch::NetworkSpec;
use robustnet_core::attacks::{AttackConfig, DEFAULT_EPSILON};
use robustnet_core::complexity::{cost_report, CostReport};
use robustnet_core::data::SplitKind;
use robustnet_core::evaluation::{evaluate, TOP_K};
use robustnet_core::scaling::{solve_compound_for, BlockKind};

#[derive(Parser)]
#[command(name = "robustnet", version, about = "Adversarially robust residual networks: build, scale, train, attack, analyze")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resolve a model and print its cost report.
    Build(BuildArgs),
    /// Solve compound depth/width scaling for a FLOPs budget.
    Scale(ScaleArgs),
    /// Train and evaluate every seed of an experiment config.
    Train(TrainArgs),
    /// Attack a checkpoint and write per-attack accuracy.
    Attack(AttackArgs),
    /// Re-evaluate trained seeds, optionally with an external attack command.
    Eval(EvalArgs),
    /// Ranking, Pareto and stage-ratio analyses over record CSVs.
    Analyze(AnalyzeArgs),
    /// Seed-aggregated summary table from record CSVs.
    ReproduceTable(TableArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Experiment config whose model to build.
    #[arg(long, conflicts_with_all = ["preset", "depths"])]
    config: Option<PathBuf>,
    /// Named preset (a1..a4).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 1)]
    divisor: usize,
    #[arg(long, value_delimiter = ',', requires = "widths")]
    depths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value = "robust")]
    block: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Write the per-layer cost CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the resolved spec document here.
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Args)]
struct ScaleArgs {
    /// Budget in GFLOPs (multiply-accumulates).
    #[arg(long)]
    flops: f64,
    #[arg(long, default_value = "robust")]
    block: String,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from partial state, recovering a damaged latest checkpoint.
    #[arg(long, conflicts_with = "clean")]
    resume: bool,
    /// Delete this experiment's previous artifacts first.
    #[arg(long)]
    clean: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Fgsm,
    Pgd,
    Cw,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config providing the dataset.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    family: Family,
    /// Radius, e.g. `8/255` or `0.031`.
    #[arg(long, default_value = "8/255", value_parser = parse_fraction)]
    eps: f64,
    #[arg(long, default_value = "2/255", value_parser = parse_fraction)]
    alpha: f64,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// External attack command run as `<cmd> <input_dir> <output_json>`;
    /// its result is merged into each seed's record.
    #[arg(long)]
    external_cmd: Option<String>,
    /// Replace an existing column of the same name.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Attack column ranked on, e.g. `pgd20`.
    #[arg(long)]
    attack: String,
    #[arg(long, default_value_t = TOP_K)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("bad number {s:?}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not finite"))
    }
}

fn print_cost(spec: &NetworkSpec, report: &CostReport) {
    println!("model       {}", spec.name);
    println!("params      {} ({:.2}M)", report.total_params, report.total_params as f64 / 1e6);
    println!("flops       {} ({:.3}G) at {}px", report.total_flops, report.total_flops as f64 / 1e9, report.resolution);
    println!("layers      {}", report.per_layer.len());
}

fn build(a: BuildArgs) -> anyhow::Result<()> {
    let spec = if let Some(p) = &a.config {
        ExperimentConfig::load(p)?.resolve_spec()?
    } else {
        let model = match (&a.preset, &a.depths, &a.widths) {
            (Some(p), _, _) => ModelRef::Preset { preset: p.clone(), divisor: a.divisor },
            (None, Some(d), Some(w)) if d.len() == 3 && w.len() == 3 => ModelRef::Stages {
                block: a.block.parse()?,
                depths: [d[0], d[1], d[2]],
                widths: [w[0], w[1], w[2]],
            },
            _ => bail!("give --config, --preset, or three --depths with three --widths"),
        };
        let cfg = ExperimentConfig {
            schema_version: robustnet::config::CONFIG_SCHEMA_VERSION,
            name: "build".into(),
            model,
            dataset: DatasetConfig::Synthetic { classes: a.classes, resolution: a.resolution, n_train: 0, n_test: 0, margin: None, data_seed: 0 },
            recipe: robustnet_core::training::TrainRecipe::baseline(robustnet_core::losses::LossKind::Sat, a.resolution),
            attacks: vec![],
            seeds: vec![0],
            output_dir: PathBuf::new(),
            eval_batch_size: 1,
            checkpoint_every: 1,
        };
        cfg.resolve_spec()?
    };
    let report = cost_report(&spec)?;
    print_cost(&spec, &report);
    if let Some(p) = a.csv {
        write_atomic(&p, &cost_report_csv(&report)?)?;
    }
    if let Some(p) = a.spec_out {
        save_spec(&p, &spec)?;
    }
    Ok(())
}

fn scale(a: ScaleArgs) -> anyhow::Result<()> {
    let kind: BlockKind = a.block.parse()?;
    let sol = solve_compound_for((a.flops * 1e9).round() as u64, kind, a.classes, a.resolution)?;
    println!("{}", serde_json::to_string_pretty(&sol)?);
    let spec = sol.spec(kind, a.classes, a.resolution);
    let report = cost_report(&spec)?;
    print_cost(&spec, &report);
    if let Some(p) = a.csv {
        write_atomic(&p, &cost_report_csv(&report)?)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(v) = a.epochs {
        cfg.recipe.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.recipe.batch_size = v;
    }
    if let Some(v) = a.lr_initial {
        cfg.recipe.lr_initial = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.recipe.weight_decay = v;
    }
    if let Some(v) = a.eval_batch_size {
        cfg.eval_batch_size = v;
    }
    cfg.validate()?;
    let mode = match (a.resume, a.clean) {
        (true, _) => RunMode::Resume,
        (_, true) => RunMode::Clean,
        _ => RunMode::Auto,
    };
    info!("config hash {}", cfg.hash());
    let records = run_experiment(&cfg, mode)?;
    print!("{}", String::from_utf8(robustnet::tables::records_csv(&records)?)?);
    Ok(())
}

fn attack(a: AttackArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let loaded = load_checkpoint::<f32>(&a.checkpoint)?;
    let net = loaded.checkpoint.network()?;
    let data = cfg.dataset.load()?;
    let atk = match a.family {
        Family::Fgsm => AttackConfig::fgsm(a.eps),
        Family::Pgd => AttackConfig::pgd(a.eps, a.alpha, a.steps, !a.no_random_start),
        Family::Cw => AttackConfig { alpha: a.alpha, random_start: !a.no_random_start, ..AttackConfig::cw(a.eps, a.steps) },
    };
    let acc = evaluate(&net, data.split(SplitKind::Test), &[atk], a.batch_size, &mut eval_rng(a.seed))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_hash", "attack", "examples", "accuracy"])?;
    let hash = loaded.config_hash.unwrap_or_default();
    w.write_record([hash.clone(), "clean".into(), acc.examples.to_string(), acc.clean_acc.to_string()])?;
    for (k, v) in &acc.robust_acc {
        w.write_record([hash.clone(), k.clone(), acc.examples.to_string(), v.to_string()])?;
    }
    let bytes = w.into_inner()?;
    match a.out {
        Some(p) => write_atomic(&p, &bytes)?,
        None => print!("{}", String::from_utf8(bytes)?),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    let hash = cfg.hash();
    let data = cfg.dataset.load()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, seed);
        let rec_path = dir.join("record.json");
        let mut rec: StoredRecord = serde_json::from_slice(&std::fs::read(&rec_path).with_context(|| format!("{} (train first)", rec_path.display()))?)?;
        if rec.config_hash != hash {
            bail!("{} was produced by another config", rec_path.display());
        }
        let ema = dir.join("checkpoint-ema.rbn");
        let ckpt = if ema.exists() { ema } else { dir.join("checkpoint.rbn") };
        match &a.external_cmd {
            Some(cmd) => {
                let input = dir.join("external");
                std::fs::create_dir_all(&input)?;
                let eps = cfg.attacks.first().map_or(DEFAULT_EPSILON, |x| x.epsilon);
                export_split(&input, data.split(SplitKind::Test), data.classes, eps, &abs(&ckpt)?, &hash)?;
                let res = run_external(cmd, &input, &dir.join("external-result.json"))?;
                merge_external(&mut rec, &res, a.overwrite)?;
                write_atomic(&rec_path, &serde_json::to_vec_pretty(&rec)?)?;
            }
            None => {
                let net = load_checkpoint::<f32>(&ckpt)?.checkpoint.network()?;
                let acc = evaluate(&net, data.split(SplitKind::Test), &cfg.attacks, cfg.eval_batch_size, &mut eval_rng(seed))?;
                if acc.clean_acc != rec.record.clean_acc || acc.robust_acc.iter().any(|(k, v)| rec.record.robust_acc.get(k) != Some(v)) {
                    bail!("seed {seed}: re-evaluation differs from the stored record");
                }
            }
        }
        out.push(rec);
    }
    write_records(&cfg.output_dir.join("records.csv"), &out)?;
    print!("{}", String::from_utf8(robustnet::tables::records_csv(&out)?)?);
    Ok(())
}

fn abs(p: &Path) -> anyhow::Result<PathBuf> {
    Ok(std::fs::canonicalize(p).with_context(|| p.display().to_string())?)
}

fn load_all(paths: &[PathBuf]) -> anyhow::Result<Vec<StoredRecord>> {
    let sets = paths.iter().map(|p| read_records(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(merge_records(&sets)?)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Build(a) => build(a),
        Cmd::Scale(a) => scale(a),
        Cmd::Train(a) => train(a),
        Cmd::Attack(a) => attack(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Analyze(a) => {
            std::fs::create_dir_all(&a.out)?;
            let s = analyze(&load_all(&a.records)?, &a.attack, a.top_k, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
        Cmd::ReproduceTable(a) => {
            let bytes = reproduce_table(&load_all(&a.records)?)?;
            match a.out {
                Some(p) => write_atomic(&p, &bytes)?,
                None => print!("{}", String::from_utf8(bytes)?),
            }
            Ok(())
        }
    }
}
