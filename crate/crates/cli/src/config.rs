//! Experiment configuration documents (TOML) and their hash.

use std::path::{Path, PathBuf};

use robustnet_core::arch::{robust_resnet, wrn, NetworkSpec, Preset};
use robustnet_core::attacks::AttackConfig;
use robustnet_core::data::{make_synthetic, DatasetHandle, SyntheticConfig};
use robustnet_core::scaling::{solve_compound, BlockKind};
use robustnet_core::training::TrainRecipe;
use serde::{Deserialize, Serialize};

use crate::cifar::{load_cifar, CifarVariant};
use crate::error::{IoError, Result};
use crate::fsutil::{read_string, sha256_hex, write_atomic};
use crate::spec_doc::load_spec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "ROBUSTNET_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelRef {
    /// Inline network spec; its resolution and class count must match the dataset.
    Spec { spec: NetworkSpec },
    /// Path to a spec document, relative to the working directory.
    SpecFile { path: PathBuf },
    /// A named preset, optionally shrunk by dividing depths and widths
    /// (rounded up, at least 1).
    Preset {
        preset: String,
        #[serde(default = "one")]
        divisor: usize,
    },
    /// Explicit stage depths and widening factors.
    Stages { block: BlockKind, depths: [usize; 3], widths: [usize; 3] },
    /// Compound-scaled network for a FLOPs budget (solved at 32x32).
    Scaled { block: BlockKind, target_gflops: f64 },
    Wrn { depth: usize, widen: usize },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Binary CIFAR files under `root`, or under `$ROBUSTNET_DATA` when unset.
    Cifar {
        variant: CifarVariant,
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        classes: usize,
        resolution: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default)]
        margin: Option<f64>,
        #[serde(default)]
        data_seed: u64,
    },
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Cifar { variant, .. } => variant.classes(),
            DatasetConfig::Synthetic { classes, .. } => *classes,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            DatasetConfig::Cifar { .. } => crate::cifar::CIFAR_RESOLUTION,
            DatasetConfig::Synthetic { resolution, .. } => *resolution,
        }
    }

    pub fn load(&self) -> Result<DatasetHandle> {
        match self {
            DatasetConfig::Cifar { variant, root, train_limit, test_limit } => {
                let root = match root {
                    Some(r) => r.clone(),
                    None => std::env::var_os(DATA_ENV)
                        .map(PathBuf::from)
                        .ok_or_else(|| IoError::Config(format!("no dataset root: set {DATA_ENV} or dataset.root")))?,
                };
                let mut ds = load_cifar(&root, *variant)?.dataset;
                if let Some(n) = train_limit {
                    ds.train = ds.train.take(*n);
                }
                if let Some(n) = test_limit {
                    ds.test = ds.test.take(*n);
                }
                Ok(ds)
            }
            DatasetConfig::Synthetic { classes, resolution, n_train, n_test, margin, data_seed } => {
                let mut cfg = SyntheticConfig::new(*classes, *resolution);
                if let Some(m) = margin {
                    cfg.margin = *m;
                }
                Ok(make_synthetic(&cfg, *n_train, *n_test, *data_seed)?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub model: ModelRef,
    pub dataset: DatasetConfig,
    pub recipe: TrainRecipe,
    pub attacks: Vec<AttackConfig>,
    pub seeds: Vec<u64>,
    /// Excluded from the config hash.
    pub output_dir: PathBuf,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Save a checkpoint every this many epochs (and after the last one).
    #[serde(default = "one")]
    pub checkpoint_every: usize,
}

fn default_eval_batch() -> usize {
    256
}

fn shrink(v: [usize; 3], d: usize) -> [usize; 3] {
    v.map(|x| x.div_ceil(d).max(1))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(IoError::Config(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(IoError::Config(String::from("at least one seed is required")));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(IoError::Config(String::from("seeds must be distinct")));
        }
        if self.checkpoint_every == 0 || self.eval_batch_size == 0 {
            return Err(IoError::Config(String::from("checkpoint_every and eval_batch_size must be >= 1")));
        }
        self.recipe.validate()?;
        for a in &self.attacks {
            a.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// First 12 hex digits of [`hash`](Self::hash), used in file names.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    /// Resolves the model reference at the dataset's resolution and classes.
    pub fn resolve_spec(&self) -> Result<NetworkSpec> {
        let classes = self.dataset.classes();
        let res = self.dataset.resolution();
        let spec = match &self.model {
            ModelRef::Spec { spec } => spec.clone(),
            ModelRef::SpecFile { path } => load_spec(path)?,
            ModelRef::Preset { preset, divisor } => {
                let p: Preset = preset.parse()?;
                let d = (*divisor).max(1);
                let mut s = robust_resnet(shrink(p.depths(), d), shrink(p.widths(), d), classes, res);
                s.name = if d == 1 { p.name().to_string() } else { format!("{}-div{d}", p.name()) };
                s
            }
            ModelRef::Stages { block, depths, widths } => {
                let mut s = NetworkSpec::from_template("", block.template(), *depths, *widths, classes, res);
                s.name = format!(
                    "{}-D{}-{}-{}-W{}-{}-{}",
                    match block {
                        BlockKind::Robust => "robust",
                        BlockKind::Basic => "basic",
                    },
                    depths[0],
                    depths[1],
                    depths[2],
                    widths[0],
                    widths[1],
                    widths[2]
                );
                s
            }
            ModelRef::Scaled { block, target_gflops } => {
                let sol = solve_compound((target_gflops * 1e9).round() as u64, *block, 32)?;
                sol.spec(*block, classes, res)
            }
            ModelRef::Wrn { depth, widen } => {
                let mut s = wrn(*depth, *widen, classes)?;
                s.input_resolution = res;
                s
            }
        };
        if spec.num_classes != classes || spec.input_resolution != res {
            return Err(IoError::Config(format!(
                "spec expects {} classes at {}px but the dataset has {classes} at {res}px",
                spec.num_classes, spec.input_resolution
            )));
        }
        spec.validate()?;
        Ok(spec)
    }
}
