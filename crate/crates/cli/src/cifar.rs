//! CIFAR-10/-100 binary-format ingestion.
//!
//! Each record is the label byte(s) followed by 3072 pixels stored as three
//! 32x32 planes (R, G, B), which is already NCHW order.

use std::path::{Path, PathBuf};

use log::warn;
use robustnet_core::data::{DatasetHandle, Split, SplitKind};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};
use crate::fsutil::{read, read_string, sha256_hex};

pub const CIFAR_RESOLUTION: usize = 32;
pub const PIXELS: usize = 3 * CIFAR_RESOLUTION * CIFAR_RESOLUTION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            CifarVariant::C10 => "cifar-10-batches-bin",
            CifarVariant::C100 => "cifar-100-binary",
        }
    }

    fn files(self, kind: SplitKind) -> Vec<&'static str> {
        match (self, kind) {
            (CifarVariant::C10, SplitKind::Train) => {
                vec!["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"]
            }
            (CifarVariant::C10, SplitKind::Test) => vec!["test_batch.bin"],
            (CifarVariant::C100, SplitKind::Train) => vec!["train.bin"],
            (CifarVariant::C100, SplitKind::Test) => vec!["test.bin"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CifarVariant::C10 => "cifar10",
            CifarVariant::C100 => "cifar100",
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = IoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c10" | "cifar10" | "cifar-10" => Ok(CifarVariant::C10),
            "c100" | "cifar100" | "cifar-100" => Ok(CifarVariant::C100),
            other => Err(IoError::Config(format!("unknown CIFAR variant '{other}'"))),
        }
    }
}

/// Decodes whole records; pixels are scaled by 1/255. For CIFAR-100 the fine
/// label (second byte) is used.
pub fn parse_records(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let len = variant.record_len();
    let whole = bytes.len() / len * len;
    if whole != bytes.len() || bytes.is_empty() {
        return Err(IoError::Integrity {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!("{} bytes is not a positive multiple of the {len}-byte record", bytes.len()),
        });
    }
    let n = bytes.len() / len;
    let mut images = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(len).enumerate() {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(IoError::Integrity {
                path: path.to_path_buf(),
                offset: (i * len) as u64,
                detail: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        images.extend(rec[variant.label_bytes()..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((images, labels))
}

/// Compares a file against `<file>.sha256` when the sidecar exists. A
/// mismatch is logged and returned as a warning, not an error.
pub fn verify_checksum(path: &Path, bytes: &[u8]) -> Result<Option<String>> {
    let mut side = path.as_os_str().to_owned();
    side.push(".sha256");
    let side = PathBuf::from(side);
    if !side.exists() {
        return Ok(None);
    }
    let expected = read_string(&side)?;
    let expected = expected.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
    let actual = sha256_hex(bytes);
    if expected != actual {
        let msg = format!("{}: checksum mismatch (expected {expected}, got {actual})", path.display());
        warn!("{msg}");
        return Ok(Some(msg));
    }
    Ok(None)
}

/// Loaded dataset plus any checksum warnings raised while reading.
pub struct CifarLoad {
    pub dataset: DatasetHandle,
    pub warnings: Vec<String>,
}

fn resolve_dir(root: &Path, variant: CifarVariant) -> PathBuf {
    let nested = root.join(variant.dir_name());
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Loads the binary distribution from `root` (or `root/<archive dir>`).
pub fn load_cifar(root: &Path, variant: CifarVariant) -> Result<CifarLoad> {
    let dir = resolve_dir(root, variant);
    let mut warnings = Vec::new();
    let mut load = |kind: SplitKind| -> Result<Split> {
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for f in variant.files(kind) {
            let p = dir.join(f);
            let bytes = read(&p)?;
            warnings.extend(verify_checksum(&p, &bytes)?);
            let (im, lb) = parse_records(&bytes, variant, &p)?;
            images.extend(im);
            labels.extend(lb);
        }
        Ok(Split::new(kind, images, labels, CIFAR_RESOLUTION)?)
    };
    let train = load(SplitKind::Train)?;
    let test = load(SplitKind::Test)?;
    Ok(CifarLoad {
        dataset: DatasetHandle {
            name: variant.name().to_string(),
            classes: variant.classes(),
            resolution: CIFAR_RESOLUTION,
            train,
            test,
        },
        warnings,
    })
}
