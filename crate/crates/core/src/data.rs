//! In-memory image datasets, batching, augmentation and synthetic data.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

/// Images `[N, 3, R, R]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub classes: usize,
    pub resolution: usize,
    pub train: Split,
    pub test: Split,
}

impl DatasetHandle {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub y: Vec<usize>,
}

/// Pixels of padding for the random-crop augmentation.
pub const CROP_PAD: usize = 4;

impl Split {
    pub fn new(kind: SplitKind, images: Vec<f32>, labels: Vec<usize>, resolution: usize) -> Result<Self> {
        let per = 3 * resolution * resolution;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Shape {
                op: "split",
                detail: format!("{} pixels for {} labels at resolution {resolution}", images.len(), labels.len()),
            });
        }
        Ok(Self { kind, images, labels, resolution })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// First `n` examples (all if fewer).
    pub fn take(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            kind: self.kind,
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
            resolution: self.resolution,
        }
    }

    /// Examples at `idx` as a batch, without augmentation.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> Batch<T> {
        let p = self.pixels();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::c(v as f64)));
        }
        let r = self.resolution;
        let x = Tensor::from_vec(&[idx.len(), 3, r, r], data).expect("split shape");
        Batch { x, y: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Sequential batches, the last one possibly short.
    pub fn batches<T: Scalar>(&self, batch_size: usize) -> impl Iterator<Item = Batch<T>> + '_ {
        let n = self.len();
        (0..n).step_by(batch_size.max(1)).map(move |s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(n)).collect();
            self.gather(&idx)
        })
    }

    /// Shuffled batches for one epoch. Augmentation (pad-4 random crop and
    /// horizontal flip) is applied only when requested and the split is a
    /// training split.
    pub fn epoch_batches<T: Scalar>(&self, batch_size: usize, rng: &mut ChaCha8Rng, augment: bool) -> Vec<Batch<T>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let augment = augment && self.kind == SplitKind::Train;
        order
            .chunks(batch_size.max(1))
            .map(|idx| {
                let mut b = self.gather::<T>(idx);
                if augment {
                    augment_batch(&mut b.x, rng);
                }
                b
            })
            .collect()
    }
}

/// Random crop from a zero-padded image plus a coin-flip horizontal mirror.
pub fn augment_batch<T: Scalar, R: Rng>(x: &mut Tensor<T>, rng: &mut R) {
    let (n, c, h, w) = x.dims4().expect("image batch");
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for b in 0..n {
        let dy = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let dx = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for oy in 0..h {
                let iy = oy as isize + dy;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..w {
                    let sx = if flip { w - 1 - ox } else { ox };
                    let ix = sx as isize + dx;
                    if ix >= 0 && ix < w as isize {
                        out[plane + oy * w + ox] = src[plane + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    x.data_mut().copy_from_slice(&out);
}

/// Class-conditional blob images.
///
/// Each class owns a Gaussian blob at a fixed centre with a per-channel sign,
/// plus a faint dense sign texture; both come from `template_seed`. A sample
/// is `clip(0.5 + a * blob + texture * tex + noise * N(0, 1))` with amplitude
/// `a = margin * (1 + jitter * N(0, 1))`. Labels cycle through the classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub resolution: usize,
    pub margin: f64,
    pub jitter: f64,
    pub texture: f64,
    pub noise: f64,
    pub template_seed: u64,
}

impl SyntheticConfig {
    pub fn new(classes: usize, resolution: usize) -> Self {
        Self { classes, resolution, margin: 0.35, jitter: 0.9, texture: 0.03, noise: 0.08, template_seed: 1234 }
    }
}

struct Templates {
    blobs: Vec<Vec<f64>>,
    textures: Vec<Vec<f64>>,
}

fn sign_normal(rng: &mut ChaCha8Rng) -> f64 {
    let v: f64 = StandardNormal.sample(rng);
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn templates(cfg: &SyntheticConfig) -> Templates {
    let r = cfg.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
    let sigma = r as f64 / 5.0;
    let mut blobs = Vec::new();
    let mut textures = Vec::new();
    for _ in 0..cfg.classes {
        let cx = rng.gen::<f64>() * (r - 1) as f64;
        let cy = rng.gen::<f64>() * (r - 1) as f64;
        let colour: Vec<f64> = (0..3).map(|_| sign_normal(&mut rng)).collect();
        let mut blob = vec![0.0; 3 * r * r];
        for (ch, &col) in colour.iter().enumerate() {
            for y in 0..r {
                for x in 0..r {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    blob[(ch * r + y) * r + x] = col * libm::exp(-d2 / (2.0 * sigma * sigma));
                }
            }
        }
        blobs.push(blob);
        textures.push((0..3 * r * r).map(|_| sign_normal(&mut rng)).collect());
    }
    Templates { blobs, textures }
}

/// `n` synthetic examples; identical for identical `(cfg, seed)`.
pub fn make_synthetic_split(cfg: &SyntheticConfig, n: usize, seed: u64, kind: SplitKind) -> Result<Split> {
    if cfg.classes < 2 {
        return Err(Error::Domain(format!("synthetic data needs at least 2 classes, got {}", cfg.classes)));
    }
    let t = templates(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 3 * cfg.resolution * cfg.resolution;
    let mut images = Vec::with_capacity(n * p);
    let labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    for &k in &labels {
        let z: f64 = StandardNormal.sample(&mut rng);
        let a = cfg.margin * (1.0 + cfg.jitter * z);
        for j in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            let v = 0.5 + a * t.blobs[k][j] + cfg.texture * t.textures[k][j] + cfg.noise * e;
            images.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Split::new(kind, images, labels, cfg.resolution)
}

/// Train and test splits drawn with seeds `2 * seed + 1` and `2 * seed + 2`.
pub fn make_synthetic(cfg: &SyntheticConfig, n_train: usize, n_test: usize, seed: u64) -> Result<DatasetHandle> {
    Ok(DatasetHandle {
        name: format!("synthetic-{}c-{}px", cfg.classes, cfg.resolution),
        classes: cfg.classes,
        resolution: cfg.resolution,
        train: make_synthetic_split(cfg, n_train, 2 * seed + 1, SplitKind::Train)?,
        test: make_synthetic_split(cfg, n_test, 2 * seed + 2, SplitKind::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let cfg = SyntheticConfig::new(2, 32);
        let a = make_synthetic_split(&cfg, 2000, 0, SplitKind::Train).unwrap();
        assert_eq!(a.len(), 2000);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 1000);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let b = make_synthetic_split(&cfg, 2000, 0, SplitKind::Train).unwrap();
        assert_eq!(a, b);
        assert!(make_synthetic_split(&SyntheticConfig::new(1, 8), 4, 0, SplitKind::Train).is_err());
    }

    #[test]
    fn augmentation_only_on_train() {
        let cfg = SyntheticConfig::new(2, 8);
        let test = make_synthetic_split(&cfg, 8, 3, SplitKind::Test).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let plain: Vec<Batch<f32>> = test.epoch_batches(4, &mut r1, false);
        let aug: Vec<Batch<f32>> = test.epoch_batches(4, &mut r2, true);
        assert_eq!(plain, aug);
        let mut train = test.clone();
        train.kind = SplitKind::Train;
        let mut r3 = ChaCha8Rng::seed_from_u64(1);
        let aug: Vec<Batch<f32>> = train.epoch_batches(4, &mut r3, true);
        assert_ne!(plain, aug);
    }

    #[test]
    fn fixed_seed_fixed_batches() {
        let cfg = SyntheticConfig::new(3, 8);
        let s = make_synthetic_split(&cfg, 30, 9, SplitKind::Train).unwrap();
        let a: Vec<Batch<f32>> = s.epoch_batches(7, &mut ChaCha8Rng::seed_from_u64(5), true);
        let b: Vec<Batch<f32>> = s.epoch_batches(7, &mut ChaCha8Rng::seed_from_u64(5), true);
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|b| b.y.len()).sum::<usize>(), 30);
    }
}
