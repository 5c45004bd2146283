use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::set::LabeledImageSet;
use crate::error::{Error, Result};
use crate::seeds;

const BLOBS_PER_CLASS: usize = 3;
pub const DEFAULT_DIFFICULTY: f64 = 0.3;

/// Class-conditional Gaussian-blob images.
///
/// Every class owns a template of colored blobs. A sample renders its class
/// template with jittered positions and amplitudes, one faint blob borrowed
/// from another class, and pixel noise; `difficulty` in `[0, 1]` scales all
/// three perturbations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub channels: usize,
    pub image_size: usize,
    #[serde(default = "default_difficulty")]
    pub difficulty: f64,
    pub seed: u64,
}

fn default_difficulty() -> f64 {
    DEFAULT_DIFFICULTY
}

#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: Vec<f64>,
}

fn templates(spec: &SyntheticSpec) -> Vec<Vec<Blob>> {
    let mut rng = seeds::stream(spec.seed, "synthetic/templates");
    let s = spec.image_size as f64;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..spec.classes)
        .map(|_| {
            (0..BLOBS_PER_CLASS)
                .map(|_| {
                    let mut color: Vec<f64> = (0..spec.channels).map(|_| normal.sample(&mut rng)).collect();
                    let norm = color.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                    color.iter_mut().for_each(|v| *v /= norm);
                    Blob {
                        cy: rng.random_range(0.15..0.85) * s,
                        cx: rng.random_range(0.15..0.85) * s,
                        sigma: rng.random_range(0.08..0.2) * s,
                        color,
                    }
                })
                .collect()
        })
        .collect()
}

fn render(spec: &SyntheticSpec, templates: &[Vec<Blob>], label: usize, rng: &mut impl Rng, out: &mut [u8]) {
    let (c, s) = (spec.channels, spec.image_size);
    let d = spec.difficulty;
    let jitter = Normal::new(0.0, (d * 0.12 * s as f64).max(1e-9)).expect("std");
    let noise = Normal::new(0.0, 0.1 + 0.6 * d).expect("std");
    let mut blobs: Vec<(Blob, f64)> = templates[label]
        .iter()
        .map(|b| {
            let mut b = b.clone();
            b.cy += jitter.sample(rng);
            b.cx += jitter.sample(rng);
            (b, rng.random_range(1.0 - 0.6 * d..=1.0 + 0.6 * d))
        })
        .collect();
    if spec.classes > 1 {
        let other = (label + rng.random_range(1..spec.classes)) % spec.classes;
        let b = templates[other][rng.random_range(0..BLOBS_PER_CLASS)].clone();
        blobs.push((b, d * rng.random_range(0.5..=1.0)));
    }
    let mut field = vec![0.0f64; c * s * s];
    for (b, amp) in &blobs {
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for y in 0..s {
            for x in 0..s {
                let r2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                let v = amp * (-r2 * inv).exp();
                for ch in 0..c {
                    field[(ch * s + y) * s + x] += v * b.color[ch];
                }
            }
        }
    }
    for (o, f) in out.iter_mut().zip(&field) {
        *o = (128.0 + 90.0 * (f + noise.sample(rng))).round().clamp(0.0, 255.0) as u8;
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if self.classes > 256 || self.channels == 0 || self.image_size < 4 {
            return Err(Error::config("synthetic data needs <= 256 classes, >= 1 channel and side >= 4"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("synthetic splits must be non-empty"));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::config(format!("difficulty {} is outside [0, 1]", self.difficulty)));
        }
        Ok(())
    }

    /// One split; labels cycle through the classes so every split is
    /// balanced up to one sample.
    pub fn generate_split(&self, split: &str, n: usize) -> Result<LabeledImageSet> {
        self.validate()?;
        let t = templates(self);
        let per = self.channels * self.image_size * self.image_size;
        let mut images = vec![0u8; n * per];
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        for (i, img) in images.chunks_exact_mut(per).enumerate() {
            let mut rng = seeds::stream(self.seed, &format!("synthetic/{split}/{i}"));
            render(self, &t, labels[i], &mut rng, img);
        }
        LabeledImageSet::new(
            images,
            labels,
            (self.channels, self.image_size, self.image_size),
            self.classes,
        )
    }

    pub fn generate(&self) -> Result<(LabeledImageSet, LabeledImageSet)> {
        Ok((
            self.generate_split("train", self.train_size)?,
            self.generate_split("test", self.test_size)?,
        ))
    }

    fn cache_key(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Reuses `dir/synthetic-<key>.bin` when its sidecar matches this spec
    /// and its checksum verifies; regenerates and rewrites it otherwise.
    pub fn load_or_generate(&self, dir: &Path) -> Result<(LabeledImageSet, LabeledImageSet)> {
        let key = self.cache_key();
        let bin = dir.join(format!("synthetic-{key}.bin"));
        let side = dir.join(format!("synthetic-{key}.json"));
        if let Some(sets) = self.try_load(&bin, &side) {
            return Ok(sets);
        }
        let (train, test) = self.generate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes = [train.images(), test.images()].concat();
        let sidecar = Sidecar {
            spec: self.clone(),
            train_shape: [train.len(), self.channels, self.image_size, self.image_size],
            test_shape: [test.len(), self.channels, self.image_size, self.image_size],
            seed: self.seed,
            sha256: hex::encode(Sha256::digest(&bytes)),
        };
        fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let json = serde_json::to_string_pretty(&sidecar).expect("serializable");
        fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok((train, test))
    }

    fn try_load(&self, bin: &Path, side: &Path) -> Option<(LabeledImageSet, LabeledImageSet)> {
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(side).ok()?).ok()?;
        if sidecar.spec != *self {
            return None;
        }
        let bytes = fs::read(bin).ok()?;
        if hex::encode(Sha256::digest(&bytes)) != sidecar.sha256 {
            log::warn!("synthetic cache {} failed its checksum; regenerating", bin.display());
            return None;
        }
        let per = self.channels * self.image_size * self.image_size;
        let split = self.train_size * per;
        if bytes.len() != split + self.test_size * per {
            return None;
        }
        let shape = (self.channels, self.image_size, self.image_size);
        let labels = |n: usize| (0..n).map(|i| i % self.classes).collect();
        let train = LabeledImageSet::new(bytes[..split].to_vec(), labels(self.train_size), shape, self.classes).ok()?;
        let test = LabeledImageSet::new(bytes[split..].to_vec(), labels(self.test_size), shape, self.classes).ok()?;
        Some((train, test))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SyntheticSpec,
    train_shape: [usize; 4],
    test_shape: [usize; 4],
    seed: u64,
    sha256: String,
}

/// A single split of `n` three-channel `h x w` images at the default
/// difficulty. Only square images are supported.
pub fn synthetic_set(classes: usize, n: usize, h: usize, w: usize, seed: u64) -> Result<LabeledImageSet> {
    if h != w {
        return Err(Error::invalid(format!("synthetic images must be square, got {h}x{w}")));
    }
    SyntheticSpec {
        classes,
        train_size: n,
        test_size: 1,
        channels: 3,
        image_size: h,
        difficulty: DEFAULT_DIFFICULTY,
        seed,
    }
    .generate_split("train", n)
}
