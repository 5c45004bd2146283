use rand::Rng;
use serde::{Deserialize, Serialize};

use super::set::LabeledImageSet;

/// Per-channel affine map `(x / 255 - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Channel statistics of a whole set.
    pub fn from_set(set: &LabeledImageSet) -> Self {
        let (c, h, w) = set.image_shape();
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..set.len() {
            for (ch, plane) in set.image(i).chunks_exact(hw).enumerate() {
                for &p in plane {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (set.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Normalization {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0 / 255.0; channels],
        }
    }

    /// Writes the normalized image into `out`.
    pub fn apply(&self, image: &[u8], (c, h, w): (usize, usize, usize), out: &mut [f32]) {
        let hw = h * w;
        for ch in 0..c {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for (o, &p) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&image[ch * hw..(ch + 1) * hw]) {
                *o = (p as f32 / 255.0 - m) / s;
            }
        }
    }
}

/// Zero-pad, random crop back to the original size, random horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub pad: usize,
    pub flip_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy { pad: 4, flip_prob: 0.5 }
    }
}

impl AugmentationPolicy {
    /// Transforms raw pixels; draws the crop offsets then the flip from `rng`.
    pub fn apply(&self, image: &[u8], (c, h, w): (usize, usize, usize), rng: &mut impl Rng) -> Vec<u8> {
        let dy = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let dx = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
        let flip = rng.random_bool(self.flip_prob.clamp(0.0, 1.0));
        let mut out = vec![0u8; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        out
    }
}
