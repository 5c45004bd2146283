use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image_batch;
use crate::data::{LabeledImageSet, Normalization};
use crate::distill_math::{attention_map, FeatureMap, SampleMap};
use crate::error::{Error, Result};
use crate::networks::{NormMode, StudentBackbone};
use crate::tensor::Tape;

pub const ATTENTION_BIN: &str = "attention.bin";
pub const ATTENTION_INDEX: &str = "attention.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionIndexEntry {
    /// Position of the sample in the source set.
    pub sample: usize,
    /// Tap level, 1-based from the shallowest.
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// Offset into the binary file, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionIndex {
    pub dtype: String,
    pub normalization: String,
    pub maps: Vec<AttentionIndexEntry>,
}

/// Min-max rescaling to `[0, 1]`; constant maps become all zero.
pub fn min_max(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
}

/// Writes every tap's attention map for the chosen samples into `dir` as
/// little-endian `f32` data plus a JSON index, sample-major then level.
pub fn export_attention(
    net: &StudentBackbone,
    set: &LabeledImageSet,
    samples: &[usize],
    norm: &Normalization,
    dir: &Path,
) -> Result<AttentionIndex> {
    if let Some(&bad) = samples.iter().find(|&&i| i >= set.len()) {
        return Err(Error::invalid(format!("sample {bad} is outside a set of {}", set.len())));
    }
    let mut bytes = Vec::new();
    let mut maps = Vec::new();
    let mut offset = 0;
    for &i in samples {
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(set, norm, i, i + 1));
        let bound = net.params.bind(&mut tape, false);
        let out = net.forward_with_taps(&mut tape, &bound, x, NormMode::Eval)?;
        for (m, &v) in out.taps.iter().enumerate() {
            let f = FeatureMap::new(tape.value(v).to_array4()?)?;
            let a = attention_map(&f);
            let (_, h, w) = a.dims();
            for x in min_max(a.flat()) {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            maps.push(AttentionIndexEntry {
                sample: i,
                level: m + 1,
                height: h,
                width: w,
                offset,
            });
            offset += h * w;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bin = dir.join(ATTENTION_BIN);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let index = AttentionIndex {
        dtype: "f32-le".into(),
        normalization: "min-max per map; constant maps are zero".into(),
        maps,
    };
    let idx = dir.join(ATTENTION_INDEX);
    fs::write(&idx, serde_json::to_string_pretty(&index).expect("serializable")).map_err(|e| Error::io(&idx, e))?;
    Ok(index)
}

/// Reads back an export: the index and one vector per map.
pub fn read_attention(dir: &Path) -> Result<(AttentionIndex, Vec<Vec<f32>>)> {
    let idx_path = dir.join(ATTENTION_INDEX);
    let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let index: AttentionIndex =
        serde_json::from_str(&text).map_err(|e| Error::format(&idx_path, e.to_string()))?;
    let bin = dir.join(ATTENTION_BIN);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let maps = index
        .maps
        .iter()
        .map(|e| {
            floats
                .get(e.offset..e.offset + e.height * e.width)
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::format(&bin, format!("map at offset {} runs past the end", e.offset)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, maps))
}
