use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::set::LabeledImageSet;
use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Bytes per record: label byte(s) then 3072 plane-major pixels.
    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    fn files(self) -> (Vec<&'static str>, &'static str, usize, usize) {
        match self {
            CifarVariant::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
                10_000,
                10_000,
            ),
            CifarVariant::Cifar100 => (vec!["train.bin"], "test.bin", 50_000, 10_000),
        }
    }
}

/// Decodes a whole file worth of records. The fine label is used for
/// CIFAR-100.
pub fn decode_records(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<LabeledImageSet> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::format(path, "file holds no records"));
    }
    if bytes.len() % rec != 0 {
        let offset = bytes.len() / rec * rec;
        return Err(Error::io(
            path,
            io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!(
                    "truncated record at byte offset {offset}: {} of {rec} bytes present",
                    bytes.len() - offset
                ),
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::with_capacity(n);
    let lb = variant.label_bytes();
    for (r, chunk) in bytes.chunks_exact(rec).enumerate() {
        let fine = chunk[lb - 1] as usize;
        if fine >= variant.classes() {
            return Err(Error::format(
                path,
                format!("label {fine} at byte offset {} exceeds {} classes", r * rec + lb - 1, variant.classes()),
            ));
        }
        if lb == 2 {
            coarse.push(chunk[0]);
        }
        labels.push(fine);
        images.extend_from_slice(&chunk[lb..]);
    }
    let set = LabeledImageSet::new(images, labels, (3, CIFAR_SIDE, CIFAR_SIDE), variant.classes())?;
    Ok(if lb == 2 { set.with_coarse(coarse) } else { set })
}

/// Inverse of [`decode_records`]. CIFAR-100 sets without coarse labels get
/// coarse label 0.
pub fn encode_records(set: &LabeledImageSet, variant: CifarVariant) -> Result<Vec<u8>> {
    if set.image_shape() != (3, CIFAR_SIDE, CIFAR_SIDE) || set.classes() > variant.classes() {
        return Err(Error::invalid("set does not have CIFAR geometry"));
    }
    let mut out = Vec::with_capacity(set.len() * variant.record_len());
    for i in 0..set.len() {
        if variant == CifarVariant::Cifar100 {
            out.push(set.coarse().map_or(0, |c| c[i]));
        }
        out.push(set.labels()[i] as u8);
        out.extend_from_slice(set.image(i));
    }
    Ok(out)
}

fn read_split(dir: &Path, names: &[&str], variant: CifarVariant, per_file: usize) -> Result<LabeledImageSet> {
    let mut bytes = Vec::new();
    for name in names {
        let path: PathBuf = dir.join(name);
        let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = per_file * variant.record_len();
        if data.len() % variant.record_len() == 0 && data.len() != expected {
            return Err(Error::format(
                &path,
                format!(
                    "expected {per_file} records ({expected} bytes), found {} bytes",
                    data.len()
                ),
            ));
        }
        decode_records(&data, variant, &path)?;
        bytes.extend_from_slice(&data);
    }
    decode_records(&bytes, variant, &dir.join(names[0]))
}

/// Loads the canonical binary distribution from `dir`.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (train_files, test_file, per_train, per_test) = variant.files();
    let train = read_split(dir, &train_files, variant, per_train)?;
    let test = read_split(dir, &[test_file], variant, per_test)?;
    Ok((train, test))
}
