//! Accuracy columns, the inter-student cosine diagnostic and attention
//! export.

mod export;
mod metrics;

pub use export::{export_attention, min_max, read_attention, AttentionIndex, AttentionIndexEntry};
pub use metrics::{ens_accuracy, student_cosine, top1_accuracy};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledImageSet, Normalization};
use crate::error::{Error, Result};
use crate::networks::{NormMode, StudentBackbone, StudentGroup};
use crate::tensor::{Tape, Tensor};
use crate::trainer::MethodVariant;

/// Which vectors the cosine diagnostic compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CosineRepresentation {
    /// Flattened final feature maps.
    #[default]
    Features,
    /// Softmax outputs at temperature 1.
    Softmax,
}

/// Evaluation-mode outputs of one network over a whole set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs {
    /// (N, K).
    pub logits: Array2<f64>,
    /// (N, C * H * W) flattened final feature maps.
    pub features: Array2<f64>,
    /// `(C, H, W)` of one final feature map.
    pub feature_shape: (usize, usize, usize),
}

impl ModelOutputs {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect()
    }

    pub fn softmax(&self) -> Array2<f64> {
        let mut p = self.logits.clone();
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        p
    }
}

/// Normalized images `start..end` of `set` as one tensor.
pub(crate) fn image_batch(set: &LabeledImageSet, norm: &Normalization, start: usize, end: usize) -> Tensor {
    let shape = set.image_shape();
    let per = set.image_len();
    let mut data = vec![0.0f32; (end - start) * per];
    for (slot, i) in data.chunks_exact_mut(per).zip(start..end) {
        norm.apply(set.image(i), shape, slot);
    }
    let (c, h, w) = shape;
    Tensor::new(vec![end - start, c, h, w], data).expect("shape")
}

/// Runs `net` in evaluation mode over `set` in chunks of `batch_size`.
pub fn predict(net: &StudentBackbone, set: &LabeledImageSet, norm: &Normalization, batch_size: usize) -> Result<ModelOutputs> {
    if set.is_empty() || batch_size == 0 {
        return Err(Error::invalid("prediction needs a non-empty set and batch"));
    }
    let (c, h, w) = net.spec().final_shape();
    let k = net.spec().classes;
    let mut logits = Array2::zeros((set.len(), k));
    let mut features = Array2::zeros((set.len(), c * h * w));
    for start in (0..set.len()).step_by(batch_size) {
        let end = (start + batch_size).min(set.len());
        let mut tape = Tape::new();
        let x = tape.constant(image_batch(set, norm, start, end));
        let bound = net.params.bind(&mut tape, false);
        let out = net.forward_with_taps(&mut tape, &bound, x, NormMode::Eval)?;
        let z = tape.value(out.logits).data();
        let f = tape.value(*out.taps.last().expect("tap")).data();
        for (r, i) in (start..end).enumerate() {
            for j in 0..k {
                logits[[i, j]] = z[r * k + j] as f64;
            }
            let per = c * h * w;
            for j in 0..per {
                features[[i, j]] = f[r * per + j] as f64;
            }
        }
    }
    Ok(ModelOutputs {
        logits,
        features,
        feature_shape: (c, h, w),
    })
}

/// Fusion-classifier logits from the students' evaluation outputs.
pub fn predict_fusion(group: &StudentGroup, students: &[ModelOutputs], batch_size: usize) -> Result<Array2<f64>> {
    let n = students.first().map_or(0, |s| s.logits.nrows());
    let (c, h, w) = students
        .first()
        .ok_or_else(|| Error::invalid("fusion needs student outputs"))?
        .feature_shape;
    let k = group.spec().classes;
    let mut out = Array2::zeros((n, k));
    for start in (0..n).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(n);
        let mut tape = Tape::new();
        let feats: Vec<_> = students
            .iter()
            .map(|s| {
                let data = s
                    .features
                    .slice(ndarray::s![start..end, ..])
                    .iter()
                    .map(|&v| v as f32)
                    .collect();
                tape.constant(Tensor::new(vec![end - start, c, h, w], data).expect("shape"))
            })
            .collect();
        let bound = group.fusion.params.bind(&mut tape, false);
        let fo = group.fusion.fuse(&mut tape, &bound, &feats, NormMode::Eval)?;
        let z = tape.value(fo.logits).data();
        for (r, i) in (start..end).enumerate() {
            for j in 0..k {
                out[[i, j]] = z[r * k + j] as f64;
            }
        }
    }
    Ok(out)
}

fn argmax_rows(a: &Array2<f64>) -> Vec<usize> {
    ModelOutputs {
        logits: a.clone(),
        features: Array2::zeros((0, 0)),
        feature_shape: (0, 0, 0),
    }
    .predictions()
}

/// Accuracy columns of one evaluation. Percentages are in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Common students in chain order.
    pub student_acc: Vec<f64>,
    /// Arithmetic mean of `student_acc`.
    pub student_mean_acc: f64,
    /// Union-of-correct accuracy over the common students.
    pub ens_acc: f64,
    pub fusion_acc: Option<f64>,
    pub leader_acc: Option<f64>,
    /// Mean pairwise cosine between common students; absent for one student.
    pub cosine: Option<f64>,
    pub cosine_representation: CosineRepresentation,
    pub samples: usize,
}

/// Evaluates every component the variant reports.
pub fn evaluate_group(
    group: &StudentGroup,
    variant: MethodVariant,
    set: &LabeledImageSet,
    norm: &Normalization,
    batch_size: usize,
    representation: CosineRepresentation,
) -> Result<EvalReport> {
    let labels = set.labels();
    let outs = group
        .students
        .iter()
        .map(|s| predict(s, set, norm, batch_size))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Vec<usize>> = outs.iter().map(ModelOutputs::predictions).collect();
    let student_acc = preds
        .iter()
        .map(|p| top1_accuracy(p, labels))
        .collect::<Result<Vec<_>>>()?;
    let student_mean_acc = student_acc.iter().sum::<f64>() / student_acc.len() as f64;
    let ens_acc = ens_accuracy(&preds, labels)?;
    let fusion_acc = if variant.has_fusion() {
        Some(top1_accuracy(&argmax_rows(&predict_fusion(group, &outs, batch_size)?), labels)?)
    } else {
        None
    };
    let leader_acc = if variant.has_leader() {
        Some(top1_accuracy(&predict(&group.leader, set, norm, batch_size)?.predictions(), labels)?)
    } else {
        None
    };
    let cosine = if outs.len() >= 2 {
        let reps: Vec<Array2<f64>> = match representation {
            CosineRepresentation::Features => outs.iter().map(|o| o.features.clone()).collect(),
            CosineRepresentation::Softmax => outs.iter().map(ModelOutputs::softmax).collect(),
        };
        Some(student_cosine(&reps)?)
    } else {
        None
    };
    Ok(EvalReport {
        student_acc,
        student_mean_acc,
        ens_acc,
        fusion_acc,
        leader_acc,
        cosine,
        cosine_representation: representation,
        samples: set.len(),
    })
}
