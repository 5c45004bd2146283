//! Prediction-level terms: softened softmax, cross-entropy, KL mimicry, the
//! mutual-learning base objective and the fusion-classifier objective.

use ndarray::{Array2, Axis, Zip};

use super::types::{Logits, LossTerm, LossValue, SoftPrediction};
use crate::error::{Error, Result};

/// Floor applied to predicted probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

fn check_temperature(t: f64) -> Result<()> {
    if !t.is_finite() || t < 1.0 {
        return Err(Error::config(format!("temperature must be finite and >= 1, got {t}")));
    }
    Ok(())
}

fn softmax_rows(z: &Array2<f64>, t: f64) -> Array2<f64> {
    let mut out = z.mapv(|v| v / t);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn check_labels(labels: &[usize], z: &Logits) -> Result<()> {
    if labels.len() != z.batch() {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {}",
            labels.len(),
            z.batch()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= z.classes()) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", z.classes())));
    }
    Ok(())
}

fn check_same_shape(a: &Logits, b: &Logits) -> Result<()> {
    if a.values().dim() != b.values().dim() {
        return Err(Error::invalid(format!(
            "logit shapes {:?} and {:?} differ",
            a.values().dim(),
            b.values().dim()
        )));
    }
    Ok(())
}

/// Softmax of `z / T`, max-shifted for stability.
pub fn softened_prediction(z: &Logits, t: f64) -> Result<SoftPrediction> {
    check_temperature(t)?;
    if z.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits contain non-finite entries"));
    }
    Ok(SoftPrediction::from_raw(softmax_rows(z.values(), t), t))
}

/// Batch-mean of `KL(target || pred)` with `pred` floored at [`LOG_EPS`].
pub fn kl_divergence(target: &SoftPrediction, pred: &SoftPrediction) -> Result<LossValue> {
    if target.probs().dim() != pred.probs().dim() {
        return Err(Error::invalid(format!(
            "distribution shapes {:?} and {:?} differ",
            target.probs().dim(),
            pred.probs().dim()
        )));
    }
    let batch = target.probs().nrows() as f64;
    let mut total = 0.0;
    Zip::from(target.probs()).and(pred.probs()).for_each(|&t, &p| {
        if t > 0.0 {
            total += t * (t.ln() - p.max(LOG_EPS).ln());
        }
    });
    Ok(LossValue::single("kl", total / batch))
}

/// Gradient of `kl_divergence(target, softened_prediction(z, T))` w.r.t. `z`.
pub fn kl_divergence_grad(target: &SoftPrediction, z: &Logits, t: f64) -> Result<Array2<f64>> {
    check_temperature(t)?;
    if target.probs().dim() != z.values().dim() {
        return Err(Error::invalid("target and logits have different shapes"));
    }
    let batch = z.batch() as f64;
    let p = softmax_rows(z.values(), t);
    Ok((p - target.probs()) / (t * batch))
}

/// Batch-mean negative log-likelihood of `labels` under `softmax(z)`.
pub fn cross_entropy(labels: &[usize], z: &Logits) -> Result<LossValue> {
    check_labels(labels, z)?;
    let mut total = 0.0;
    for (row, &y) in z.values().axis_iter(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Ok(LossValue::single("ce", total / z.batch() as f64))
}

pub fn cross_entropy_grad(labels: &[usize], z: &Logits) -> Result<Array2<f64>> {
    check_labels(labels, z)?;
    let batch = z.batch() as f64;
    let mut g = softmax_rows(z.values(), 1.0);
    for (mut row, &y) in g.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= 1.0;
    }
    Ok(g / batch)
}

/// Mutual-learning objective of one common student: cross-entropy on the
/// labels plus `T^2`-scaled KL mimicry of every peer's softened prediction.
pub fn base_loss(labels: &[usize], z_i: &Logits, peers: &[Logits], t: f64) -> Result<LossValue> {
    let ce = cross_entropy(labels, z_i)?;
    let p_i = softened_prediction(z_i, t)?;
    if peers.is_empty() {
        log::warn!("base loss called without peers; KL term is zero");
    }
    let mut kl = 0.0;
    for peer in peers {
        check_same_shape(z_i, peer)?;
        kl += kl_divergence(&softened_prediction(peer, t)?, &p_i)?.scalar();
    }
    Ok(LossValue::from_terms(vec![
        LossTerm {
            name: "ce".into(),
            weight: 1.0,
            value: ce.scalar(),
        },
        LossTerm {
            name: "kl".into(),
            weight: t * t,
            value: kl,
        },
    ]))
}

/// Gradient of [`base_loss`] w.r.t. `z_i` (peers are constants).
pub fn base_loss_grad(labels: &[usize], z_i: &Logits, peers: &[Logits], t: f64) -> Result<Array2<f64>> {
    let mut g = cross_entropy_grad(labels, z_i)?;
    for peer in peers {
        check_same_shape(z_i, peer)?;
        let target = softened_prediction(peer, t)?;
        g = g + kl_divergence_grad(&target, z_i, t)? * (t * t);
    }
    Ok(g)
}

/// Elementwise mean of the students' logits.
pub fn ensemble_logits(zs: &[Logits]) -> Result<Logits> {
    let first = zs.first().ok_or_else(|| Error::invalid("ensemble of an empty list"))?;
    let mut acc = first.values().clone();
    for z in &zs[1..] {
        check_same_shape(first, z)?;
        acc = acc + z.values();
    }
    Logits::new(acc / zs.len() as f64)
}

/// Fusion-classifier objective: cross-entropy plus `T^2`-scaled mimicry of
/// the (constant) ensemble logits.
pub fn fusion_loss(labels: &[usize], z_f: &Logits, z_e: &Logits, t: f64) -> Result<LossValue> {
    check_same_shape(z_f, z_e)?;
    let ce = cross_entropy(labels, z_f)?;
    let kl = kl_divergence(&softened_prediction(z_e, t)?, &softened_prediction(z_f, t)?)?;
    Ok(LossValue::combine(&[("", 1.0, &ce), ("", t * t, &kl)]))
}

pub fn fusion_loss_grad(labels: &[usize], z_f: &Logits, z_e: &Logits, t: f64) -> Result<Array2<f64>> {
    check_same_shape(z_f, z_e)?;
    let target = softened_prediction(z_e, t)?;
    Ok(cross_entropy_grad(labels, z_f)? + kl_divergence_grad(&target, z_f, t)? * (t * t))
}
