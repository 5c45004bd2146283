//! Spatial attention, the attention shift used for diversity enhancement,
//! and the map from a shifted attention back to a feature map.

use ndarray::{Array3, Array4, Axis, Zip};

use super::types::{AttentionMap, FeatureMap};
use crate::error::{Error, Result};

/// Guard in the attention-to-feature ratio.
pub const RATIO_EPS: f64 = 1e-8;

/// Sum of squared activations over channels: (B, C, H, W) → (B, H, W).
pub fn attention_map(f: &FeatureMap) -> AttentionMap {
    let a = f.data().map_axis(Axis(1), |col| col.iter().map(|v| v * v).sum::<f64>());
    AttentionMap::from_raw(a.as_standard_layout().into_owned())
}

/// Pulls a gradient on [`attention_map`]'s output back onto its input.
pub fn attention_map_vjp(f: &FeatureMap, grad: &AttentionMap) -> Result<FeatureMap> {
    let (b, _, h, w) = f.dims();
    if grad.dims() != (b, h, w) {
        return Err(Error::invalid(format!(
            "attention gradient {:?} does not match feature map {:?}",
            grad.dims(),
            f.dims()
        )));
    }
    let mut out = f.data().clone();
    for (mut sample, g) in out.axis_iter_mut(Axis(0)).zip(grad.data().axis_iter(Axis(0))) {
        for mut channel in sample.axis_iter_mut(Axis(0)) {
            Zip::from(&mut channel).and(&g).for_each(|v, &gv| *v *= 2.0 * gv);
        }
    }
    Ok(FeatureMap::from_raw(out))
}

/// Split point of the attention shift: the `ceil(n / 3)`-th smallest value.
pub fn diversity_threshold(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = values.len().div_ceil(3);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted[k - 1]
}

/// Shifts attention towards weaker regions.
///
/// Per sample, with `P` the L2 norm of the map and `t` from
/// [`diversity_threshold`]: entries below `t` are kept and entries at or
/// above `t` become `P - A`. This is `(P/2 - A) * sign(A - t) + P/2` with
/// `sign(0) = +1`.
pub fn diversify_attention(a: &AttentionMap) -> AttentionMap {
    let mut out = a.data().clone();
    for mut sample in out.axis_iter_mut(Axis(0)) {
        let values: Vec<f64> = sample.iter().copied().collect();
        let p = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if p == 0.0 {
            log::debug!("all-zero attention map passed through the attention shift unchanged");
            continue;
        }
        let t = diversity_threshold(&values);
        sample.mapv_inplace(|v| if v < t { v } else { p - v });
    }
    AttentionMap::from_raw(out)
}

/// Rescales each pixel's channel vector so the attention of the result is
/// `target`: `F[b, c, h, w] * sqrt(target / (A + eps))` with `A` the
/// attention of `f`.
pub fn attention_to_feature(f: &FeatureMap, a: &AttentionMap, target: &AttentionMap) -> Result<FeatureMap> {
    let (b, _, h, w) = f.dims();
    if a.dims() != (b, h, w) || target.dims() != (b, h, w) {
        return Err(Error::invalid(format!(
            "attention shapes {:?}/{:?} do not match feature map {:?}",
            a.dims(),
            target.dims(),
            f.dims()
        )));
    }
    let scale: Array3<f64> = Zip::from(a.data())
        .and(target.data())
        .map_collect(|&src, &dst| (dst / (src + RATIO_EPS)).sqrt());
    let mut out: Array4<f64> = f.data().clone();
    for (mut sample, s) in out.axis_iter_mut(Axis(0)).zip(scale.axis_iter(Axis(0))) {
        for mut channel in sample.axis_iter_mut(Axis(0)) {
            Zip::from(&mut channel).and(&s).for_each(|v, &sv| *v *= sv);
        }
    }
    Ok(FeatureMap::from_raw(out))
}
