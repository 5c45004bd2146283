//! Feature- and attention-level terms built on the normalized L2 distance.

use super::types::{AttentionMap, FeatureMap, LossValue, SampleMap};
use crate::error::{Error, Result};

/// Guard added to every norm used as a denominator.
pub const NORM_EPS: f64 = 1e-8;

fn check_pair<T: SampleMap>(a: &T, b: &T, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_levels(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: {a} levels vs {b} levels")));
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit(x: &[f64]) -> Vec<f64> {
    let d = norm(x) + NORM_EPS;
    x.iter().map(|v| v / d).collect()
}

/// Gradient of `x / (|x| + eps)` pulled back from `g`.
fn unit_vjp(x: &[f64], g: &[f64]) -> Vec<f64> {
    let n = norm(x);
    if n == 0.0 {
        return vec![0.0; x.len()];
    }
    let d = n + NORM_EPS;
    let dot: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum();
    let k = dot / (n * d);
    x.iter().zip(g).map(|(xi, gi)| (gi - xi * k) / d).collect()
}

/// Batch mean of `| a/|a| - b/|b| |` with norms taken per sample over the
/// flattened tensor. Lies in `[0, 2]`.
pub fn normalized_l2_match<T: SampleMap>(a: &T, b: &T) -> Result<LossValue> {
    check_pair(a, b, "normalized match")?;
    let batch = a.batch();
    let total: f64 = (0..batch)
        .map(|s| {
            let (ua, ub) = (unit(a.sample(s)), unit(b.sample(s)));
            ua.iter().zip(&ub).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(LossValue::single("match", total / batch as f64))
}

/// Gradients of [`normalized_l2_match`] w.r.t. both arguments.
pub fn normalized_l2_match_grad<T: SampleMap>(a: &T, b: &T) -> Result<(T, T)> {
    check_pair(a, b, "normalized match")?;
    let batch = a.batch();
    let n = a.sample_len();
    let mut ga = vec![0.0; batch * n];
    let mut gb = vec![0.0; batch * n];
    for s in 0..batch {
        let (xa, xb) = (a.sample(s), b.sample(s));
        let (ua, ub) = (unit(xa), unit(xb));
        let diff: Vec<f64> = ua.iter().zip(&ub).map(|(x, y)| x - y).collect();
        let dist = norm(&diff);
        if dist == 0.0 {
            continue;
        }
        let gu: Vec<f64> = diff.iter().map(|d| d / (dist * batch as f64)).collect();
        let neg: Vec<f64> = gu.iter().map(|v| -v).collect();
        ga[s * n..(s + 1) * n].copy_from_slice(&unit_vjp(xa, &gu));
        gb[s * n..(s + 1) * n].copy_from_slice(&unit_vjp(xb, &neg));
    }
    Ok((a.with_flat(ga), b.with_flat(gb)))
}

fn sum_of_matches<T: SampleMap>(xs: &[T], ys: &[T], what: &str) -> Result<f64> {
    check_levels(xs.len(), ys.len(), what)?;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| normalized_l2_match(x, y).map(|l| l.scalar()))
        .sum()
}

fn grads_of_matches<T: SampleMap>(xs: &[T], ys: &[T], what: &str) -> Result<Vec<T>> {
    check_levels(xs.len(), ys.len(), what)?;
    xs.iter()
        .zip(ys)
        .map(|(x, y)| normalized_l2_match_grad(x, y).map(|(g, _)| g))
        .collect()
}

/// Leader feature term: the leader's last feature map against the fused map,
/// plus its channel-aligned decoding against the concatenated student maps.
pub fn leader_feature_loss(
    f0_last: &FeatureMap,
    fused: &FeatureMap,
    decoded: &FeatureMap,
    concat: &FeatureMap,
) -> Result<LossValue> {
    check_pair(f0_last, fused, "leader feature vs fused feature")?;
    check_pair(decoded, concat, "decoded leader feature vs concatenated features")?;
    let a = normalized_l2_match(f0_last, fused)?.scalar();
    let b = normalized_l2_match(decoded, concat)?.scalar();
    Ok(LossValue::combine(&[
        ("", 1.0, &LossValue::single("fused", a)),
        ("", 1.0, &LossValue::single("concat", b)),
    ]))
}

/// Gradients of [`leader_feature_loss`] w.r.t. `f0_last` and `decoded`.
pub fn leader_feature_loss_grad(
    f0_last: &FeatureMap,
    fused: &FeatureMap,
    decoded: &FeatureMap,
    concat: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap)> {
    check_pair(f0_last, fused, "leader feature vs fused feature")?;
    check_pair(decoded, concat, "decoded leader feature vs concatenated features")?;
    let (g0, _) = normalized_l2_match_grad(f0_last, fused)?;
    let (gd, _) = normalized_l2_match_grad(decoded, concat)?;
    Ok((g0, gd))
}

fn check_student_layers(features: &[Vec<FeatureMap>]) -> Result<usize> {
    let first = features
        .first()
        .ok_or_else(|| Error::invalid("diversity loss needs at least one student"))?;
    let layers = first.len();
    if layers == 0 {
        return Err(Error::invalid("diversity loss needs at least one layer"));
    }
    for (i, student) in features.iter().enumerate() {
        check_levels(student.len(), layers, &format!("student {i} layer count"))?;
        for (l, (f, g)) in student.iter().zip(first).enumerate() {
            check_pair(f, g, &format!("student {i} layer {l}"))?;
        }
    }
    Ok(layers)
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Negative mean pairwise distance between students' feature maps, summed
/// over ordered pairs `i != j` (every unordered pair counts twice) and
/// divided by the number of layers. Distances are per sample, batch-averaged.
pub fn naive_diversity_loss(features: &[Vec<FeatureMap>]) -> Result<LossValue> {
    let layers = check_student_layers(features)?;
    let mut total = 0.0;
    for (i, fi) in features.iter().enumerate() {
        for (j, fj) in features.iter().enumerate() {
            if i == j {
                continue;
            }
            for (a, b) in fi.iter().zip(fj) {
                let batch = a.batch();
                total += (0..batch)
                    .map(|s| pair_distance(a.sample(s), b.sample(s)))
                    .sum::<f64>()
                    / batch as f64;
            }
        }
    }
    Ok(LossValue::single("l2_div", -total / layers as f64))
}

/// Gradient of [`naive_diversity_loss`] w.r.t. every student's features.
pub fn naive_diversity_loss_grad(features: &[Vec<FeatureMap>]) -> Result<Vec<Vec<FeatureMap>>> {
    let layers = check_student_layers(features)?;
    let mut grads = Vec::with_capacity(features.len());
    for (i, fi) in features.iter().enumerate() {
        let mut per_layer = Vec::with_capacity(layers);
        for (l, a) in fi.iter().enumerate() {
            let batch = a.batch();
            let n = a.sample_len();
            let mut g = vec![0.0; batch * n];
            for (j, fj) in features.iter().enumerate() {
                if i == j {
                    continue;
                }
                let b = &fj[l];
                for s in 0..batch {
                    let (xa, xb) = (a.sample(s), b.sample(s));
                    let d = pair_distance(xa, xb);
                    if d == 0.0 {
                        continue;
                    }
                    // Pair (i, j) and pair (j, i) both contain F_i.
                    let k = -2.0 / (layers as f64 * batch as f64 * d);
                    for (gv, (x, y)) in g[s * n..(s + 1) * n].iter_mut().zip(xa.iter().zip(xb)) {
                        *gv += k * (x - y);
                    }
                }
            }
            per_layer.push(a.with_flat(g));
        }
        grads.push(per_layer);
    }
    Ok(grads)
}

/// One-way chain diversity over all levels: each level's attention against
/// the predecessor's shifted attention at the same level.
pub fn chain_diversity_loss(attn: &[AttentionMap], shifted_prev: &[AttentionMap]) -> Result<LossValue> {
    Ok(LossValue::single(
        "div",
        sum_of_matches(attn, shifted_prev, "chain diversity")?,
    ))
}

pub fn chain_diversity_loss_grad(attn: &[AttentionMap], shifted_prev: &[AttentionMap]) -> Result<Vec<AttentionMap>> {
    grads_of_matches(attn, shifted_prev, "chain diversity")
}

/// Self-distillation module objective over the `M - 1` reconstructed levels:
/// attention matching plus `alpha`-weighted feature matching.
pub fn sd_module_loss(
    attn_primed: &[AttentionMap],
    attn_true: &[AttentionMap],
    feat_primed: &[FeatureMap],
    feat_true: &[FeatureMap],
    alpha: f64,
) -> Result<LossValue> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::config(format!("alpha must be nonnegative, got {alpha}")));
    }
    check_levels(attn_primed.len(), feat_primed.len(), "self-distillation levels")?;
    let att = sum_of_matches(attn_primed, attn_true, "self-distillation attention")?;
    let fea = sum_of_matches(feat_primed, feat_true, "self-distillation features")?;
    Ok(LossValue::combine(&[
        ("", 1.0, &LossValue::single("attention", att)),
        ("", alpha, &LossValue::single("feature", fea)),
    ]))
}

/// Gradients of [`sd_module_loss`] w.r.t. the module's attention and feature
/// outputs.
pub fn sd_module_loss_grad(
    attn_primed: &[AttentionMap],
    attn_true: &[AttentionMap],
    feat_primed: &[FeatureMap],
    feat_true: &[FeatureMap],
    alpha: f64,
) -> Result<(Vec<AttentionMap>, Vec<FeatureMap>)> {
    let ga = grads_of_matches(attn_primed, attn_true, "self-distillation attention")?;
    let gf = grads_of_matches(feat_primed, feat_true, "self-distillation features")?
        .into_iter()
        .map(|g| {
            let scaled = g.flat().iter().map(|v| v * alpha).collect();
            g.with_flat(scaled)
        })
        .collect();
    Ok((ga, gf))
}

fn split_last<'a>(attn: &'a [AttentionMap], shallow: &[AttentionMap]) -> Result<(&'a [AttentionMap], &'a AttentionMap)> {
    let (last, rest) = attn
        .split_last()
        .ok_or_else(|| Error::invalid("diversity loss needs at least one level"))?;
    check_levels(rest.len(), shallow.len(), "diversity shallow levels")?;
    Ok((rest, last))
}

/// Chain diversity through the self-distillation module: the shallow levels
/// match the module's reconstruction of the predecessor's shifted feature;
/// the last level matches the shifted attention directly.
pub fn sd_chain_diversity_loss(
    attn: &[AttentionMap],
    shifted_shallow_prev: &[AttentionMap],
    shifted_last_prev: &AttentionMap,
) -> Result<LossValue> {
    let (rest, last) = split_last(attn, shifted_shallow_prev)?;
    let shallow = sum_of_matches(rest, shifted_shallow_prev, "diversity shallow levels")?;
    let top = normalized_l2_match(last, shifted_last_prev)?.scalar();
    Ok(LossValue::single("div", shallow + top))
}

pub fn sd_chain_diversity_loss_grad(
    attn: &[AttentionMap],
    shifted_shallow_prev: &[AttentionMap],
    shifted_last_prev: &AttentionMap,
) -> Result<Vec<AttentionMap>> {
    let (rest, last) = split_last(attn, shifted_shallow_prev)?;
    let mut grads = grads_of_matches(rest, shifted_shallow_prev, "diversity shallow levels")?;
    grads.push(normalized_l2_match_grad(last, shifted_last_prev)?.0);
    Ok(grads)
}

/// Leader self-distillation: shallow leader features against the leader
/// module's reconstruction of the fused map.
pub fn leader_self_loss(f0: &[FeatureMap], f_star: &[FeatureMap]) -> Result<LossValue> {
    Ok(LossValue::single("self", sum_of_matches(f0, f_star, "leader self-distillation")?))
}

pub fn leader_self_loss_grad(f0: &[FeatureMap], f_star: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
    grads_of_matches(f0, f_star, "leader self-distillation")
}
