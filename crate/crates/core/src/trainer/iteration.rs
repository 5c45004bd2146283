use std::collections::BTreeMap;

use ndarray::Array2;

use super::variant::MethodVariant;
use crate::config::{DistillConfig, KlTarget};
use crate::data::Batch;
use crate::distill_math::{
    self as dm, AttentionMap, FeatureMap, Logits, LossValue, SampleMap,
};
use crate::error::{Error, Result};
use crate::networks::{BnUpdate, NormMode, SelfDistillModule, StudentGroup};
use crate::tensor::{Tape, Tensor, Var};

/// Settings one iteration needs.
#[derive(Clone, Debug)]
pub struct IterationSettings<'a> {
    pub variant: MethodVariant,
    pub distill: &'a DistillConfig,
    pub divergence_threshold: f64,
}

/// Gradients and running-statistics updates of one iteration, indexed like
/// [`StudentGroup::components`]. `None` marks a component this variant does
/// not train.
#[derive(Clone, Debug)]
pub struct IterationGrads {
    pub grads: Vec<Option<Vec<Tensor>>>,
    pub bn_updates: Vec<Vec<BnUpdate>>,
    /// Loss scalars keyed `component` and `component.term`.
    pub metrics: BTreeMap<String, f64>,
}

/// Component indices inside [`StudentGroup::components`].
pub(crate) struct Layout {
    n: usize,
}

impl Layout {
    pub(crate) fn new(n: usize) -> Self {
        Layout { n }
    }
    pub(crate) fn leader(&self) -> usize {
        0
    }
    pub(crate) fn student(&self, i: usize) -> usize {
        1 + i
    }
    pub(crate) fn fusion(&self) -> usize {
        self.n + 1
    }
    pub(crate) fn aligner(&self) -> usize {
        self.n + 2
    }
    pub(crate) fn sd(&self, i: usize) -> usize {
        self.n + 3 + i
    }
    pub(crate) fn count(&self) -> usize {
        2 * self.n + 4
    }
}

fn feature(tape: &Tape, v: Var, who: &str) -> Result<FeatureMap> {
    FeatureMap::new(tape.value(v).to_array4()?).map_err(|e| diverged(who, e.to_string()))
}

fn logits(tape: &Tape, v: Var, who: &str) -> Result<Logits> {
    Logits::new(tape.value(v).to_array2()?).map_err(|e| diverged(who, e.to_string()))
}

fn diverged(component: &str, message: impl Into<String>) -> Error {
    Error::Diverged {
        component: component.to_string(),
        message: message.into(),
    }
}

fn scaled4(f: &FeatureMap, k: f64) -> Tensor {
    Tensor::from_array4(&f.data().mapv(|v| v * k))
}

fn add_features(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let sum = a.flat().iter().zip(b.flat()).map(|(x, y)| x + y).collect();
    a.with_flat(sum)
}

fn record(metrics: &mut BTreeMap<String, f64>, who: &str, loss: &LossValue, threshold: f64) -> Result<()> {
    let s = loss.scalar();
    if !s.is_finite() {
        return Err(diverged(who, format!("loss is {s}")));
    }
    if s > threshold {
        return Err(diverged(who, format!("loss {s} exceeds the divergence threshold {threshold}")));
    }
    metrics.insert(who.to_string(), s);
    for t in loss.components() {
        metrics.insert(format!("{who}.{}", t.name), t.value);
    }
    Ok(())
}

/// Cross-entropy plus `lambda_kl * T^2`-weighted mimicry of each target,
/// with its gradient w.r.t. `z`.
fn ce_plus_kl(
    labels: &[usize],
    z: &Logits,
    targets: &[Logits],
    t: f64,
    lambda_kl: f64,
) -> Result<(LossValue, Array2<f64>)> {
    let ce = dm::cross_entropy(labels, z)?;
    let mut grad = dm::cross_entropy_grad(labels, z)?;
    let p = dm::softened_prediction(z, t)?;
    let mut kl = 0.0;
    for target in targets {
        let q = dm::softened_prediction(target, t)?;
        kl += dm::kl_divergence(&q, &p)?.scalar();
        if lambda_kl != 0.0 {
            grad = grad + dm::kl_divergence_grad(&q, z, t)? * (lambda_kl * t * t);
        }
    }
    let loss = LossValue::combine(&[
        ("", 1.0, &ce),
        ("", lambda_kl * t * t, &LossValue::single("kl", kl)),
    ]);
    Ok((loss, grad))
}

/// Detached targets for the diversity term of the successor of the student
/// whose taps are `taps_prev`: the shifted last-level attention and the
/// attention of the predecessor's self-distillation module applied to the
/// shifted feature.
pub fn diversity_targets(
    sd_prev: &SelfDistillModule,
    taps_prev: &[FeatureMap],
) -> Result<(AttentionMap, Vec<AttentionMap>)> {
    let last = taps_prev
        .last()
        .ok_or_else(|| Error::invalid("diversity targets need at least one tap"))?;
    let a = dm::attention_map(last);
    let shifted = dm::diversify_attention(&a);
    let f_bar = dm::attention_to_feature(last, &a, &shifted)?;
    let primed = sd_reconstruction(sd_prev, &f_bar)?
        .iter()
        .map(dm::attention_map)
        .collect();
    Ok((shifted, primed))
}

struct Forwarded {
    z: Logits,
    taps: Vec<FeatureMap>,
    logit_var: Var,
    tap_vars: Vec<Var>,
}

/// Runs one mini-batch through every component the variant uses and
/// returns each component's gradient under the stop-gradient policy: every
/// tensor crossing a component boundary is a constant, except that the
/// aligner is trained through the leader's objective.
pub fn compute_iteration(group: &StudentGroup, batch: &Batch, s: &IterationSettings<'_>) -> Result<IterationGrads> {
    let variant = s.variant;
    let d = s.distill;
    let t = d.temperature;
    let n = group.n();
    let lay = Layout::new(n);
    let labels = &batch.labels;
    let mut metrics = BTreeMap::new();
    let mut grads: Vec<Option<Vec<Tensor>>> = vec![None; lay.count()];
    let mut bn_updates: Vec<Vec<BnUpdate>> = vec![Vec::new(); lay.count()];
    let mut seeds: Vec<(Var, Tensor)> = Vec::new();

    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());

    let mut student_bounds = Vec::with_capacity(n);
    let mut students = Vec::with_capacity(n);
    for (i, net) in group.students.iter().enumerate() {
        let who = format!("student{}", i + 1);
        let bound = net.params.bind(&mut tape, true);
        let out = net.forward_with_taps(&mut tape, &bound, x, NormMode::Train)?;
        bn_updates[lay.student(i)] = out.bn_updates;
        students.push(Forwarded {
            z: logits(&tape, out.logits, &who)?,
            taps: out
                .taps
                .iter()
                .map(|&v| feature(&tape, v, &who))
                .collect::<Result<_>>()?,
            logit_var: out.logits,
            tap_vars: out.taps,
        });
        student_bounds.push(bound);
    }

    let leader = if variant.has_leader() {
        let bound = group.leader.params.bind(&mut tape, true);
        let out = group.leader.forward_with_taps(&mut tape, &bound, x, NormMode::Train)?;
        bn_updates[lay.leader()] = out.bn_updates;
        let fw = Forwarded {
            z: logits(&tape, out.logits, "leader")?,
            taps: out
                .taps
                .iter()
                .map(|&v| feature(&tape, v, "leader"))
                .collect::<Result<_>>()?,
            logit_var: out.logits,
            tap_vars: out.taps,
        };
        Some((bound, fw))
    } else {
        None
    };

    // Fusion of the detached last-level student maps.
    struct Fused {
        bound: crate::networks::Bound,
        logit_var: Var,
        fused: FeatureMap,
        concat: FeatureMap,
        z_f: Logits,
    }
    let fusion = if variant.has_fusion() {
        let feats: Vec<Var> = students
            .iter()
            .map(|st| tape.detach(*st.tap_vars.last().expect("at least one tap")))
            .collect();
        let bound = group.fusion.params.bind(&mut tape, true);
        let out = group.fusion.fuse(&mut tape, &bound, &feats, NormMode::Train)?;
        bn_updates[lay.fusion()] = out.bn_updates;
        Some(Fused {
            fused: feature(&tape, out.fused, "fusion")?,
            concat: feature(&tape, out.concat, "fusion")?,
            z_f: logits(&tape, out.logits, "fusion")?,
            logit_var: out.logits,
            bound,
        })
    } else {
        None
    };

    // Common students: mutual learning, plus diversity from student 2 on.
    let zs: Vec<Logits> = students.iter().map(|st| st.z.clone()).collect();
    let naive_grads = match variant {
        MethodVariant::L2Div => {
            let feats: Vec<Vec<FeatureMap>> = students.iter().map(|st| st.taps.clone()).collect();
            Some((dm::naive_diversity_loss(&feats)?, dm::naive_diversity_loss_grad(&feats)?))
        }
        MethodVariant::L2DivSd => {
            let feats: Vec<Vec<FeatureMap>> = students
                .iter()
                .map(|st| vec![st.taps.last().expect("tap").clone()])
                .collect();
            Some((dm::naive_diversity_loss(&feats)?, dm::naive_diversity_loss_grad(&feats)?))
        }
        _ => None,
    };
    for (i, st) in students.iter().enumerate() {
        let who = format!("student{}", i + 1);
        let (base, gz) = if variant.mutual_learning() {
            let peers: Vec<Logits> = zs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, z)| z.clone())
                .collect();
            if peers.is_empty() {
                log::warn!("{who} has no peers; mutual learning reduces to cross-entropy");
            }
            ce_plus_kl(labels, &st.z, &peers, t, d.lambda_kl)?
        } else {
            ce_plus_kl(labels, &st.z, &[], t, 0.0)?
        };
        seeds.push((st.logit_var, Tensor::from_array2(&gz)));

        let div = if i == 0 {
            None
        } else {
            match variant {
                MethodVariant::FfsdFull => {
                    let prev = &students[i - 1];
                    let (shift_last, primed) = diversity_targets(&group.sd[i], &prev.taps)?;
                    let attn: Vec<AttentionMap> = st.taps.iter().map(dm::attention_map).collect();
                    let loss = dm::sd_chain_diversity_loss(&attn, &primed, &shift_last)?;
                    let ga = dm::sd_chain_diversity_loss_grad(&attn, &primed, &shift_last)?;
                    let gf = st
                        .taps
                        .iter()
                        .zip(&ga)
                        .map(|(f, g)| dm::attention_map_vjp(f, g))
                        .collect::<Result<Vec<_>>>()?;
                    Some((loss, gf))
                }
                MethodVariant::FfsdNoSd => {
                    let attn: Vec<AttentionMap> = st.taps.iter().map(dm::attention_map).collect();
                    let targets: Vec<AttentionMap> = students[i - 1]
                        .taps
                        .iter()
                        .map(|f| dm::diversify_attention(&dm::attention_map(f)))
                        .collect();
                    let loss = dm::chain_diversity_loss(&attn, &targets)?;
                    let ga = dm::chain_diversity_loss_grad(&attn, &targets)?;
                    let gf = st
                        .taps
                        .iter()
                        .zip(&ga)
                        .map(|(f, g)| dm::attention_map_vjp(f, g))
                        .collect::<Result<Vec<_>>>()?;
                    Some((loss, gf))
                }
                MethodVariant::L2Div | MethodVariant::L2DivSd => {
                    let (loss, all) = naive_grads.as_ref().expect("computed above");
                    Some((loss.clone(), all[i].clone()))
                }
                MethodVariant::Independent | MethodVariant::Dml => None,
            }
        };
        let total = match div {
            Some((loss, gf)) => {
                // Feature gradients cover all taps, or only the last one.
                let offset = st.tap_vars.len() - gf.len();
                for (m, g) in gf.iter().enumerate() {
                    seeds.push((st.tap_vars[offset + m], scaled4(g, d.lambda_div)));
                }
                dm::common_student_loss(&base, &loss, d.lambda_div)?
            }
            None => base,
        };
        record(&mut metrics, &who, &total, s.divergence_threshold)?;
    }

    let mut aligner_bound = None;
    if let Some((_, fw)) = &leader {
        let loss = match &fusion {
            Some(fu) => {
                let kl_target = match d.leader_kl_target {
                    KlTarget::Ensemble => dm::ensemble_logits(&zs)?,
                    KlTarget::Fusion => fu.z_f.clone(),
                };
                let (ce_kl, gz) = ce_plus_kl(labels, &fw.z, &[kl_target], t, d.lambda_kl)?;
                seeds.push((fw.logit_var, Tensor::from_array2(&gz)));

                let last_var = *fw.tap_vars.last().expect("tap");
                let last = fw.taps.last().expect("tap");
                let abound = group.aligner.params.bind(&mut tape, true);
                let aligned_var = group.aligner.align_channels(&mut tape, &abound, last_var)?;
                aligner_bound = Some(abound);
                let aligned = feature(&tape, aligned_var, "aligner")?;
                let feat = dm::leader_feature_loss(last, &fu.fused, &aligned, &fu.concat)?;
                let (g_last, g_aligned) = dm::leader_feature_loss_grad(last, &fu.fused, &aligned, &fu.concat)?;
                seeds.push((last_var, scaled4(&g_last, d.lambda_fea)));
                seeds.push((aligned_var, scaled4(&g_aligned, d.lambda_fea)));

                let self_loss = if variant.has_sd() && fw.taps.len() > 1 {
                    let f_star = sd_reconstruction(&group.sd[0], &fu.fused)?;
                    let shallow = &fw.taps[..fw.taps.len() - 1];
                    let g = dm::leader_self_loss_grad(shallow, &f_star)?;
                    for (m, gm) in g.iter().enumerate() {
                        seeds.push((fw.tap_vars[m], scaled4(gm, d.lambda_self)));
                    }
                    dm::leader_self_loss(shallow, &f_star)?
                } else {
                    LossValue::single("self", 0.0)
                };
                // ce_kl already carries lambda_kl * T^2 on its KL entry.
                LossValue::combine(&[
                    ("", 1.0, &ce_kl),
                    ("feat", d.lambda_fea, &feat),
                    ("self", d.lambda_self, &self_loss),
                ])
            }
            None => {
                let (ce, gz) = ce_plus_kl(labels, &fw.z, &[], t, 0.0)?;
                seeds.push((fw.logit_var, Tensor::from_array2(&gz)));
                ce
            }
        };
        record(&mut metrics, "leader", &loss, s.divergence_threshold)?;
    }

    if let Some(fu) = &fusion {
        let z_e = dm::ensemble_logits(&zs)?;
        let loss = weighted_fusion_loss(labels, &fu.z_f, &z_e, t, d.lambda_kl)?;
        let g = dm::cross_entropy_grad(labels, &fu.z_f)?;
        let g = if d.lambda_kl != 0.0 {
            let q = dm::softened_prediction(&z_e, t)?;
            g + dm::kl_divergence_grad(&q, &fu.z_f, t)? * (d.lambda_kl * t * t)
        } else {
            g
        };
        seeds.push((fu.logit_var, Tensor::from_array2(&g)));
        record(&mut metrics, "fusion", &loss, s.divergence_threshold)?;
    }

    // Self-distillation modules: reconstruct each network's shallow taps
    // from its detached last tap.
    let mut sd_bounds = Vec::new();
    if variant.has_sd() && group.spec().levels() > 1 {
        let owners: Vec<&Forwarded> = leader.iter().map(|(_, fw)| fw).chain(students.iter()).collect();
        for (i, fw) in owners.into_iter().enumerate() {
            let who = format!("sd{i}");
            let top = tape.detach(*fw.tap_vars.last().expect("tap"));
            let bound = group.sd[i].params.bind(&mut tape, true);
            let out = group.sd[i].sd_forward(&mut tape, &bound, top, NormMode::Train)?;
            bn_updates[lay.sd(i)] = out.bn_updates;
            let primed = out
                .levels
                .iter()
                .map(|&v| feature(&tape, v, &who))
                .collect::<Result<Vec<_>>>()?;
            let truth = &fw.taps[..fw.taps.len() - 1];
            let a_primed: Vec<AttentionMap> = primed.iter().map(dm::attention_map).collect();
            let a_true: Vec<AttentionMap> = truth.iter().map(dm::attention_map).collect();
            let loss = dm::sd_module_loss(&a_primed, &a_true, &primed, truth, d.alpha)?;
            let (ga, gf) = dm::sd_module_loss_grad(&a_primed, &a_true, &primed, truth, d.alpha)?;
            for (m, (g_a, g_f)) in ga.iter().zip(&gf).enumerate() {
                let g = add_features(&dm::attention_map_vjp(&primed[m], g_a)?, g_f);
                seeds.push((out.levels[m], scaled4(&g, 1.0)));
            }
            record(&mut metrics, &who, &loss, s.divergence_threshold)?;
            sd_bounds.push((i, bound));
        }
    }

    let back = tape.backward(&seeds)?;
    for (i, bound) in student_bounds.iter().enumerate() {
        grads[lay.student(i)] = Some(group.students[i].params.collect_grads(bound, &back));
    }
    if let Some((bound, _)) = &leader {
        grads[lay.leader()] = Some(group.leader.params.collect_grads(bound, &back));
    }
    if let Some(fu) = &fusion {
        grads[lay.fusion()] = Some(group.fusion.params.collect_grads(&fu.bound, &back));
    }
    if let Some(bound) = &aligner_bound {
        grads[lay.aligner()] = Some(group.aligner.params.collect_grads(bound, &back));
    }
    for (i, bound) in &sd_bounds {
        grads[lay.sd(*i)] = Some(group.sd[*i].params.collect_grads(bound, &back));
    }
    for g in grads.iter().flatten() {
        if g.iter().any(|t| !t.is_finite()) {
            return Err(diverged("backward", "non-finite gradient"));
        }
    }
    Ok(IterationGrads {
        grads,
        bn_updates,
        metrics,
    })
}

/// Reconstructions of the shallow taps from a deepest-tap-shaped map, using
/// batch statistics and leaving the module untouched.
fn sd_reconstruction(sd: &SelfDistillModule, top: &FeatureMap) -> Result<Vec<FeatureMap>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_array4(top.data()));
    let bound = sd.params.bind(&mut tape, false);
    let out = sd.sd_forward(&mut tape, &bound, x, NormMode::BatchStats)?;
    out.levels.iter().map(|&v| feature(&tape, v, "self-distillation")).collect()
}

fn weighted_fusion_loss(labels: &[usize], z_f: &Logits, z_e: &Logits, t: f64, lambda_kl: f64) -> Result<LossValue> {
    let base = dm::fusion_loss(labels, z_f, z_e, t)?;
    let ce = base.component("ce").expect("fusion loss has ce");
    let kl = base.component("kl").expect("fusion loss has kl");
    Ok(LossValue::combine(&[
        ("", 1.0, &LossValue::single("ce", ce)),
        ("", lambda_kl * t * t, &LossValue::single("kl", kl)),
    ]))
}
