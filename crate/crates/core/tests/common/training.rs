//! Single-step checks on the training iteration.

use ffsd::config::DistillConfig;
use ffsd::data::Batch;
use ffsd::distill_math::{cross_entropy_grad, Logits};
use ffsd::networks::{build_group, component_names, BackboneSpec, NormMode, StudentGroup, BN_MOMENTUM};
use ffsd::tensor::{Tape, Tensor};
use ffsd::trainer::{apply_iteration, compute_iteration, IterationSettings, MethodVariant, OptimSpec, Optimizer};
use rand::Rng;

use super::{normals, rng};

pub fn tiny_spec() -> BackboneSpec {
    BackboneSpec {
        in_channels: 3,
        input_size: 8,
        widths: vec![4, 8, 8],
        blocks_per_stage: 1,
        classes: 5,
    }
}

pub fn tiny_batch(spec: &BackboneSpec, size: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let s = spec.input_size;
    let images = Tensor::new(
        vec![size, spec.in_channels, s, s],
        normals(&mut r, size * spec.in_channels * s * s).into_iter().map(|v| v as f32).collect(),
    )
    .unwrap();
    Batch {
        images,
        labels: (0..size).map(|_| r.random_range(0..spec.classes)).collect(),
        indices: (0..size).collect(),
    }
}

pub fn settings(variant: MethodVariant, distill: &DistillConfig) -> IterationSettings<'_> {
    IterationSettings {
        variant,
        distill,
        divergence_threshold: 1e9,
    }
}

/// Component index by name in the layout order.
pub fn index_of(n: usize, name: &str) -> usize {
    component_names(n).iter().position(|c| c == name).expect("known component")
}

/// Whether the update of `b` may read the parameters of `a` in one
/// iteration of the full method.
pub fn may_depend(a: &str, b: &str, mutual_kl: bool) -> bool {
    if a == b {
        return true;
    }
    let student = |s: &str| s.strip_prefix("student").and_then(|k| k.parse::<usize>().ok());
    let sd = |s: &str| s.strip_prefix("sd").and_then(|k| k.parse::<usize>().ok());
    match (b, student(b), sd(b)) {
        (_, Some(i), _) => match (student(a), sd(a)) {
            (Some(j), _) => mutual_kl || j + 1 == i,
            (_, Some(j)) => i >= 2 && j + 1 == i,
            _ => false,
        },
        ("leader", _, _) => a != "leader" && sd(a).is_none_or(|j| j == 0),
        ("fusion", _, _) => student(a).is_some(),
        ("aligner", _, _) => a == "leader" || student(a).is_some(),
        (_, _, Some(i)) => {
            let owner = if i == 0 { "leader".to_string() } else { format!("student{i}") };
            a == owner
        }
        _ => unreachable!("unknown component {b}"),
    }
}

fn perturb(group: &mut StudentGroup, idx: usize, seed: u64) {
    let mut r = rng(seed);
    let (_, params) = group.components_mut().swap_remove(idx);
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += 0.05 * normals(&mut r, 1)[0] as f32;
        }
    }
}

pub struct IsolationOutcome {
    /// `(perturbed, observed)` pairs whose update changed although they are
    /// separated.
    pub violations: Vec<(String, String)>,
    /// Dependent pairs whose update did change, showing the probe is live.
    pub live_pairs: usize,
    pub separated_pairs: usize,
}

/// Perturbs each component in turn and compares every other component's
/// gradients against the unperturbed iteration.
pub fn isolation_probe(n: usize, distill: &DistillConfig, seed: u64) -> IsolationOutcome {
    let spec = tiny_spec();
    let group = build_group(&spec, n, seed).unwrap();
    let batch = tiny_batch(&spec, 6, seed + 1);
    let s = settings(MethodVariant::FfsdFull, distill);
    let base = compute_iteration(&group, &batch, &s).unwrap();
    let names = component_names(n);
    let mutual_kl = distill.lambda_kl != 0.0;
    let mut out = IsolationOutcome {
        violations: Vec::new(),
        live_pairs: 0,
        separated_pairs: 0,
    };
    for (ai, a) in names.iter().enumerate() {
        let mut g = group.clone();
        perturb(&mut g, ai, seed + 100 + ai as u64);
        let step = compute_iteration(&g, &batch, &s).unwrap();
        for (bi, b) in names.iter().enumerate() {
            if ai == bi {
                continue;
            }
            let same = base.grads[bi] == step.grads[bi];
            if may_depend(a, b, mutual_kl) {
                if !same {
                    out.live_pairs += 1;
                }
            } else {
                out.separated_pairs += 1;
                if !same {
                    out.violations.push((a.clone(), b.clone()));
                }
            }
        }
    }
    out
}

/// Whether student 1's gradients ignore student 2 entirely.
pub fn student2_to_student1_inert(distill: &DistillConfig, seed: u64) -> bool {
    let spec = tiny_spec();
    let group = build_group(&spec, 2, seed).unwrap();
    let batch = tiny_batch(&spec, 6, seed + 1);
    let s = settings(MethodVariant::FfsdFull, distill);
    let base = compute_iteration(&group, &batch, &s).unwrap();
    let s1 = index_of(2, "student1");
    let s2 = index_of(2, "student2");
    let mut g = group.clone();
    perturb(&mut g, s2, seed + 7);
    let step = compute_iteration(&g, &batch, &s).unwrap();
    base.grads[s1] == step.grads[s1]
}

/// Largest parameter difference between each common student after one
/// zero-weight step of the full method and the same student after one plain
/// cross-entropy step taken outside the trainer.
pub fn degenerate_step_deviation(n: usize, optim: &OptimSpec, seed: u64) -> f64 {
    let spec = tiny_spec();
    let mut group = build_group(&spec, n, seed).unwrap();
    let standalone: Vec<_> = group.students.clone();
    let batch = tiny_batch(&spec, 6, seed + 1);
    let distill = DistillConfig {
        lambda_kl: 0.0,
        lambda_div: 0.0,
        lambda_fea: 0.0,
        lambda_self: 0.0,
        ..DistillConfig::default()
    };
    let s = settings(MethodVariant::FfsdFull, &distill);
    let mut optims: Vec<Optimizer> = group
        .components()
        .into_iter()
        .map(|(_, p)| Optimizer::new(optim.clone(), p))
        .collect();
    let step = compute_iteration(&group, &batch, &s).unwrap();
    apply_iteration(&mut group, &mut optims, &step, optim.lr, optim.lr);

    let mut worst = 0.0f64;
    for (i, mut net) in standalone.into_iter().enumerate() {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let bound = net.params.bind(&mut tape, true);
        let out = net.forward_with_taps(&mut tape, &bound, x, NormMode::Train).unwrap();
        let z = Logits::new(tape.value(out.logits).to_array2().unwrap()).unwrap();
        let g = cross_entropy_grad(&batch.labels, &z).unwrap();
        let grads = tape.backward(&[(out.logits, Tensor::from_array2(&g))]).unwrap();
        let pg = net.params.collect_grads(&bound, &grads);
        let updates = out.bn_updates;
        let mut opt = Optimizer::new(optim.clone(), &net.params);
        opt.step(&mut net.params, &pg, optim.lr);
        net.params.apply_bn_updates(&updates, BN_MOMENTUM);

        let trained = &group.students[i].params;
        for (a, b) in trained.named_tensors().iter().zip(net.params.named_tensors()) {
            for (x, y) in a.1.data().iter().zip(b.1.data()) {
                worst = worst.max((x - y).abs() as f64);
            }
        }
    }
    worst
}

/// Tap-shape mismatches of the self-distillation module for `spec`.
pub fn sd_shape_mismatches(spec: &BackboneSpec, seed: u64) -> Vec<String> {
    let group = build_group(spec, 1, seed).unwrap();
    let batch = tiny_batch(spec, 2, seed);
    let mut tape = Tape::new();
    let x = tape.constant(batch.images.clone());
    let net = &group.students[0];
    let bound = net.params.bind(&mut tape, false);
    let out = net.forward_with_taps(&mut tape, &bound, x, NormMode::Train).unwrap();
    let top = *out.taps.last().unwrap();
    let sd = &group.sd[1];
    let sbound = sd.params.bind(&mut tape, false);
    let rec = sd.sd_forward(&mut tape, &sbound, top, NormMode::Train).unwrap();
    let mut bad = Vec::new();
    if rec.levels.len() + 1 != out.taps.len() {
        bad.push(format!("{} reconstructions for {} taps", rec.levels.len(), out.taps.len()));
    }
    for (m, (r, t)) in rec.levels.iter().zip(&out.taps).enumerate() {
        if tape.value(*r).shape() != tape.value(*t).shape() {
            bad.push(format!(
                "level {}: {:?} vs tap {:?}",
                m + 1,
                tape.value(*r).shape(),
                tape.value(*t).shape()
            ));
        }
    }
    bad
}

/// Backbone configurations the shape checks sweep.
pub fn shape_sweep() -> Vec<BackboneSpec> {
    let mut out = Vec::new();
    for (size, widths) in [
        (8, vec![4, 8, 8]),
        (16, vec![8, 16, 32]),
        (32, vec![16, 32, 64]),
        (12, vec![4, 6]),
        (16, vec![4, 8, 8, 16]),
    ] {
        for blocks in [1, 2] {
            out.push(BackboneSpec {
                in_channels: 3,
                input_size: size,
                widths: widths.clone(),
                blocks_per_stage: blocks,
                classes: 7,
            });
        }
    }
    out
}
