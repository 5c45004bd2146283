//! Finite-difference gradient checks and brute-force loop oracles shared by
//! the integration tests and the acceptance harness.

#![allow(dead_code)]

pub mod training;

use ffsd::distill_math::*;
use ffsd::evaluation::{ens_accuracy, student_cosine};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn features(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> FeatureMap {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    FeatureMap::from_shape_vec(shape, normals(rng, n)).unwrap()
}

pub fn logits(rng: &mut impl Rng, b: usize, k: usize) -> Logits {
    Logits::new(Array2::from_shape_vec((b, k), normals(rng, b * k)).unwrap() * 2.0).unwrap()
}

pub fn labels(rng: &mut impl Rng, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(0..k)).collect()
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = n(a).max(n(b));
    if scale == 0.0 {
        0.0
    } else {
        n(&d) / scale
    }
}

fn logits_from(flat: &[f64], like: &Logits) -> Logits {
    Logits::new(Array2::from_shape_vec(like.values().raw_dim(), flat.to_vec()).unwrap()).unwrap()
}

fn flat2(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn concat_flat<T: SampleMap>(maps: &[T]) -> Vec<f64> {
    maps.iter().flat_map(|m| m.flat().iter().copied()).collect()
}

fn split_flat<T: SampleMap>(flat: &[f64], like: &[T]) -> Vec<T> {
    let mut at = 0;
    like.iter()
        .map(|m| {
            let n = m.flat().len();
            let out = m.with_flat(flat[at..at + n].to_vec());
            at += n;
            out
        })
        .collect()
}

/// Gradient of a per-level attention loss pulled back onto the features.
fn attention_grads_to_features(f: &[FeatureMap], g: &[AttentionMap]) -> Vec<FeatureMap> {
    f.iter().zip(g).map(|(f, g)| attention_map_vjp(f, g).unwrap()).collect()
}

/// Relative error of every analytic gradient against central differences,
/// named by the objective it checks.
pub fn gradient_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let (b, k, t) = (2, 5, 2.0);
    let y = labels(&mut r, b, k);

    // Mutual-learning base objective w.r.t. the student's logits.
    let z = logits(&mut r, b, k);
    let peers = vec![logits(&mut r, b, k), logits(&mut r, b, k)];
    let ana = flat2(&base_loss_grad(&y, &z, &peers, t).unwrap());
    let num = fd_grad(|x| base_loss(&y, &logits_from(x, &z), &peers, t).unwrap().scalar(), &flat2(z.values()));
    out.push(("base_loss (mutual learning)", rel_err(&ana, &num)));

    // Fusion objective.
    let zf = logits(&mut r, b, k);
    let ze = logits(&mut r, b, k);
    let ana = flat2(&fusion_loss_grad(&y, &zf, &ze, t).unwrap());
    let num = fd_grad(|x| fusion_loss(&y, &logits_from(x, &zf), &ze, t).unwrap().scalar(), &flat2(zf.values()));
    out.push(("fusion_loss", rel_err(&ana, &num)));

    // Leader feature term w.r.t. the leader map and its aligned decoding.
    let shape = (2, 4, 8, 8);
    let f0 = features(&mut r, shape);
    let ff = features(&mut r, shape);
    let dec = features(&mut r, (2, 8, 8, 8));
    let fe = features(&mut r, (2, 8, 8, 8));
    let (g0, gd) = leader_feature_loss_grad(&f0, &ff, &dec, &fe).unwrap();
    let num0 = fd_grad(
        |x| leader_feature_loss(&f0.with_flat(x.to_vec()), &ff, &dec, &fe).unwrap().scalar(),
        f0.flat(),
    );
    let numd = fd_grad(
        |x| leader_feature_loss(&f0, &ff, &dec.with_flat(x.to_vec()), &fe).unwrap().scalar(),
        dec.flat(),
    );
    out.push(("leader_feature_loss / leader map", rel_err(g0.flat(), &num0)));
    out.push(("leader_feature_loss / decoded map", rel_err(gd.flat(), &numd)));

    // Chain diversity over all levels, through the attention map.
    let taps = vec![
        features(&mut r, (2, 2, 8, 8)),
        features(&mut r, (2, 4, 4, 4)),
        features(&mut r, (2, 4, 2, 2)),
    ];
    let targets: Vec<AttentionMap> = taps
        .iter()
        .map(|f| diversify_attention(&attention_map(&features(&mut r, f.dims()))))
        .collect();
    let attn: Vec<AttentionMap> = taps.iter().map(attention_map).collect();
    let ana = concat_flat(&attention_grads_to_features(
        &taps,
        &chain_diversity_loss_grad(&attn, &targets).unwrap(),
    ));
    let num = fd_grad(
        |x| {
            let fs = split_flat(x, &taps);
            let a: Vec<AttentionMap> = fs.iter().map(attention_map).collect();
            chain_diversity_loss(&a, &targets).unwrap().scalar()
        },
        &concat_flat(&taps),
    );
    out.push(("chain_diversity_loss (w.r.t. features)", rel_err(&ana, &num)));

    // Self-distillation module objective w.r.t. the module's outputs.
    let fp: Vec<FeatureMap> = vec![features(&mut r, (2, 2, 8, 8)), features(&mut r, (2, 4, 4, 4))];
    let ft: Vec<FeatureMap> = fp.iter().map(|f| features(&mut r, f.dims())).collect();
    let at: Vec<AttentionMap> = ft.iter().map(attention_map).collect();
    let alpha = 0.7;
    let ap: Vec<AttentionMap> = fp.iter().map(attention_map).collect();
    let (ga, gf) = sd_module_loss_grad(&ap, &at, &fp, &ft, alpha).unwrap();
    let mut ana = concat_flat(&gf);
    for (a, g) in ana
        .iter_mut()
        .zip(concat_flat(&attention_grads_to_features(&fp, &ga)))
    {
        *a += g;
    }
    let num = fd_grad(
        |x| {
            let fs = split_flat(x, &fp);
            let a: Vec<AttentionMap> = fs.iter().map(attention_map).collect();
            sd_module_loss(&a, &at, &fs, &ft, alpha).unwrap().scalar()
        },
        &concat_flat(&fp),
    );
    out.push(("sd_module_loss (w.r.t. reconstructions)", rel_err(&ana, &num)));

    // Diversity through the self-distillation module.
    let shallow: Vec<AttentionMap> = taps[..2].iter().map(|f| attention_map(&features(&mut r, f.dims()))).collect();
    let last = targets[2].clone();
    let ana = concat_flat(&attention_grads_to_features(
        &taps,
        &sd_chain_diversity_loss_grad(&attn, &shallow, &last).unwrap(),
    ));
    let div_of = |x: &[f64]| {
        let fs = split_flat(x, &taps);
        let a: Vec<AttentionMap> = fs.iter().map(attention_map).collect();
        sd_chain_diversity_loss(&a, &shallow, &last).unwrap().scalar()
    };
    let num = fd_grad(div_of, &concat_flat(&taps));
    out.push(("sd_chain_diversity_loss (w.r.t. features)", rel_err(&ana, &num)));

    // Full common-student objective: logits and taps jointly.
    let lambda_div = 0.37;
    let nz = b * k;
    let mut ana = flat2(&base_loss_grad(&y, &z, &peers, t).unwrap());
    ana.extend(
        concat_flat(&attention_grads_to_features(
            &taps,
            &sd_chain_diversity_loss_grad(&attn, &shallow, &last).unwrap(),
        ))
        .into_iter()
        .map(|g| g * lambda_div),
    );
    let mut x0 = flat2(z.values());
    x0.extend(concat_flat(&taps));
    let num = fd_grad(
        |x| {
            let base = base_loss(&y, &logits_from(&x[..nz], &z), &peers, t).unwrap();
            let fs = split_flat(&x[nz..], &taps);
            let a: Vec<AttentionMap> = fs.iter().map(attention_map).collect();
            let div = sd_chain_diversity_loss(&a, &shallow, &last).unwrap();
            common_student_loss(&base, &div, lambda_div).unwrap().scalar()
        },
        &x0,
    );
    out.push(("common_student_loss (logits and taps)", rel_err(&ana, &num)));

    // Leader self-distillation term.
    let f0s = vec![features(&mut r, (2, 2, 8, 8)), features(&mut r, (2, 4, 4, 4))];
    let fstar: Vec<FeatureMap> = f0s.iter().map(|f| features(&mut r, f.dims())).collect();
    let ana = concat_flat(&leader_self_loss_grad(&f0s, &fstar).unwrap());
    let num = fd_grad(
        |x| leader_self_loss(&split_flat(x, &f0s), &fstar).unwrap().scalar(),
        &concat_flat(&f0s),
    );
    out.push(("leader_self_loss", rel_err(&ana, &num)));

    // Full leader objective: logits, last map, decoded map and shallow maps.
    let (lf, ls) = (3.0, 11.0);
    let target = softened_prediction(&ze, t).unwrap();
    let mut ana = flat2(&(cross_entropy_grad(&y, &z).unwrap() + kl_divergence_grad(&target, &z, t).unwrap() * (t * t)));
    ana.extend(g0.flat().iter().map(|v| v * lf));
    ana.extend(gd.flat().iter().map(|v| v * lf));
    ana.extend(
        concat_flat(&leader_self_loss_grad(&f0s, &fstar).unwrap())
            .into_iter()
            .map(|v| v * ls),
    );
    let mut x0 = flat2(z.values());
    x0.extend_from_slice(f0.flat());
    x0.extend_from_slice(dec.flat());
    x0.extend(concat_flat(&f0s));
    let (n0, nd) = (f0.flat().len(), dec.flat().len());
    let num = fd_grad(
        |x| {
            let zl = logits_from(&x[..nz], &z);
            let ce = cross_entropy(&y, &zl).unwrap();
            let kl = kl_divergence(&target, &softened_prediction(&zl, t).unwrap()).unwrap();
            let feat = leader_feature_loss(
                &f0.with_flat(x[nz..nz + n0].to_vec()),
                &ff,
                &dec.with_flat(x[nz + n0..nz + n0 + nd].to_vec()),
                &fe,
            )
            .unwrap();
            let selfl = leader_self_loss(&split_flat(&x[nz + n0 + nd..], &f0s), &fstar).unwrap();
            leader_loss(&ce, &kl, &feat, &selfl, t, lf, ls).unwrap().scalar()
        },
        &x0,
    );
    out.push(("leader_loss (all trainable inputs)", rel_err(&ana, &num)));

    // Building blocks.
    let a = features(&mut r, (2, 3, 4, 4));
    let bm = features(&mut r, (2, 3, 4, 4));
    let (ga, gb) = normalized_l2_match_grad(&a, &bm).unwrap();
    let na = fd_grad(|x| normalized_l2_match(&a.with_flat(x.to_vec()), &bm).unwrap().scalar(), a.flat());
    let nb = fd_grad(|x| normalized_l2_match(&a, &bm.with_flat(x.to_vec())).unwrap().scalar(), bm.flat());
    out.push(("normalized_l2_match / first", rel_err(ga.flat(), &na)));
    out.push(("normalized_l2_match / second", rel_err(gb.flat(), &nb)));

    let studs: Vec<Vec<FeatureMap>> = (0..3)
        .map(|_| vec![features(&mut r, (2, 2, 4, 4)), features(&mut r, (2, 4, 2, 2))])
        .collect();
    let ana = naive_diversity_loss_grad(&studs).unwrap();
    for i in 0..studs.len() {
        let num = fd_grad(
            |x| {
                let mut s = studs.clone();
                s[i] = split_flat(x, &studs[i]);
                naive_diversity_loss(&s).unwrap().scalar()
            },
            &concat_flat(&studs[i]),
        );
        out.push(("naive_diversity_loss", rel_err(&concat_flat(&ana[i]), &num)));
    }
    out
}

/// Attention shift oracle on the definition: per sample `P` is the L2 norm,
/// `t` the `ceil(n/3)`-th smallest value.
pub fn diversify_oracle(values: &[f64]) -> Vec<f64> {
    let p = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t = sorted[values.len().div_ceil(3) - 1];
    values.iter().map(|&a| if a < t { a } else { p - a }).collect()
}

/// Checks the attention shift on `count` random maps; returns failures.
pub fn diversify_property_failures(count: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let mut failures = Vec::new();
    for case in 0..count {
        let b = r.random_range(1..=2);
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=8);
        let raw: Vec<f64> = (0..b * h * w).map(|_| r.random_range(0.0..5.0f64).powi(2)).collect();
        let a = AttentionMap::from_shape_vec((b, h, w), raw.clone()).unwrap();
        let out = diversify_attention(&a);
        for s in 0..b {
            let src = &raw[s * h * w..(s + 1) * h * w];
            let got = &out.flat()[s * h * w..(s + 1) * h * w];
            let want = diversify_oracle(src);
            if got.iter().zip(&want).any(|(g, w)| (g - w).abs() > 1e-9) {
                failures.push(format!("case {case} sample {s}: piecewise rule violated"));
            }
            if got.iter().any(|&v| v < 0.0) {
                failures.push(format!("case {case} sample {s}: negative attention"));
            }
        }
    }
    let hand = AttentionMap::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let got = diversify_attention(&hand);
    let want = [1.0, 3.4772, 2.4772, 1.4772];
    if got.flat().iter().zip(want).any(|(g, w)| (g - w).abs() > 1e-3) {
        failures.push(format!("hand example gave {:?}", got.flat()));
    }
    failures
}

pub fn attention_oracle(f: &FeatureMap) -> Vec<f64> {
    let (b, c, h, w) = f.dims();
    let d = f.data();
    let mut out = vec![0.0; b * h * w];
    for s in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += d[[s, ch, y, x]] * d[[s, ch, y, x]];
                }
                out[(s * h + y) * w + x] = acc;
            }
        }
    }
    out
}

pub fn naive_diversity_oracle(features: &[Vec<FeatureMap>]) -> f64 {
    let layers = features[0].len();
    let mut total = 0.0;
    for i in 0..features.len() {
        for j in 0..features.len() {
            if i == j {
                continue;
            }
            for l in 0..layers {
                let (a, b) = (features[i][l].data(), features[j][l].data());
                let batch = a.shape()[0];
                for s in 0..batch {
                    let mut sq = 0.0;
                    for (idx, v) in a.index_axis(ndarray::Axis(0), s).indexed_iter() {
                        let o = b[[s, idx.0, idx.1, idx.2]];
                        sq += (v - o) * (v - o);
                    }
                    total += sq.sqrt() / batch as f64;
                }
            }
        }
    }
    -total / layers as f64
}

pub fn ens_accuracy_oracle(preds: &[Vec<usize>], labels: &[usize]) -> f64 {
    let mut hit = 0;
    for (s, &y) in labels.iter().enumerate() {
        let mut any = false;
        for p in preds {
            if p[s] == y {
                any = true;
            }
        }
        if any {
            hit += 1;
        }
    }
    100.0 * hit as f64 / labels.len() as f64
}

pub fn cosine_oracle(reps: &[Array2<f64>]) -> f64 {
    let n = reps.len();
    let rows = reps[0].nrows();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sum = 0.0;
            for s in 0..rows {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for c in 0..reps[i].ncols() {
                    let (a, b) = (reps[i][[s, c]], reps[j][[s, c]]);
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                sum += if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na.sqrt() * nb.sqrt()) };
            }
            total += sum / rows as f64;
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Largest absolute deviation of each function from its loop oracle over
/// `trials` random instances.
pub fn oracle_checks(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let n = r.random_range(2..=4);
        let b = r.random_range(1..=3);
        let c = r.random_range(1..=4);
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=8);

        let f = features(&mut r, (b, c, h, w));
        let got = attention_map(&f);
        let want = attention_oracle(&f);
        worst[0] = worst[0].max(got.flat().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let studs: Vec<Vec<FeatureMap>> = (0..n)
            .map(|_| vec![features(&mut r, (b, c, h, w)), features(&mut r, (b, c, h.div_ceil(2), w.div_ceil(2)))])
            .collect();
        let got = naive_diversity_loss(&studs).unwrap().scalar();
        worst[1] = worst[1].max((got - naive_diversity_oracle(&studs)).abs());

        let samples = r.random_range(1..=40);
        let k = r.random_range(2..=5);
        let y = labels(&mut r, samples, k);
        let preds: Vec<Vec<usize>> = (0..n).map(|_| labels(&mut r, samples, k)).collect();
        let got = ens_accuracy(&preds, &y).unwrap();
        worst[2] = worst[2].max((got - ens_accuracy_oracle(&preds, &y)).abs());

        let dim = r.random_range(1..=16);
        let reps: Vec<Array2<f64>> = (0..n)
            .map(|_| Array2::from_shape_vec((samples, dim), normals(&mut r, samples * dim)).unwrap())
            .collect();
        let got = student_cosine(&reps).unwrap();
        worst[3] = worst[3].max((got - cosine_oracle(&reps)).abs());
    }
    vec![
        ("attention_map", worst[0]),
        ("naive_diversity_loss", worst[1]),
        ("ens_accuracy", worst[2]),
        ("student_cosine", worst[3]),
    ]
}
