use ffsd::distill_math::*;
use ndarray::Array2;
use proptest::prelude::*;

fn logits_strategy(b: usize, k: usize) -> impl Strategy<Value = Logits> {
    prop::collection::vec(-8.0f64..8.0, b * k)
        .prop_map(move |v| Logits::new(Array2::from_shape_vec((b, k), v).unwrap()).unwrap())
}

fn feature_strategy(shape: (usize, usize, usize, usize)) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-3.0f64..3.0, shape.0 * shape.1 * shape.2 * shape.3)
        .prop_map(move |v| FeatureMap::from_shape_vec(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softened_rows_are_distributions(z in logits_strategy(3, 6), t in 1.0f64..6.0) {
        let p = softened_prediction(&z, t).unwrap();
        for row in p.probs().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(a in logits_strategy(2, 5), b in logits_strategy(2, 5), t in 1.0f64..4.0) {
        let pa = softened_prediction(&a, t).unwrap();
        let pb = softened_prediction(&b, t).unwrap();
        prop_assert!(kl_divergence(&pa, &pb).unwrap().scalar() >= -1e-12);
        prop_assert!(kl_divergence(&pa, &pa).unwrap().scalar().abs() < 1e-9);
    }

    #[test]
    fn higher_temperature_flattens(z in logits_strategy(2, 5)) {
        let lo = softened_prediction(&z, 1.0).unwrap().entropy();
        let hi = softened_prediction(&z, 4.0).unwrap().entropy();
        for (l, h) in lo.iter().zip(hi.iter()) {
            prop_assert!(h + 1e-9 >= *l);
        }
    }

    #[test]
    fn normalized_match_is_bounded_symmetric_and_scale_free(
        a in feature_strategy((2, 2, 3, 3)),
        b in feature_strategy((2, 2, 3, 3)),
        s in 0.1f64..10.0,
    ) {
        let d = normalized_l2_match(&a, &b).unwrap().scalar();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
        prop_assert!((d - normalized_l2_match(&b, &a).unwrap().scalar()).abs() < 1e-12);
        let scaled = a.with_flat(a.flat().iter().map(|v| v * s).collect());
        prop_assert!((d - normalized_l2_match(&scaled, &b).unwrap().scalar()).abs() < 1e-6);
    }

    #[test]
    fn attention_is_nonnegative_and_shift_keeps_it_so(f in feature_strategy((2, 3, 4, 4))) {
        let a = attention_map(&f);
        prop_assert!(a.flat().iter().all(|&v| v >= 0.0));
        prop_assert!(diversify_attention(&a).flat().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn attention_to_feature_realizes_the_target(f in feature_strategy((1, 3, 4, 4)), g in feature_strategy((1, 1, 4, 4))) {
        let a = attention_map(&f);
        let target = attention_map(&g);
        let fbar = attention_to_feature(&f, &a, &target).unwrap();
        let back = attention_map(&fbar);
        for ((&src, &want), &got) in a.flat().iter().zip(target.flat()).zip(back.flat()) {
            if src > 1e-3 {
                prop_assert!((got - want).abs() <= 1e-4 * want.max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn combined_loss_scalar_is_the_weighted_sum(
        ce in 0.0f64..5.0, kl in 0.0f64..1.0, feat in 0.0f64..2.0, selfl in 0.0f64..2.0,
        t in 1.0f64..4.0, lf in 0.0f64..20.0, ls in 0.0f64..2000.0,
    ) {
        let total = leader_loss(
            &LossValue::single("ce", ce),
            &LossValue::single("kl", kl),
            &LossValue::single("feat", feat),
            &LossValue::single("self", selfl),
            t, lf, ls,
        ).unwrap();
        let want = ce + t * t * kl + lf * feat + ls * selfl;
        prop_assert!((total.scalar() - want).abs() <= 1e-9 * want.max(1.0));
        let from_parts: f64 = total.components().iter().map(|c| c.weight * c.value).sum();
        prop_assert!((total.scalar() - from_parts).abs() <= 1e-9 * want.max(1.0));
    }
}

#[test]
fn reference_examples() {
    let l = |v: f64| LossValue::single("x", v);
    let total = leader_loss(&l(1.0), &l(0.1), &l(0.01), &l(0.001), 2.0, 10.0, 1e3).unwrap();
    assert!((total.scalar() - 2.5).abs() < 1e-12);
    let one = FeatureMap::from_shape_vec((1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
    let other = FeatureMap::from_shape_vec((1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
    let d = naive_diversity_loss(&[vec![one], vec![other]]).unwrap().scalar();
    assert!((d + 2.0 * 2f64.sqrt()).abs() < 1e-9);
}

#[test]
fn negative_weights_are_config_errors() {
    let l = LossValue::single("x", 1.0);
    assert!(leader_loss(&l, &l, &l, &l, 2.0, -1.0, 1.0).unwrap_err().is_config());
    assert!(common_student_loss(&l, &l, -1e-5).unwrap_err().is_config());
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = FeatureMap::from_shape_vec((1, 1, 2, 2), vec![1.0; 4]).unwrap();
    let b = FeatureMap::from_shape_vec((1, 1, 1, 4), vec![1.0; 4]).unwrap();
    assert!(normalized_l2_match(&a, &b).is_err());
    let err = leader_feature_loss(&a, &b, &a, &a).unwrap_err().to_string();
    assert!(err.contains("fused"), "{err}");
}
