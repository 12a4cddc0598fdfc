use meterguard::attacks::{
    clip_nonnegative, deepfool_attack, fgsm_attack, fgsm_step, fgv_step, generate_batch, ssf_iter_trajectory,
    ssf_step, va1_attack, va2_attack, vector_rng, AttackConfig, AttackKind, AttackParams,
};
use meterguard::Error;
use meterguard::data::{
    apply_theft_scenario, build_labeled_dataset, split_dataset, DailyProfile, Label, LabeledDataset, Provenance,
    ScenarioMix, TheftScenario, READINGS_PER_DAY, SCALE_BOUNDS,
};
use meterguard::eval::{average_l1, recall_of};
use meterguard::models::{classify, metrics_from_predictions};
use meterguard::nn::{softmax_rows, LayerSpec, Mode, NeuralModel, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn readings() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..5.0, READINGS_PER_DAY)
}

fn profile() -> impl Strategy<Value = DailyProfile> {
    readings().prop_map(|r| DailyProfile::from_slice(&r).unwrap())
}

fn apply(p: &DailyProfile, s: TheftScenario, seed: u64) -> [f64; READINGS_PER_DAY] {
    *apply_theft_scenario(p, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().readings()
}

/// Linear two-class model: `z = W a + b` with Normal favoured by `bias`.
fn linear_model(weights: &[f64], bias: f64) -> NeuralModel {
    let w = Tensor::new(vec![READINGS_PER_DAY, 2], weights.to_vec()).unwrap();
    let b = Tensor::new(vec![2], vec![bias, 0.0]).unwrap();
    NeuralModel::from_parts(
        vec![READINGS_PER_DAY],
        vec![LayerSpec::SoftmaxOutput { classes: 2 }],
        vec![vec![w, b]],
    )
    .unwrap()
}

fn small_model(seed: u64) -> NeuralModel {
    NeuralModel::new(
        vec![READINGS_PER_DAY],
        vec![LayerSpec::dense(8), LayerSpec::SoftmaxOutput { classes: 2 }],
        seed,
    )
    .unwrap()
}

proptest! {
    fn h1_scales_every_reading_by_one_alpha(p in profile(), alpha in SCALE_BOUNDS.0..SCALE_BOUNDS.1) {
        let out = apply(&p, TheftScenario::H1 { alpha }, 0);
        for (o, m) in out.iter().zip(p.readings()) {
            prop_assert_eq!(*o, alpha * m);
            prop_assert!(*o <= 0.8 * m);
        }
    }

    fn h2_factors_stay_within_bounds(p in profile(), seed in any::<u64>()) {
        let (low, high) = SCALE_BOUNDS;
        let out = apply(&p, TheftScenario::H2 { low, high }, seed);
        for (o, m) in out.iter().zip(p.readings()) {
            prop_assert!(*o >= low * m && *o <= high * m);
        }
    }

    fn h3_zeroes_exactly_the_interval(p in profile(), start in 1usize..=48, len in 0usize..48) {
        let end = (start + len).min(48);
        let out = apply(&p, TheftScenario::H3 { start, end }, 0);
        for t in 1..=48 {
            if (start..=end).contains(&t) {
                prop_assert_eq!(out[t - 1], 0.0);
            } else {
                prop_assert_eq!(out[t - 1].to_bits(), p.readings()[t - 1].to_bits());
            }
        }
    }

    fn h4_is_constant_at_the_mean(p in profile()) {
        let out = apply(&p, TheftScenario::H4, 0);
        let mean = p.mean();
        prop_assert!(out.iter().all(|&v| v == mean));
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 48.0 * mean).abs() <= 1e-9 * (48.0 * mean).max(1e-300));
    }

    fn h5_scales_the_mean_within_bounds(p in profile(), seed in any::<u64>()) {
        let (low, high) = SCALE_BOUNDS;
        let out = apply(&p, TheftScenario::H5 { low, high }, seed);
        let mean = p.mean();
        prop_assert!(out.iter().all(|&v| v >= low * mean && v <= high * mean));
    }

    fn h6_is_an_involution_preserving_values(p in profile()) {
        let once = apply(&p, TheftScenario::H6, 0);
        let twice = apply(&DailyProfile::new(once).unwrap(), TheftScenario::H6, 0);
        prop_assert_eq!(&twice, p.readings());
        let mut a = once.to_vec();
        let mut b = p.readings().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert!((once.iter().sum::<f64>() - p.l1()).abs() <= 1e-12 * p.l1().max(1.0));
    }

    fn clip_is_idempotent_and_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 0..64)) {
        let once = clip_nonnegative(&v);
        prop_assert!(once.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(clip_nonnegative(&once), once.clone());
        for (c, x) in once.iter().zip(&v) {
            prop_assert_eq!(*c, x.max(0.0));
        }
    }

    fn fgsm_changes_each_coordinate_by_zero_or_epsilon(
        a in readings(),
        g in prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], READINGS_PER_DAY),
        eps in 1e-3f64..2.0,
    ) {
        let out = fgsm_step(&a, &g, eps);
        for ((o, x), gi) in out.iter().zip(&a).zip(&g) {
            let expected = if *gi > 0.0 { x + eps } else if *gi < 0.0 { x - eps } else { *x };
            prop_assert_eq!(*o, expected);
        }
    }

    fn fgv_changes_each_coordinate_by_epsilon_times_gradient(
        a in readings(),
        g in prop::collection::vec(-1.0f64..1.0, READINGS_PER_DAY),
        eps in 1e-3f64..2.0,
    ) {
        let out = fgv_step(&a, &g, eps);
        for ((o, x), gi) in out.iter().zip(&a).zip(&g) {
            prop_assert_eq!(*o, x + eps * gi);
        }
        prop_assert_eq!(fgv_step(&a, &vec![0.0; READINGS_PER_DAY], eps), a);
    }

    fn ssf_step_has_infinity_norm_size(
        a in readings(),
        g in prop::collection::vec(-1.0f64..1.0, READINGS_PER_DAY),
        size in 1e-3f64..1.0,
    ) {
        let peak = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        match ssf_step(&a, &g, size) {
            None => prop_assert!(peak < 1e-12),
            Some(out) => {
                let mut norm = 0.0f64;
                for ((o, x), gi) in out.iter().zip(&a).zip(&g) {
                    let r = gi * size / peak;
                    prop_assert_eq!(*o, x + r);
                    norm = norm.max(r.abs());
                }
                prop_assert!((norm - size).abs() <= 4.0 * f64::EPSILON * size);
            }
        }
    }

    fn ssf_iterates_move_at_most_size_per_step(seed in 0u64..1000, size in 1e-3f64..0.5) {
        let model = small_model(seed);
        let init = vec![clip_nonnegative(&vec![0.0; READINGS_PER_DAY])];
        let steps: Vec<usize> = (0..=6).collect();
        let snaps = ssf_iter_trajectory(&model, &init, size, &steps).unwrap();
        for pair in snaps.windows(2) {
            let (a, b) = (&pair[0][0], &pair[1][0]);
            prop_assert!(b.iterations <= a.iterations + 1);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((y - x).abs() <= size * (1.0 + 1e-12));
                prop_assert!(*y >= 0.0);
            }
        }
    }

    fn deepfool_leaves_normal_inputs_untouched(
        w in prop::collection::vec(-0.1f64..0.1, 2 * READINGS_PER_DAY),
        a0 in prop::collection::vec(-1.0f64..2.0, READINGS_PER_DAY),
    ) {
        let model = linear_model(&w, 50.0);
        let out = deepfool_attack(&model, &a0, 100).unwrap();
        prop_assert_eq!(out.iterations, 0);
        prop_assert_eq!(out.vector, clip_nonnegative(&a0));
    }

    fn deepfool_success_means_classified_normal(
        w in prop::collection::vec(-0.5f64..0.5, 2 * READINGS_PER_DAY),
        bias in -3.0f64..0.0,
    ) {
        let model = linear_model(&w, bias);
        let a0 = clip_nonnegative(&vec![1e-4; READINGS_PER_DAY]);
        let out = deepfool_attack(&model, &a0, 100);
        if let Ok(out) = out {
            let label = classify(&model, &Tensor::from_rows(&[out.vector.clone()]).unwrap()).unwrap()[0];
            prop_assert!(out.iterations == 100 || label == Label::Normal);
            prop_assert!(out.vector.iter().all(|&x| x >= 0.0));
        }
    }

    fn attack_outputs_are_feasible_and_deterministic(seed in 0u64..500, eps in 0.01f64..1.0) {
        let model = small_model(seed);
        let pool = vec![DailyProfile::from_slice(&[0.5; READINGS_PER_DAY]).unwrap()];
        for params in [
            AttackParams::Fgsm { epsilon: eps },
            AttackParams::Fgv { epsilon: eps },
            AttackParams::Deepfool { max_iter: 20 },
            AttackParams::SsfIter { step: 3, size: eps },
            AttackParams::Va1 { alpha: 0.5 },
            AttackParams::Va2 { u: eps },
            AttackParams::InitOnly,
        ] {
            let config = AttackConfig::new(params, seed);
            let a = generate_batch(&config, 4, &model, "m", &pool);
            let b = generate_batch(&config, 4, &model, "m", &pool);
            prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
            // an untrained ReLU net can be flat around zero, which DeepFool reports
            let a = match a {
                Err(Error::VanishingGradient { .. }) if config.kind() == AttackKind::Deepfool => continue,
                other => other.unwrap(),
            };
            for v in &a.vectors {
                prop_assert_eq!(v.len(), READINGS_PER_DAY);
                prop_assert!(v.iter().all(|&x| x >= 0.0 && x.is_finite()));
            }
        }
    }

    fn fgsm_moves_coordinates_by_epsilon_or_to_zero(seed in 0u64..500, eps in 0.01f64..1.0) {
        let model = small_model(seed);
        let a0: Vec<f64> = (0..READINGS_PER_DAY).map(|i| (i % 5) as f64 * 0.1).collect();
        let out = fgsm_attack(&model, &a0, eps).unwrap();
        for (o, x) in out.iter().zip(&a0) {
            let d = (o - x).abs();
            prop_assert!(d == 0.0 || (d - eps).abs() <= 1e-12 || *o == 0.0);
        }
    }

    fn softmax_rows_are_distributions(z in prop::collection::vec(-500.0f64..500.0, 2..40), t in 1.0f64..200.0) {
        let classes = 2;
        let z = &z[..z.len() / classes * classes];
        let p = softmax_rows(z, classes, t);
        for row in p.chunks(classes) {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    fn unit_temperature_is_the_plain_softmax(seed in 0u64..1000, x in readings()) {
        let model = small_model(seed);
        let t = Tensor::new(vec![1, READINGS_PER_DAY], x).unwrap();
        prop_assert_eq!(
            model.forward_at_temperature(&t, Mode::Infer, 1.0).unwrap(),
            model.forward(&t, Mode::Infer).unwrap()
        );
    }

    fn recall_and_bypass_sum_to_one(theft in prop::collection::vec(any::<bool>(), 1..2000)) {
        let labels: Vec<Label> = theft.iter().map(|&t| if t { Label::Theft } else { Label::Normal }).collect();
        let recall = recall_of(&labels);
        prop_assert_eq!(recall + (1.0 - recall), 1.0);
        prop_assert!((0.0..=1.0).contains(&recall));
    }

    fn classifier_metric_identities(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..500)) {
        let to = |b: bool| if b { Label::Theft } else { Label::Normal };
        let truth: Vec<Label> = pairs.iter().map(|p| to(p.0)).collect();
        let pred: Vec<Label> = pairs.iter().map(|p| to(p.1)).collect();
        let m = metrics_from_predictions(&truth, &pred);
        let total = (m.tp + m.fp + m.tn + m.fn_) as f64;
        prop_assert_eq!(total as usize, pairs.len());
        prop_assert_eq!(m.accuracy, (m.tp + m.tn) as f64 / total);
        if m.fp + m.tn > 0 {
            prop_assert_eq!(m.false_positive_rate, m.fp as f64 / (m.fp + m.tn) as f64);
        }
        if m.tp + m.fn_ > 0 {
            prop_assert_eq!(m.recall, m.tp as f64 / (m.tp + m.fn_) as f64);
        }
    }

    fn split_is_a_disjoint_partition(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let profiles: Vec<DailyProfile> =
            (0..n).map(|i| DailyProfile::from_slice(&[i as f64; READINGS_PER_DAY]).unwrap()).collect();
        let labels: Vec<Label> = (0..n).map(|i| if i % 3 == 0 { Label::Theft } else { Label::Normal }).collect();
        let data = LabeledDataset::new(profiles, labels, Provenance::Defender).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, test) = split_dataset(&data, frac, &mut rng).unwrap();
        prop_assert_eq!(test.len(), (frac * n as f64).round() as usize);
        prop_assert_eq!(train.len() + test.len(), n);
        let mut ids: Vec<usize> =
            train.profiles.iter().chain(&test.profiles).map(|p| p.readings()[0] as usize).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(train.count(Label::Theft) + test.count(Label::Theft), data.count(Label::Theft));
    }

    fn polluted_counts_follow_the_fraction(n in 1usize..200, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let source: Vec<DailyProfile> =
            (0..n).map(|i| DailyProfile::from_slice(&[1.0 + i as f64; READINGS_PER_DAY]).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let built = build_labeled_dataset(&source, n, frac, &ScenarioMix::default(), Provenance::Attacker, &mut rng)
            .unwrap();
        prop_assert_eq!(built.dataset.count(Label::Theft), (frac * n as f64).round() as usize);
        prop_assert!(built.dataset.profiles.iter().all(|p| p.readings().iter().all(|&x| x >= 0.0)));
    }
}

fn va1_is_linear_in_alpha() {
    let base = DailyProfile::from_slice(&(0..48).map(|i| 0.1 * i as f64).collect::<Vec<_>>()).unwrap();
    assert_eq!(va1_attack(&base, 1.0), base.readings().to_vec());
    let half: f64 = va1_attack(&base, 0.5).iter().sum();
    assert_eq!(half, base.l1() / 2.0);
}

fn va2_mean_l1_matches_uniform_expectation() {
    let u = 0.7;
    let draws: Vec<Vec<f64>> = (0..100_000)
        .map(|i| va2_attack(READINGS_PER_DAY, u, &mut vector_rng(3, i)))
        .collect();
    let mean = average_l1(&draws).unwrap();
    let expected = READINGS_PER_DAY as f64 * u / 2.0;
    assert!((mean - expected).abs() / expected < 0.01, "{mean} vs {expected}");
}

/// Every property, by name.
pub const ALL: &[(&str, fn())] = &[
    ("h1_scales_every_reading_by_one_alpha", h1_scales_every_reading_by_one_alpha),
    ("h2_factors_stay_within_bounds", h2_factors_stay_within_bounds),
    ("h3_zeroes_exactly_the_interval", h3_zeroes_exactly_the_interval),
    ("h4_is_constant_at_the_mean", h4_is_constant_at_the_mean),
    ("h5_scales_the_mean_within_bounds", h5_scales_the_mean_within_bounds),
    ("h6_is_an_involution_preserving_values", h6_is_an_involution_preserving_values),
    ("clip_is_idempotent_and_nonnegative", clip_is_idempotent_and_nonnegative),
    ("fgsm_changes_each_coordinate_by_zero_or_epsilon", fgsm_changes_each_coordinate_by_zero_or_epsilon),
    ("fgv_changes_each_coordinate_by_epsilon_times_gradient", fgv_changes_each_coordinate_by_epsilon_times_gradient),
    ("ssf_step_has_infinity_norm_size", ssf_step_has_infinity_norm_size),
    ("ssf_iterates_move_at_most_size_per_step", ssf_iterates_move_at_most_size_per_step),
    ("deepfool_leaves_normal_inputs_untouched", deepfool_leaves_normal_inputs_untouched),
    ("deepfool_success_means_classified_normal", deepfool_success_means_classified_normal),
    ("attack_outputs_are_feasible_and_deterministic", attack_outputs_are_feasible_and_deterministic),
    ("fgsm_moves_coordinates_by_epsilon_or_to_zero", fgsm_moves_coordinates_by_epsilon_or_to_zero),
    ("softmax_rows_are_distributions", softmax_rows_are_distributions),
    ("unit_temperature_is_the_plain_softmax", unit_temperature_is_the_plain_softmax),
    ("recall_and_bypass_sum_to_one", recall_and_bypass_sum_to_one),
    ("classifier_metric_identities", classifier_metric_identities),
    ("split_is_a_disjoint_partition", split_is_a_disjoint_partition),
    ("polluted_counts_follow_the_fraction", polluted_counts_follow_the_fraction),
    ("va1_is_linear_in_alpha", va1_is_linear_in_alpha),
    ("va2_mean_l1_matches_uniform_expectation", va2_mean_l1_matches_uniform_expectation),
];
