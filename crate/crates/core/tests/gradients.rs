use meterguard::data::{Label, Provenance};
use meterguard::models::{build_model, ArchitectureId, Family};
use meterguard::nn::{finite_diff_gradient, max_relative_error, Mode, NeuralModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn random_input(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..48).map(|_| rng.gen_range(0.0..1.5)).collect()
}

fn check_family(family: Family, side: Provenance, seed: u64) {
    let model = build_model(&ArchitectureId::new(family, side, 0.25), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for label in [Label::Normal, Label::Theft] {
        let x = random_input(&mut rng);
        let input = Tensor::new(vec![1, 48], x).unwrap();
        let onehot = Tensor::new(vec![1, 2], label.one_hot().to_vec()).unwrap();
        let analytic = model.input_gradient(&input, &onehot).unwrap();
        let numeric = finite_diff_gradient(&model, &input, &onehot, H).unwrap();
        let err = max_relative_error(analytic.data(), numeric.data(), 1e-7);
        assert!(err <= 1e-3, "{family} {side} {label:?}: relative error {err}");
    }
}

#[test]
fn fnn_input_gradient_matches_finite_differences() {
    check_family(Family::Fnn, Provenance::Defender, 1);
    check_family(Family::Fnn, Provenance::Attacker, 2);
}

#[test]
fn cnn_input_gradient_matches_finite_differences() {
    check_family(Family::Cnn, Provenance::Defender, 3);
    check_family(Family::Cnn, Provenance::Attacker, 4);
}

#[test]
fn lstm_input_gradient_matches_finite_differences() {
    check_family(Family::Rnn, Provenance::Defender, 5);
    check_family(Family::Rnn, Provenance::Attacker, 6);
}

fn numeric<F: Fn(&NeuralModel, &Tensor) -> f64>(model: &NeuralModel, x: &[f64], f: F) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += H;
            minus[i] -= H;
            let p = Tensor::new(vec![1, x.len()], plus).unwrap();
            let m = Tensor::new(vec![1, x.len()], minus).unwrap();
            (f(model, &p) - f(model, &m)) / (2.0 * H)
        })
        .collect()
}

#[test]
fn probability_and_margin_gradients_match_finite_differences() {
    let model = build_model(&ArchitectureId::new(Family::Fnn, Provenance::Defender, 0.25), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_input(&mut rng);
    let input = Tensor::new(vec![1, 48], x.clone()).unwrap();

    let p_theft = model.prob_input_gradient(&input, 1).unwrap();
    let fd = numeric(&model, &x, |m, t| m.forward(t, Mode::Infer).unwrap().data()[1]);
    assert!(max_relative_error(p_theft.data(), &fd, 1e-8) <= 1e-3);

    let margin = model.logit_input_gradient(&input, &[-1.0, 1.0]).unwrap();
    let fd = numeric(&model, &x, |m, t| {
        let z = m.logits(t, Mode::Infer).unwrap();
        z.data()[1] - z.data()[0]
    });
    assert!(max_relative_error(margin.data(), &fd, 1e-8) <= 1e-3);
}

#[test]
fn batched_gradients_equal_per_row_gradients() {
    let model = build_model(&ArchitectureId::new(Family::Cnn, Provenance::Defender, 0.125), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| random_input(&mut rng)).collect();
    let labels: Vec<f64> = (0..40).flat_map(|i| if i % 2 == 0 { Label::Normal.one_hot() } else { Label::Theft.one_hot() }).collect();
    let batch = model
        .input_gradient(&Tensor::from_rows(&rows).unwrap(), &Tensor::new(vec![40, 2], labels.clone()).unwrap())
        .unwrap();
    for (i, row) in rows.iter().enumerate() {
        let single = model
            .input_gradient(
                &Tensor::new(vec![1, 48], row.clone()).unwrap(),
                &Tensor::new(vec![1, 2], labels[2 * i..2 * i + 2].to_vec()).unwrap(),
            )
            .unwrap();
        assert_eq!(batch.row(i), single.data());
    }
}

#[test]
fn every_gradient_entry_point_is_counted() {
    let model = build_model(&ArchitectureId::new(Family::Fnn, Provenance::Attacker, 0.125), 2).unwrap();
    let x = Tensor::new(vec![2, 48], vec![0.5; 96]).unwrap();
    let y = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(model.gradient_calls(), 0);
    model.forward(&x, Mode::Infer).unwrap();
    assert_eq!(model.gradient_calls(), 0);
    model.input_gradient(&x, &y).unwrap();
    model.prob_input_gradient(&x, 0).unwrap();
    model.logit_input_gradient(&x, &[1.0, -1.0]).unwrap();
    assert_eq!(model.gradient_calls(), 3);
}
