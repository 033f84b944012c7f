use rand::Rng;
use siolab_core::nnet::{self, LossMode, MlpClassifier};
use siolab_core::seed::stream;
use siolab_core::LabeledSet;

const H: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_set(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> LabeledSet {
    let feats: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledSet::new(feats, labels, dim, classes).unwrap()
}

fn randomize_bias(model: &mut MlpClassifier, rng: &mut impl Rng) {
    for l in model.layers_mut() {
        for b in &mut l.bias {
            *b = rng.random_range(-0.3..0.3);
        }
    }
}

/// Largest relative error between analytic and central-difference parameter
/// gradients.
fn parameter_check(model: &MlpClassifier, batch: &LabeledSet, mode: LossMode, outliers: Option<&LabeledSet>) -> f64 {
    let analytic = nnet::loss(model, batch, mode, outliers).unwrap().gradients;
    let value = |m: &MlpClassifier| nnet::loss(m, batch, mode, outliers).unwrap().value;
    let mut worst: f64 = 0.0;
    for l in 0..model.layers().len() {
        let nw = model.layers()[l].weights.len();
        let nb = model.layers()[l].bias.len();
        for i in 0..nw + nb {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let (p, m, g) = if i < nw {
                (&mut plus.layers_mut()[l].weights[i], &mut minus.layers_mut()[l].weights[i], analytic.layers[l].weights[i])
            } else {
                (&mut plus.layers_mut()[l].bias[i - nw], &mut minus.layers_mut()[l].bias[i - nw], analytic.layers[l].bias[i - nw])
            };
            *p += H;
            *m -= H;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g, numeric));
        }
    }
    worst
}

fn neg_log_max_softmax(model: &MlpClassifier, x: &[f64]) -> f64 {
    let p = nnet::softmax(&model.logits(x).unwrap());
    -p.iter().cloned().fold(f64::MIN, f64::max).ln()
}

fn modes() -> [LossMode; 3] {
    [LossMode::CrossEntropy, LossMode::OutlierExposure { lambda: 0.7 }, LossMode::LogitNorm { tau: 0.5 }]
}

#[test]
fn loss_gradients_match_finite_differences_on_small_models() {
    let mut rng = stream(11, "test.grad", 0);
    for trial in 0..5u64 {
        let mut model = MlpClassifier::init(&[2, 16, 3], 100 + trial).unwrap();
        randomize_bias(&mut model, &mut rng);
        let batch = random_set(&mut rng, 6, 2, 3);
        let outliers = random_set(&mut rng, 4, 2, 3);
        for mode in modes() {
            let o = matches!(mode, LossMode::OutlierExposure { .. }).then_some(&outliers);
            let err = parameter_check(&model, &batch, mode, o);
            assert!(err < 1e-4, "{} trial {trial}: relative error {err}", mode.tag());
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences_on_deeper_model() {
    let mut rng = stream(12, "test.grad", 0);
    let mut model = MlpClassifier::init(&[3, 8, 6, 4], 7).unwrap();
    randomize_bias(&mut model, &mut rng);
    let batch = random_set(&mut rng, 5, 3, 4);
    let outliers = random_set(&mut rng, 3, 3, 4);
    for mode in modes() {
        let o = matches!(mode, LossMode::OutlierExposure { .. }).then_some(&outliers);
        let err = parameter_check(&model, &batch, mode, o);
        assert!(err < 1e-4, "{}: relative error {err}", mode.tag());
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = stream(13, "test.grad", 0);
    for trial in 0..20u64 {
        let mut model = MlpClassifier::init(&[2, 16, 3], 200 + trial).unwrap();
        randomize_bias(&mut model, &mut rng);
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let g = model.input_gradient(&x).unwrap();
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += H;
            xm[i] -= H;
            let numeric = (neg_log_max_softmax(&model, &xp) - neg_log_max_softmax(&model, &xm)) / (2.0 * H);
            let err = rel_err(g[i], numeric);
            assert!(err < 1e-4, "trial {trial} coord {i}: {} vs {numeric}", g[i]);
        }
    }
}
