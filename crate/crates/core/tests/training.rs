mod common;

use ndarray::Array2;
use predbias::contrastive::{fit, loss_and_gradient, NoHook, TrainingSet};
use predbias::embedding::{featurize, raw_cosine};
use predbias::{ConfusionMatrix, EncoderParams, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn word(rng: &mut ChaCha8Rng, prefix: char) -> String {
    let mut w = String::from(prefix);
    for _ in 0..rng.random_range(3..9) {
        w.push(rng.random_range(b'a'..=b'z') as char);
    }
    w
}

#[test]
fn disjoint_sentences_are_nearly_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let a = word(&mut rng, 'x');
        let b = word(&mut rng, 'q');
        let va = featurize(&a, 4096, 7).unwrap();
        let vb = featurize(&b, 4096, 7).unwrap();
        worst = worst.max(raw_cosine(&va, &vb).unwrap().abs());
    }
    assert!(worst < 0.1, "max |cos| = {worst}");
}

fn separable_set(seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 40;
    let mut base = Array2::zeros((n, 8));
    let mut predicates = Vec::new();
    for k in 0..n {
        let class = k % 2;
        for d in 0..8 {
            base[[k, d]] = rng.random_range(-0.5..0.5);
        }
        base[[k, class]] += 3.0;
        predicates.push(class);
    }
    TrainingSet::new((0..n as u64).collect(), base, predicates).unwrap()
}

#[test]
fn loss_is_monotone_on_separable_data() {
    let set = separable_set(3);
    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: 20,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let out = fit(&set, &ConfusionMatrix::zeros(2), &config, 8, &mut NoHook).unwrap();
    let losses: Vec<f64> = out.trace.iter().map(|t| t.mean_lm).collect();
    assert_eq!(losses.len(), 20);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss rose: {losses:?}");
    }
}

#[test]
fn fixed_seed_gives_identical_traces() {
    let set = separable_set(4);
    let config = TrainConfig {
        learning_rate: 1e-3,
        epochs: 5,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let a = fit(&set, &ConfusionMatrix::zeros(2), &config, 8, &mut NoHook).unwrap();
    let b = fit(&set, &ConfusionMatrix::zeros(2), &config, 8, &mut NoHook).unwrap();
    let bits = |o: &predbias::contrastive::FitOutcome| -> Vec<(u64, u64)> {
        o.trace
            .iter()
            .map(|t| (t.mean_lm.to_bits(), t.l_irm.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.params, b.params);
}

#[test]
fn single_class_batch_has_zero_gradient() {
    let case = common::random_case(8, 8, 6, 1);
    let params = EncoderParams::new(case.weight).unwrap();
    let config = TrainConfig::default();
    let eval = loss_and_gradient(&params, case.base.view(), &case.predicates, &case.confusion, &config).unwrap();
    assert_eq!(eval.breakdown.total, 0.0);
    assert!(eval.gradient.iter().all(|g| *g == 0.0));
    let no_irm = TrainConfig { lambda: 0.0, ..config };
    let plain = loss_and_gradient(&params, case.base.view(), &case.predicates, &case.confusion, &no_irm).unwrap();
    assert_eq!(plain.gradient, eval.gradient);
}
