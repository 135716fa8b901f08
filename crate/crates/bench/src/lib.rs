//! Shared inputs for the benchmarks, built from the synthetic fixture.

use ndarray::{s, Array2};
use predbias::contrastive::TrainingSet;
use predbias::synth::{generate, Fixture, SynthSpec};

pub fn fixture(relations: usize) -> Fixture {
    generate(&SynthSpec {
        relations,
        ..SynthSpec::default()
    })
    .expect("fixture generation")
}

pub fn training_set(fixture: &Fixture) -> TrainingSet {
    TrainingSet::from_dataset(&fixture.dataset, &fixture.embeddings).expect("embeddings cover the fixture")
}

/// The first `n` base rows and labels of a training set.
pub fn batch(set: &TrainingSet, n: usize) -> (Array2<f64>, Vec<usize>) {
    let n = n.min(set.len());
    (set.base.slice(s![..n, ..]).to_owned(), set.predicates[..n].to_vec())
}
