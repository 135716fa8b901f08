//! Test-only oracles, kept independent of the library's loss/gradient path.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use predbias::contrastive::{encode, negative_mass, positive_mass};
use predbias::{ConfusionMatrix, EncoderParams, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Total objective evaluated directly from the mass definitions:
/// mean of −ln(f_pos / (f_pos + f_neg)) plus λ Σ_i Var(class(i)).
pub fn reference_total(
    weight: &Array2<f64>,
    base: &Array2<f64>,
    predicates: &[usize],
    confusion: &ConfusionMatrix,
    config: &TrainConfig,
) -> f64 {
    let params = EncoderParams::new(weight.clone()).unwrap();
    let h: Vec<Vec<f64>> = base
        .rows()
        .into_iter()
        .map(|r| encode(&params, r.as_slice().unwrap()).unwrap().into_inner())
        .collect();
    let mut losses: Vec<(usize, f64)> = Vec::new();
    for i in 0..h.len() {
        let positives: Vec<&[f64]> = (0..h.len())
            .filter(|&j| j != i && predicates[j] == predicates[i])
            .map(|j| h[j].as_slice())
            .collect();
        let negatives: Vec<(&[f64], usize)> = (0..h.len())
            .filter(|&j| predicates[j] != predicates[i])
            .map(|j| (h[j].as_slice(), predicates[j]))
            .collect();
        let Some(pos) = positive_mass(&h[i], &positives, config.margin(), config.temperature).unwrap() else {
            continue;
        };
        let neg = negative_mass(&h[i], predicates[i], &negatives, confusion, config.temperature).unwrap();
        losses.push((predicates[i], -(pos / (pos + neg)).ln()));
    }
    let mean = losses.iter().map(|l| l.1).sum::<f64>() / losses.len() as f64;
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (p, l) in &losses {
        by_class.entry(*p).or_default().push(*l);
    }
    let mut irm = 0.0;
    for ls in by_class.values() {
        let m = ls.iter().sum::<f64>() / ls.len() as f64;
        let var = ls.iter().map(|l| (l - m).powi(2)).sum::<f64>() / ls.len() as f64;
        irm += config.lambda * var * ls.len() as f64;
    }
    mean + irm
}

/// Central differences of `f` with respect to every weight entry.
pub fn finite_difference(weight: &Array2<f64>, step: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(weight.dim());
    for idx in ndarray::indices(weight.dim()) {
        let mut plus = weight.clone();
        plus[idx] += step;
        let mut minus = weight.clone();
        minus[idx] -= step;
        grad[idx] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

/// Largest entrywise relative error, with magnitudes below `floor` treated as `floor`.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub struct GradCase {
    pub weight: Array2<f64>,
    pub base: Array2<f64>,
    pub predicates: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

/// Random case: `dim × dim` weight near identity, `batch` base rows,
/// `q` classes with at least two members each, random confusion entries.
pub fn random_case(seed: u64, dim: usize, batch: usize, q: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weight = Array2::eye(dim);
    weight.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    let base = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0));
    let predicates: Vec<usize> = (0..batch).map(|k| k % q).collect();
    let rows: Vec<Vec<f64>> = (0..q)
        .map(|i| {
            (0..q)
                .map(|j| if i == j { 1.0 } else { rng.random_range(0.0..0.9) })
                .collect()
        })
        .collect();
    GradCase {
        weight,
        base,
        predicates,
        confusion: ConfusionMatrix::new(rows).unwrap(),
    }
}

pub struct PlantedOutcome {
    pub planted: usize,
    pub planted_correct: usize,
    pub unplanted: usize,
    pub unplanted_moved: usize,
    pub seconds: f64,
}

/// Generates the planted-bias fixture, runs every stage, and scores the
/// relabels against the planted truth.
pub fn run_planted(spec: &predbias::synth::SynthSpec, dir: &std::path::Path) -> PlantedOutcome {
    use predbias::pipeline::{artifacts, load_plan};
    use predbias::{MoveKind, Pipeline, PipelineConfig};

    let start = std::time::Instant::now();
    let fixture = predbias::synth::generate(spec).unwrap();
    let config_path = fixture.write(&dir.join("fixture"), spec.seed).unwrap();
    let config = PipelineConfig::load(&config_path).unwrap();
    let pipeline = Pipeline::new(config, dir.join("out")).unwrap();
    pipeline.run_all().unwrap();
    let seconds = start.elapsed().as_secs_f64();

    let plan = load_plan(&pipeline.artifact(artifacts::PLAN), &fixture.dataset.vocab).unwrap();
    let relabels: BTreeMap<u64, usize> = plan
        .moves
        .iter()
        .filter(|m| m.kind == MoveKind::Indistinguishable)
        .map(|m| (m.relation_id, m.to))
        .collect();
    let planted_correct = fixture
        .planted
        .iter()
        .filter(|(id, truth)| relabels.get(id) == Some(truth))
        .count();
    let unplanted_moved = relabels.keys().filter(|id| !fixture.planted.contains_key(id)).count();
    PlantedOutcome {
        planted: fixture.planted.len(),
        planted_correct,
        unplanted: fixture.dataset.relations.len() - fixture.planted.len(),
        unplanted_moved,
        seconds,
    }
}

/// Random annotated dataset: `images` images with 0..=6 relations each over
/// `q` predicates and a small entity vocabulary, plus a few NA pairs.
pub fn random_dataset(seed: u64, images: usize, q: usize) -> predbias::Dataset {
    use predbias::{EntityRef, PredicateVocab, Provenance, RelationInstance};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = ["a", "b", "c", "d"];
    let vocab = PredicateVocab::new((0..q).map(|p| format!("p{p}")).collect()).unwrap();
    let mut relations = Vec::new();
    let mut na_pairs = Vec::new();
    let mut next_id = 0u64;
    let image_ids: Vec<String> = (0..images).map(|i| format!("im{i}")).collect();
    for image in &image_ids {
        for k in 0..rng.random_range(0..=6usize) {
            relations.push(RelationInstance {
                relation_id: next_id,
                image_id: image.clone(),
                subject: EntityRef::new(entities[rng.random_range(0..4)], format!("s{k}")),
                object: EntityRef::new(entities[rng.random_range(0..4)], format!("o{k}")),
                predicate: Some(rng.random_range(0..q)),
                provenance: Provenance::Original,
            });
            next_id += 1;
        }
        for k in 0..rng.random_range(0..=2usize) {
            na_pairs.push(RelationInstance {
                relation_id: next_id,
                image_id: image.clone(),
                subject: EntityRef::new(entities[rng.random_range(0..4)], format!("ns{k}")),
                object: EntityRef::new(entities[rng.random_range(0..4)], format!("no{k}")),
                predicate: None,
                provenance: Provenance::Original,
            });
            next_id += 1;
        }
    }
    predbias::Dataset::new(
        vocab,
        entities.iter().map(|s| s.to_string()).collect(),
        image_ids,
        relations,
        na_pairs,
    )
    .unwrap()
}
