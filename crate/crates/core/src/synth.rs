//! Synthetic datasets with planted annotation bias, used for end-to-end
//! checks and demos. Two "general" predicates each have an "informative"
//! partner; a fraction of general-labelled relations really belong to the
//! partner (their base embeddings sit in its cluster and the external model
//! prefers it).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{EmbeddingConfig, Inputs, PipelineConfig, ResampleConfig};
use crate::corpus::{
    save_dataset, save_labels, write_confusion, write_predictions, ConfusionMatrix, Dataset, EntityRef, PredicateId,
    PredicateVocab, PredictionRecord, Predictions, Provenance, RelationId, RelationInstance,
};
use crate::embedding::{EmbeddingTable, EmbeddingVector};
use crate::error::{Error, Result};

pub const LABELS: [&str; 8] = [
    "on",
    "standing on",
    "near",
    "beside",
    "holding",
    "looking at",
    "riding",
    "eating",
];

/// Relative class sizes at the reference scale of 2,000 relations.
const WEIGHTS: [usize; 8] = [500, 150, 500, 150, 200, 200, 150, 150];

/// (general, informative) predicate pairs.
pub const PARTNERS: [(PredicateId, PredicateId); 2] = [(0, 1), (2, 3)];

const ENTITIES: [&str; 10] = [
    "person", "horse", "dog", "cup", "table", "snow", "tree", "food", "chair", "bench",
];

const RELATIONS_PER_IMAGE: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub relations: usize,
    pub planted_fraction: f64,
    pub na_pairs: usize,
    pub base_dim: usize,
    /// Per-coordinate Gaussian noise around each class center.
    pub noise: f64,
    /// Cosine between a general center and its informative partner.
    pub partner_cosine: f64,
    /// Probability that the external model misranks an unplanted relation.
    pub mistake_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            relations: 2000,
            planted_fraction: 0.2,
            na_pairs: 100,
            base_dim: 32,
            noise: 0.05,
            partner_cosine: 0.9,
            mistake_rate: 0.03,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.relations < 2 * LABELS.len() {
            return Err(Error::Config(format!("need at least {} relations", 2 * LABELS.len())));
        }
        if !(0.0..1.0).contains(&self.planted_fraction) || !(0.0..=1.0).contains(&self.mistake_rate) {
            return Err(Error::Config("fractions must lie in [0, 1)".into()));
        }
        if self.base_dim < LABELS.len() {
            return Err(Error::Config(format!("base_dim must be >= {}", LABELS.len())));
        }
        if !(self.noise >= 0.0) || !(self.partner_cosine > -1.0 && self.partner_cosine < 1.0) {
            return Err(Error::Config("noise must be >= 0 and partner_cosine in (-1, 1)".into()));
        }
        Ok(())
    }

    fn class_sizes(&self) -> Vec<usize> {
        let total: usize = WEIGHTS.iter().sum();
        let mut sizes: Vec<usize> = WEIGHTS.iter().map(|w| (w * self.relations / total).max(2)).collect();
        // Hand the rounding remainder to the first class.
        let assigned: usize = sizes.iter().sum();
        if assigned < self.relations {
            sizes[0] += self.relations - assigned;
        }
        sizes
    }
}

/// A generated fixture plus its ground truth.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub dataset: Dataset,
    pub predictions: Predictions,
    pub confusion: ConfusionMatrix,
    pub embeddings: EmbeddingTable,
    /// Planted relation id → the predicate it truly belongs to.
    pub planted: BTreeMap<RelationId, PredicateId>,
}

fn orthonormal_centers(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Array1<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Array1<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            basis.push(v / n);
        }
    }
    basis
}

fn score_vector(
    q: usize,
    top: PredicateId,
    top_range: (f64, f64),
    second: Option<(PredicateId, (f64, f64))>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut scores: Vec<f64> = (0..q).map(|_| rng.random_range(0.0..0.15)).collect();
    scores[top] = rng.random_range(top_range.0..top_range.1);
    if let Some((p, (lo, hi))) = second {
        scores[p] = rng.random_range(lo..hi);
    }
    scores
}

pub fn generate(spec: &SynthSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let q = LABELS.len();
    let vocab = PredicateVocab::new(LABELS.iter().map(|s| s.to_string()).collect())?;

    // Eight orthonormal axes: one per general or independent class, and one
    // off-axis direction per informative partner.
    let axes = orthonormal_centers(q, spec.base_dim, &mut rng);
    let c = spec.partner_cosine;
    let s = (1.0 - c * c).sqrt();
    let centers: Vec<Array1<f64>> = vec![
        axes[0].clone(),
        &axes[0] * c + &axes[6] * s,
        axes[1].clone(),
        &axes[1] * c + &axes[7] * s,
        axes[2].clone(),
        axes[3].clone(),
        axes[4].clone(),
        axes[5].clone(),
    ];

    let sizes = spec.class_sizes();
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut labels: Vec<PredicateId> = sizes
        .iter()
        .enumerate()
        .flat_map(|(p, n)| std::iter::repeat_n(p, *n))
        .collect();
    // Interleave classes across images.
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }

    let mut planted = BTreeMap::new();
    let mut relations = Vec::with_capacity(labels.len());
    let mut records = Vec::with_capacity(labels.len() + spec.na_pairs);
    let mut table = EmbeddingTable::new(spec.base_dim)?;
    let mut images = Vec::new();

    // Plant exactly ⌊fraction · |general|⌋ per general class.
    let mut plant_quota: BTreeMap<PredicateId, usize> = PARTNERS
        .iter()
        .map(|&(g, _)| (g, (spec.planted_fraction * sizes[g] as f64).floor() as usize))
        .collect();
    let mut remaining_general: BTreeMap<PredicateId, usize> = PARTNERS.iter().map(|&(g, _)| (g, sizes[g])).collect();

    for (k, &label) in labels.iter().enumerate() {
        let id = k as RelationId;
        let image = format!("img{:05}", k / RELATIONS_PER_IMAGE);
        if k % RELATIONS_PER_IMAGE == 0 {
            images.push(image.clone());
        }
        let slot = k % RELATIONS_PER_IMAGE;
        let subject = EntityRef::new(*ENTITIES[..3].choose(&mut rng).expect("nonempty"), format!("s{slot}"));
        let object = EntityRef::new(*ENTITIES[3..].choose(&mut rng).expect("nonempty"), format!("o{slot}"));

        // Sequential sampling without replacement gives the exact quota.
        let mut truth = label;
        if let Some(&(_, partner)) = PARTNERS.iter().find(|(g, _)| *g == label) {
            let left = remaining_general[&label];
            let quota = plant_quota[&label];
            if rng.random_range(0..left) < quota {
                truth = partner;
                planted.insert(id, partner);
                *plant_quota.get_mut(&label).expect("present") -= 1;
            }
            *remaining_general.get_mut(&label).expect("present") -= 1;
        }

        let v: Vec<f64> = centers[truth].iter().map(|c| c + normal.sample(&mut rng)).collect();
        table.insert(id, EmbeddingVector::new(v)?)?;

        let scores = if truth != label {
            score_vector(q, truth, (0.6, 0.95), Some((label, (0.2, 0.5))), &mut rng)
        } else if rng.random::<f64>() < spec.mistake_rate {
            let mut wrong = rng.random_range(0..q - 1);
            if wrong >= label {
                wrong += 1;
            }
            score_vector(q, wrong, (0.5, 0.9), Some((label, (0.2, 0.45))), &mut rng)
        } else {
            score_vector(q, label, (0.5, 0.9), None, &mut rng)
        };
        records.push(PredictionRecord {
            relation_id: id,
            scores,
            na_score: rng.random_range(0.01..0.2),
        });
        relations.push(RelationInstance {
            relation_id: id,
            image_id: image,
            subject,
            object,
            predicate: Some(label),
            provenance: Provenance::Original,
        });
    }

    let mut na_pairs = Vec::with_capacity(spec.na_pairs);
    for n in 0..spec.na_pairs {
        let id = (labels.len() + n) as RelationId;
        let image = images[n % images.len()].clone();
        let subject = EntityRef::new(*ENTITIES.choose(&mut rng).expect("nonempty"), format!("na_s{n}"));
        let object = EntityRef::new(*ENTITIES.choose(&mut rng).expect("nonempty"), format!("na_o{n}"));
        let guess = rng.random_range(0..q);
        records.push(PredictionRecord {
            relation_id: id,
            scores: score_vector(q, guess, (0.3, 0.6), None, &mut rng),
            na_score: rng.random_range(0.01..0.3),
        });
        na_pairs.push(RelationInstance {
            relation_id: id,
            image_id: image,
            subject,
            object,
            predicate: None,
            provenance: Provenance::Original,
        });
    }

    let dataset = Dataset::new(
        vocab,
        ENTITIES.iter().map(|s| s.to_string()).collect(),
        images,
        relations,
        na_pairs,
    )?;
    let predictions = Predictions::new(records, q)?;
    let confusion = ConfusionMatrix::from_predictions(&dataset, &predictions)?;
    Ok(Fixture {
        dataset,
        predictions,
        confusion,
        embeddings: table,
        planted,
    })
}

/// File names written by [`Fixture::write`].
pub mod files {
    pub const DATASET: &str = "dataset.jsonl";
    pub const PREDICATES: &str = "predicates.json";
    pub const ENTITIES: &str = "entities.json";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const CONFUSION: &str = "confusion.csv";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const PLANTED: &str = "planted.json";
    pub const CONFIG: &str = "config.json";
}

impl Fixture {
    /// A config that points at the files written by [`Fixture::write`],
    /// with paths relative to `dir`.
    pub fn config(&self, seed: u64) -> PipelineConfig {
        PipelineConfig {
            inputs: Inputs {
                dataset: PathBuf::from(files::DATASET),
                predicates: PathBuf::from(files::PREDICATES),
                entities: PathBuf::from(files::ENTITIES),
                predictions: PathBuf::from(files::PREDICTIONS),
                confusion: PathBuf::from(files::CONFUSION),
                embeddings: Some(PathBuf::from(files::EMBEDDINGS)),
            },
            seed,
            embedding: EmbeddingConfig {
                dim: self.embeddings.dim(),
                ..EmbeddingConfig::default()
            },
            train: Default::default(),
            prototype: Default::default(),
            transfer: Default::default(),
            // Counts here are tiny next to the corpora the default threshold
            // is tuned for; scale t so common triplets sit near R = 1.
            resample: ResampleConfig {
                t: (self.dataset.relations.len() as f64 / 20.0).powi(2),
                ..ResampleConfig::default()
            },
            audit: Default::default(),
        }
    }

    /// Writes the fixture and a matching `config.json` into `dir`.
    pub fn write(&self, dir: &Path, seed: u64) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab = &self.dataset.vocab;
        save_labels(vocab.labels(), &dir.join(files::PREDICATES))?;
        save_labels(&self.dataset.entity_vocab, &dir.join(files::ENTITIES))?;
        save_dataset(&self.dataset, &dir.join(files::DATASET))?;
        write_file(&dir.join(files::PREDICTIONS), |w| {
            write_predictions(self.predictions.iter(), w)
        })?;
        write_file(&dir.join(files::CONFUSION), |w| {
            write_confusion(&self.confusion, vocab, w)
        })?;
        self.embeddings.save(
            &["# source: synthetic planted-bias fixture"],
            &dir.join(files::EMBEDDINGS),
        )?;
        let planted: BTreeMap<RelationId, &str> = self.planted.iter().map(|(id, p)| (*id, vocab.label(*p))).collect();
        write_file(&dir.join(files::PLANTED), |w| {
            serde_json::to_writer_pretty(&mut *w, &planted).map_err(std::io::Error::other)
        })?;
        let config_path = dir.join(files::CONFIG);
        write_file(&config_path, |w| {
            serde_json::to_writer_pretty(&mut *w, &self.config(seed)).map_err(std::io::Error::other)
        })?;
        Ok(config_path)
    }
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    body(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Reads `planted.json` back as relation id → predicate label.
pub fn load_planted(path: &Path) -> Result<BTreeMap<RelationId, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}
