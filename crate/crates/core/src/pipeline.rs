//! Stage orchestration. Every stage reads its inputs from the output
//! directory (or, for ingest, from the configured source files) and writes
//! fixed-name artifacts back into it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audit::{f_score, ground_truth, mean_recall_at_k, parse_ranked, pr_score, recall_at_k, transfer_report};
use crate::config::{PipelineConfig, ScarcitySource};
use crate::contrastive::{encode_rows, fit, EncoderParams, TrainingSet};
use crate::corpus::{
    identify_indistinguishable, identify_potential_positives, load_confusion, load_dataset, load_labels,
    load_predictions, triplet_to_sentence, write_confusion, write_dataset, write_predictions, Dataset, NaCandidate,
    PredicateVocab, Predictions, RelationId,
};
use crate::embedding::{featurize, load_embeddings, EmbeddingTable};
use crate::error::{Error, Result};
use crate::prototype::{similarity_matrix, write_filtration_log, PrototypeLearner, PrototypeSpace, SimilarityMatrix};
use crate::resample::plan_resampling;
use crate::transfer::{apply_plan, compute_scarcity, plan_indistinguishable, plan_na_promotions, TransferPlan};

/// Fixed artifact names under the output directory.
pub mod artifacts {
    pub const DATASET: &str = "dataset.jsonl";
    pub const PREDICATES: &str = "predicates.json";
    pub const ENTITIES: &str = "entities.json";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const CONFUSION: &str = "confusion.csv";
    pub const IDENTIFIED: &str = "identified.json";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const ENCODER: &str = "encoder.csv";
    pub const LOSS_TRACE: &str = "loss_trace.csv";
    pub const FILTRATION: &str = "filtration.csv";
    pub const PROTOTYPES: &str = "prototypes.csv";
    pub const SIMILARITY: &str = "similarity.csv";
    pub const PLAN: &str = "plan.jsonl";
    pub const ENHANCED: &str = "dataset.enhanced.jsonl";
    pub const REPEAT_FACTORS: &str = "repeat_factors.csv";
    pub const INDEX: &str = "index.txt";
    pub const REPORT: &str = "report.csv";
    pub const SUMMARY: &str = "summary.json";
}

use artifacts as a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Identify,
    Embed,
    Train,
    Prototypes,
    Transfer,
    Resample,
    Audit,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Identify,
        Stage::Embed,
        Stage::Train,
        Stage::Prototypes,
        Stage::Transfer,
        Stage::Resample,
        Stage::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Identify => "identify",
            Stage::Embed => "embed",
            Stage::Train => "train",
            Stage::Prototypes => "prototypes",
            Stage::Transfer => "transfer",
            Stage::Resample => "resample",
            Stage::Audit => "audit",
        }
    }

    /// Artifacts this stage reads from the output directory.
    pub fn requires(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[],
            Stage::Identify => &[a::PREDICATES, a::ENTITIES, a::DATASET, a::PREDICTIONS],
            Stage::Embed => &[a::PREDICATES, a::ENTITIES, a::DATASET],
            Stage::Train => &[a::PREDICATES, a::ENTITIES, a::DATASET, a::CONFUSION, a::EMBEDDINGS],
            Stage::Prototypes => &[a::PREDICATES, a::PROTOTYPES],
            Stage::Transfer => &[
                a::PREDICATES,
                a::ENTITIES,
                a::DATASET,
                a::PREDICTIONS,
                a::IDENTIFIED,
                a::SIMILARITY,
            ],
            Stage::Resample => &[a::PREDICATES, a::ENTITIES, a::DATASET, a::ENHANCED],
            Stage::Audit => &[a::PREDICATES, a::ENTITIES, a::DATASET, a::ENHANCED, a::PLAN],
        }
    }

    pub fn produces(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[a::PREDICATES, a::ENTITIES, a::DATASET, a::PREDICTIONS, a::CONFUSION],
            Stage::Identify => &[a::IDENTIFIED],
            Stage::Embed => &[a::EMBEDDINGS],
            Stage::Train => &[a::ENCODER, a::LOSS_TRACE, a::FILTRATION, a::PROTOTYPES],
            Stage::Prototypes => &[a::SIMILARITY],
            Stage::Transfer => &[a::PLAN, a::ENHANCED],
            Stage::Resample => &[a::REPEAT_FACTORS, a::INDEX],
            Stage::Audit => &[a::REPORT, a::SUMMARY],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Output of the identify stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identified {
    pub indistinguishable: BTreeSet<RelationId>,
    pub na_candidates: Vec<NaCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub recall: f64,
    pub mean_recall: f64,
    pub f: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub relations_before: usize,
    pub relations_after: usize,
    pub na_pairs_before: usize,
    pub na_pairs_after: usize,
    pub indistinguishable_moves: usize,
    pub na_promotions: usize,
    pub transferred_relations: usize,
    pub top_pairs: Vec<(String, String, usize)>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<usize, KMetrics>,
}

/// Writes through a `.partial` sibling and renames on success, so an
/// interrupted stage never leaves a complete-looking artifact behind.
fn write_artifact(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut out = BufWriter::new(file);
    body(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&partial, e))?;
    drop(out);
    std::fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_artifact(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

/// Runs stages against one output directory.
pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { config, out })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn run_all(&self) -> Result<()> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Runs one stage. Missing upstream artifacts yield a dependency error;
    /// any other failure is wrapped with the stage name.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        for name in stage.requires() {
            let path = self.artifact(name);
            if !path.is_file() {
                return Err(Error::Dependency {
                    stage: stage.name(),
                    path,
                });
            }
        }
        log::info!("stage {stage}: start");
        let result = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Identify => self.identify(),
            Stage::Embed => self.embed(),
            Stage::Train => self.train(),
            Stage::Prototypes => self.prototypes(),
            Stage::Transfer => self.transfer(),
            Stage::Resample => self.resample(),
            Stage::Audit => self.audit(),
        };
        result.map_err(|e| Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        })?;
        log::info!("stage {stage}: done");
        Ok(())
    }

    fn vocab(&self) -> Result<PredicateVocab> {
        PredicateVocab::new(load_labels(&self.artifact(a::PREDICATES))?)
    }

    fn dataset(&self, name: &str) -> Result<Dataset> {
        load_dataset(
            &self.artifact(name),
            self.vocab()?,
            load_labels(&self.artifact(a::ENTITIES))?,
        )
    }

    fn predictions(&self, q: usize) -> Result<Predictions> {
        load_predictions(&self.artifact(a::PREDICTIONS), q)
    }

    fn ingest(&self) -> Result<()> {
        let inputs = &self.config.inputs;
        let vocab = PredicateVocab::new(load_labels(&inputs.predicates)?)?;
        let entities = load_labels(&inputs.entities)?;
        let dataset = load_dataset(&inputs.dataset, vocab.clone(), entities.clone())?;
        let predictions = load_predictions(&inputs.predictions, vocab.len())?;
        let confusion = load_confusion(&inputs.confusion, &vocab)?;
        log::info!(
            "ingested {} images, {} relations, {} NA pairs",
            dataset.images.len(),
            dataset.relations.len(),
            dataset.na_pairs.len()
        );
        write_json(&self.artifact(a::PREDICATES), &vocab.labels())?;
        write_json(&self.artifact(a::ENTITIES), &entities)?;
        write_artifact(&self.artifact(a::DATASET), |w| write_dataset(&dataset, w))?;
        write_artifact(&self.artifact(a::PREDICTIONS), |w| {
            write_predictions(predictions.iter(), w)
        })?;
        write_artifact(&self.artifact(a::CONFUSION), |w| {
            write_confusion(&confusion, &vocab, &mut *w)
        })
    }

    fn identify(&self) -> Result<()> {
        let dataset = self.dataset(a::DATASET)?;
        let predictions = self.predictions(dataset.num_predicates())?;
        let identified = Identified {
            indistinguishable: identify_indistinguishable(&dataset, &predictions)?,
            na_candidates: identify_potential_positives(&dataset, &predictions)?,
        };
        log::info!(
            "{} indistinguishable relations, {} NA candidates",
            identified.indistinguishable.len(),
            identified.na_candidates.len()
        );
        write_json(&self.artifact(a::IDENTIFIED), &identified)
    }

    fn embed(&self) -> Result<()> {
        let dataset = self.dataset(a::DATASET)?;
        let (table, comment) = match &self.config.inputs.embeddings {
            Some(path) => (load_embeddings(path)?, "# source: external file".to_string()),
            None => {
                let dim = self.config.embedding.dim;
                let seed = self.config.embedding.seed ^ self.config.seed;
                let mut table = EmbeddingTable::new(dim)?;
                for rel in &dataset.relations {
                    let sentence = triplet_to_sentence(rel, &dataset.vocab)?;
                    table.insert(rel.relation_id, featurize(&sentence, dim, seed)?)?;
                }
                (table, format!("# source: featurizer dim={dim} seed={seed}"))
            }
        };
        table.require_all(dataset.relations.iter().map(|r| r.relation_id))?;
        write_artifact(&self.artifact(a::EMBEDDINGS), |w| {
            table.write_csv(&[comment.as_str()], w)
        })
    }

    fn train(&self) -> Result<()> {
        let dataset = self.dataset(a::DATASET)?;
        let vocab = dataset.vocab.clone();
        let confusion = load_confusion(&self.artifact(a::CONFUSION), &vocab)?;
        let table = load_embeddings(&self.artifact(a::EMBEDDINGS))?;
        let set = TrainingSet::from_dataset(&dataset, &table)?;
        let params = self.config.train_params();
        let projected = self.config.embedding.projected_dim.unwrap_or(table.dim());

        // Prototypes start from the class means under the initial encoder,
        // which `fit` reconstructs from the same seed.
        let initial = EncoderParams::identity_padded(projected, table.dim(), params.init_noise, params.seed)?;
        let (encoded, _) = encode_rows(&initial, set.base.view())?;
        let mut learner = PrototypeLearner::new(
            encoded.view(),
            &set.ids,
            &set.predicates,
            vocab.len(),
            self.config.prototype.clone(),
        )?;
        let outcome = fit(&set, &confusion, &params, projected, &mut learner)?;
        log::info!(
            "trained {} epochs; {} of {} samples remain active",
            outcome.trace.len(),
            learner.state.active_count(),
            set.len()
        );

        write_artifact(&self.artifact(a::ENCODER), |w| {
            for row in outcome.params.weight().rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(","))?;
            }
            Ok(())
        })?;
        write_artifact(&self.artifact(a::LOSS_TRACE), |w| {
            writeln!(w, "epoch,mean_lm,l_irm,active_sample_count")?;
            for t in &outcome.trace {
                writeln!(w, "{},{},{},{}", t.epoch, t.mean_lm, t.l_irm, t.active_count)?;
            }
            Ok(())
        })?;
        write_artifact(&self.artifact(a::FILTRATION), |w| {
            write_filtration_log(&learner.log, &mut *w)
        })?;
        write_artifact(&self.artifact(a::PROTOTYPES), |w| {
            learner.space.write_csv(&vocab, &mut *w)
        })
    }

    fn prototypes(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let path = self.artifact(a::PROTOTYPES);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let space = PrototypeSpace::parse_csv(BufReader::new(file), &path, &vocab)?;
        let similarity = similarity_matrix(&space, &vocab)?;
        write_artifact(&self.artifact(a::SIMILARITY), |w| similarity.write_csv(&vocab, &mut *w))
    }

    fn transfer(&self) -> Result<()> {
        let dataset = self.dataset(a::DATASET)?;
        let vocab = dataset.vocab.clone();
        let predictions = self.predictions(vocab.len())?;
        let identified: Identified = read_json(&self.artifact(a::IDENTIFIED))?;
        let path = self.artifact(a::SIMILARITY);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let similarity = SimilarityMatrix::parse_csv(BufReader::new(file), &path, &vocab)?;

        let scarcity = compute_scarcity(&dataset)?;
        let mut moves = plan_indistinguishable(
            &dataset,
            &identified.indistinguishable,
            &predictions,
            &similarity,
            self.config.transfer.direction_constraint,
        )?;
        moves.extend(plan_na_promotions(
            &dataset,
            &identified.na_candidates,
            &scarcity,
            self.config.transfer.k_g,
        )?);
        let plan = TransferPlan::new(moves)?;
        // The plan is on disk before anything is applied.
        write_artifact(&self.artifact(a::PLAN), |w| plan.write_jsonl(&vocab, w))?;
        let enhanced = apply_plan(&dataset, &plan)?;
        log::info!(
            "applied {} relabels and {} promotions",
            plan.count(crate::transfer::MoveKind::Indistinguishable),
            plan.count(crate::transfer::MoveKind::NaPromotion)
        );
        write_artifact(&self.artifact(a::ENHANCED), |w| write_dataset(&enhanced, w))
    }

    fn resample(&self) -> Result<()> {
        let enhanced = self.dataset(a::ENHANCED)?;
        let scarcity = match self.config.resample.scarcity_source {
            ScarcitySource::Enhanced => compute_scarcity(&enhanced)?,
            ScarcitySource::Original => compute_scarcity(&self.dataset(a::DATASET)?)?,
        };
        let plan = plan_resampling(&enhanced, &scarcity, self.config.resample.t, self.config.seed)?;
        write_artifact(&self.artifact(a::REPEAT_FACTORS), |w| plan.write_factors(w))?;
        write_artifact(&self.artifact(a::INDEX), |w| plan.write_index(w))
    }

    fn audit(&self) -> Result<()> {
        let original = self.dataset(a::DATASET)?;
        let enhanced = self.dataset(a::ENHANCED)?;
        let vocab = original.vocab.clone();
        let path = self.artifact(a::PLAN);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let plan = TransferPlan::parse_jsonl(BufReader::new(file), &path, &vocab)?;
        let report = transfer_report(&original, &enhanced, &plan);

        let mut metrics = BTreeMap::new();
        if let Some(ranked_path) = &self.config.audit.ranked {
            let file = File::open(ranked_path).map_err(|e| Error::io(ranked_path, e))?;
            let ranked = parse_ranked(BufReader::new(file), ranked_path, &vocab)?;
            let gt = ground_truth(&original);
            for &k in &self.config.audit.k {
                let recall = 100.0 * recall_at_k(&gt, &ranked, k)?;
                let mean_recall = 100.0 * mean_recall_at_k(&gt, &ranked, k)?;
                metrics.insert(
                    k,
                    KMetrics {
                        recall,
                        mean_recall,
                        f: f_score(recall, mean_recall),
                        pr: self.config.audit.pq.map(|pq| pr_score(recall, mean_recall, pq)),
                    },
                );
            }
        }

        let summary = Summary {
            relations_before: original.relations.len(),
            relations_after: enhanced.relations.len(),
            na_pairs_before: original.na_pairs.len(),
            na_pairs_after: enhanced.na_pairs.len(),
            indistinguishable_moves: report.indistinguishable_moves,
            na_promotions: report.na_promotions,
            transferred_relations: report.total_moves(),
            top_pairs: report
                .top_pairs
                .iter()
                .map(|p| (p.from.clone(), p.to.clone(), p.count))
                .collect(),
            metrics,
        };
        write_artifact(&self.artifact(a::REPORT), |w| report.write_csv(&mut *w))?;
        write_json(&self.artifact(a::SUMMARY), &summary)
    }
}

/// Reads the identify stage's output.
pub fn load_identified(path: &Path) -> Result<Identified> {
    read_json(path)
}

/// Reads a plan written by the transfer stage.
pub fn load_plan(path: &Path, vocab: &PredicateVocab) -> Result<TransferPlan> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TransferPlan::parse_jsonl(BufReader::new(file), path, vocab)
}

/// Reads `index.txt`.
pub fn load_index(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}
