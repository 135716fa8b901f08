//! Relation datasets, external prediction records and the confusion matrix,
//! plus identification of indistinguishable triplets and NA candidates.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_confusion, load_dataset, load_labels, load_predictions, parse_confusion, parse_dataset, parse_predictions,
    save_dataset, save_labels, write_confusion, write_dataset, write_predictions,
};

pub type PredicateId = usize;
pub type RelationId = u64;

/// Ordered predicate labels with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredicateVocab {
    labels: Vec<String>,
    index: HashMap<String, PredicateId>,
}

impl PredicateVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Vocabulary(format!(
                "need at least 2 predicates, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::Vocabulary(format!("predicate {i} has an empty label")));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate predicate label `{label}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: PredicateId) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Option<PredicateId> {
        self.index.get(label).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityRef {
    pub class_label: String,
    pub segment_id: String,
}

impl EntityRef {
    pub fn new(class_label: impl Into<String>, segment_id: impl Into<String>) -> Self {
        Self {
            class_label: class_label.into(),
            segment_id: segment_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    Transferred,
    NaPromoted,
}

/// One subject-object pair in an image. `predicate` is `None` for NA pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationInstance {
    pub relation_id: RelationId,
    pub image_id: String,
    pub subject: EntityRef,
    pub object: EntityRef,
    pub predicate: Option<PredicateId>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: PredicateVocab,
    pub entity_vocab: Vec<String>,
    /// Image ids in file order, including images without any pairs.
    pub images: Vec<String>,
    pub relations: Vec<RelationInstance>,
    pub na_pairs: Vec<RelationInstance>,
}

impl Dataset {
    /// Builds a dataset and checks every structural invariant.
    pub fn new(
        vocab: PredicateVocab,
        entity_vocab: Vec<String>,
        images: Vec<String>,
        relations: Vec<RelationInstance>,
        na_pairs: Vec<RelationInstance>,
    ) -> Result<Self> {
        let dataset = Self {
            vocab,
            entity_vocab,
            images,
            relations,
            na_pairs,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn num_predicates(&self) -> usize {
        self.vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.vocab.len();
        let mut image_set = BTreeSet::new();
        for image in &self.images {
            if !image_set.insert(image.as_str()) {
                return Err(Error::Validation(format!("duplicate image id `{image}`")));
            }
        }
        let entities: BTreeSet<&str> = self.entity_vocab.iter().map(String::as_str).collect();
        let mut ids = BTreeSet::new();
        let mut segments: HashMap<(&str, &str), &str> = HashMap::new();

        let all = self
            .relations
            .iter()
            .map(|r| (r, false))
            .chain(self.na_pairs.iter().map(|r| (r, true)));
        for (rel, is_na) in all {
            let id = rel.relation_id;
            if !ids.insert(id) {
                return Err(Error::Validation(format!("duplicate relation_id {id}")));
            }
            if !image_set.contains(rel.image_id.as_str()) {
                return Err(Error::Validation(format!(
                    "relation {id} references unknown image `{}`",
                    rel.image_id
                )));
            }
            match (rel.predicate, is_na) {
                (Some(p), false) if p >= q => {
                    return Err(Error::Vocabulary(format!(
                        "relation {id} has predicate index {p}, vocabulary size is {q}"
                    )))
                }
                (None, false) => {
                    return Err(Error::Validation(format!(
                        "annotated relation {id} carries the NA marker"
                    )))
                }
                (Some(_), true) => return Err(Error::Validation(format!("NA pair {id} carries a predicate"))),
                _ => {}
            }
            if rel.subject.segment_id == rel.object.segment_id {
                return Err(Error::Validation(format!(
                    "relation {id}: subject and object share segment `{}`",
                    rel.subject.segment_id
                )));
            }
            for entity in [&rel.subject, &rel.object] {
                if entity.class_label.is_empty() {
                    return Err(Error::Validation(format!("relation {id} has an empty entity class")));
                }
                if !entities.is_empty() && !entities.contains(entity.class_label.as_str()) {
                    return Err(Error::Vocabulary(format!(
                        "relation {id}: unknown entity class `{}`",
                        entity.class_label
                    )));
                }
                let key = (rel.image_id.as_str(), entity.segment_id.as_str());
                match segments.get(&key) {
                    Some(class) if *class != entity.class_label => {
                        return Err(Error::Validation(format!(
                            "segment `{}` in image `{}` has classes `{class}` and `{}`",
                            entity.segment_id, rel.image_id, entity.class_label
                        )))
                    }
                    Some(_) => {}
                    None => {
                        segments.insert(key, entity.class_label.as_str());
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of annotated relations per predicate.
    pub fn predicate_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.vocab.len()];
        for rel in &self.relations {
            if let Some(p) = rel.predicate {
                counts[p] += 1;
            }
        }
        counts
    }

    pub fn relation(&self, id: RelationId) -> Option<&RelationInstance> {
        self.relations.iter().find(|r| r.relation_id == id)
    }

    /// Reorders relations and NA pairs so they follow image order, keeping
    /// the relative order within each image.
    pub fn sort_by_image(&mut self) {
        let position: HashMap<&str, usize> = self
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.as_str(), i))
            .collect();
        let key = |r: &RelationInstance| position.get(r.image_id.as_str()).copied();
        let mut relations = std::mem::take(&mut self.relations);
        let mut na_pairs = std::mem::take(&mut self.na_pairs);
        relations.sort_by_key(|r| key(r));
        na_pairs.sort_by_key(|r| key(r));
        self.relations = relations;
        self.na_pairs = na_pairs;
    }
}

/// An external model's scores for one subject-object pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub relation_id: RelationId,
    pub scores: Vec<f64>,
    pub na_score: f64,
}

impl PredictionRecord {
    pub fn validate(&self, q: usize) -> Result<()> {
        let id = self.relation_id;
        if self.scores.len() != q {
            return Err(Error::Validation(format!(
                "prediction {id} has {} scores, expected {q}",
                self.scores.len()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !s.is_finite() || **s < 0.0 || **s > 1.0) {
            return Err(Error::Validation(format!(
                "prediction {id} has score {s} outside [0, 1]"
            )));
        }
        if !(self.na_score > 0.0 && self.na_score <= 1.0) {
            return Err(Error::Validation(format!(
                "prediction {id} has na_score {} outside (0, 1]",
                self.na_score
            )));
        }
        Ok(())
    }

    /// Highest-scoring predicate; ties resolve to the lowest index.
    pub fn argmax(&self) -> PredicateId {
        argmax(&self.scores)
    }
}

pub(crate) fn argmax(scores: &[f64]) -> PredicateId {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Prediction records keyed by relation id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    records: BTreeMap<RelationId, PredictionRecord>,
}

impl Predictions {
    pub fn new(records: Vec<PredictionRecord>, q: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        for record in records {
            record.validate(q)?;
            let id = record.relation_id;
            if map.insert(id, record).is_some() {
                return Err(Error::Validation(format!("duplicate prediction for relation {id}")));
            }
        }
        Ok(Self { records: map })
    }

    pub fn get(&self, id: RelationId) -> Option<&PredictionRecord> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.records.values()
    }

    fn require(&self, id: RelationId) -> Result<&PredictionRecord> {
        self.get(id)
            .ok_or_else(|| Error::Coverage(format!("no prediction record for relation {id}")))
    }
}

/// Q×Q matrix; row i holds the mean prediction scores over pairs annotated with predicate i.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    q: usize,
    entries: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let q = rows.len();
        let mut entries = Vec::with_capacity(q * q);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != q {
                return Err(Error::Validation(format!(
                    "confusion row {i} has {} columns, expected {q}",
                    row.len()
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "confusion entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
                entries.push(v);
            }
        }
        Ok(Self { q, entries })
    }

    /// All-zero matrix: every negative pair keeps full weight.
    pub fn zeros(q: usize) -> Self {
        Self {
            q,
            entries: vec![0.0; q * q],
        }
    }

    /// Mean score vector over the predictions of each annotated predicate.
    /// Rows for predicates without annotations stay zero.
    pub fn from_predictions(dataset: &Dataset, predictions: &Predictions) -> Result<Self> {
        let q = dataset.num_predicates();
        let mut sums = vec![0.0; q * q];
        let mut counts = vec![0usize; q];
        for rel in &dataset.relations {
            let p = rel.predicate.expect("annotated relation");
            let record = predictions.require(rel.relation_id)?;
            counts[p] += 1;
            for (j, s) in record.scores.iter().enumerate() {
                sums[p * q + j] += s;
            }
        }
        for (i, n) in counts.iter().enumerate() {
            if *n > 0 {
                for v in &mut sums[i * q..(i + 1) * q] {
                    *v /= *n as f64;
                }
            }
        }
        Ok(Self { q, entries: sums })
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn get(&self, truth: PredicateId, predicted: PredicateId) -> f64 {
        self.entries[truth * self.q + predicted]
    }

    pub fn row(&self, truth: PredicateId) -> &[f64] {
        &self.entries[truth * self.q..(truth + 1) * self.q]
    }
}

/// Annotated relations whose predicted argmax disagrees with the label.
pub fn identify_indistinguishable(dataset: &Dataset, predictions: &Predictions) -> Result<BTreeSet<RelationId>> {
    let mut flagged = BTreeSet::new();
    for rel in &dataset.relations {
        let record = predictions.require(rel.relation_id)?;
        if Some(record.argmax()) != rel.predicate {
            flagged.insert(rel.relation_id);
        }
    }
    Ok(flagged)
}

/// An unannotated pair together with the model's best guess.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaCandidate {
    pub relation_id: RelationId,
    pub predicate: PredicateId,
    pub na_score: f64,
}

/// Pairs each NA pair, in dataset order, with its argmax predicate and NA score.
pub fn identify_potential_positives(dataset: &Dataset, predictions: &Predictions) -> Result<Vec<NaCandidate>> {
    dataset
        .na_pairs
        .iter()
        .map(|pair| {
            let record = predictions.require(pair.relation_id)?;
            if !(record.na_score > 0.0) {
                return Err(Error::Validation(format!(
                    "NA pair {} has non-positive na_score {}",
                    pair.relation_id, record.na_score
                )));
            }
            Ok(NaCandidate {
                relation_id: pair.relation_id,
                predicate: record.argmax(),
                na_score: record.na_score,
            })
        })
        .collect()
}

/// Renders an annotated triplet as "The {subject} is {predicate} the {object}."
pub fn triplet_to_sentence(relation: &RelationInstance, vocab: &PredicateVocab) -> Result<String> {
    let p = relation.predicate.ok_or_else(|| {
        Error::Precondition(format!(
            "relation {} is an NA pair and has no sentence",
            relation.relation_id
        ))
    })?;
    if p >= vocab.len() {
        return Err(Error::Vocabulary(format!("predicate index {p} out of range")));
    }
    Ok(format!(
        "The {} is {} the {}.",
        relation.subject.class_label,
        vocab.label(p),
        relation.object.class_label
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn vocab(labels: &[&str]) -> PredicateVocab {
        PredicateVocab::new(labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn rel(id: RelationId, image: &str, p: Option<PredicateId>) -> RelationInstance {
        RelationInstance {
            relation_id: id,
            image_id: image.into(),
            subject: EntityRef::new("person", format!("s{id}")),
            object: EntityRef::new("snow", format!("o{id}")),
            predicate: p,
            provenance: Provenance::Original,
        }
    }

    fn small() -> Dataset {
        Dataset::new(
            vocab(&["on", "standing on", "near"]),
            vec![],
            vec!["img".into()],
            vec![rel(1, "img", Some(0)), rel(2, "img", Some(1))],
            vec![rel(3, "img", None), rel(4, "img", None)],
        )
        .unwrap()
    }

    fn record(id: RelationId, scores: &[f64], na: f64) -> PredictionRecord {
        PredictionRecord {
            relation_id: id,
            scores: scores.to_vec(),
            na_score: na,
        }
    }

    #[test]
    fn vocab_rejects_duplicates_and_tiny() {
        assert!(PredicateVocab::new(vec!["a".into()]).is_err());
        assert!(PredicateVocab::new(vec!["a".into(), "a".into()]).is_err());
        assert!(PredicateVocab::new(vec!["a".into(), "".into()]).is_err());
        let v = vocab(&["a", "b"]);
        assert_eq!(v.id("b"), Some(1));
    }

    #[test]
    fn dataset_rejects_out_of_range_predicate() {
        let err = Dataset::new(
            vocab(&["a", "b"]),
            vec![],
            vec!["img".into()],
            vec![rel(1, "img", Some(2))],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }

    #[test]
    fn dataset_rejects_self_relation_and_duplicate_ids() {
        let mut r = rel(1, "img", Some(0));
        r.object.segment_id = r.subject.segment_id.clone();
        assert!(Dataset::new(vocab(&["a", "b"]), vec![], vec!["img".into()], vec![r], vec![]).is_err());
        assert!(Dataset::new(
            vocab(&["a", "b"]),
            vec![],
            vec!["img".into()],
            vec![rel(1, "img", Some(0)), rel(1, "img", Some(1))],
            vec![],
        )
        .is_err());
    }

    #[test]
    fn argmax_flags_disagreement() {
        let d = Dataset::new(
            vocab(&["a", "b", "c"]),
            vec![],
            vec!["img".into()],
            vec![rel(1, "img", Some(0)), rel(2, "img", Some(0)), rel(3, "img", Some(1))],
            vec![],
        )
        .unwrap();
        let preds = Predictions::new(
            vec![
                record(1, &[0.1, 0.7, 0.2], 0.5),
                record(2, &[0.7, 0.1, 0.2], 0.5),
                record(3, &[0.5, 0.5, 0.0], 0.5),
            ],
            3,
        )
        .unwrap();
        let flagged = identify_indistinguishable(&d, &preds).unwrap();
        assert_eq!(flagged.into_iter().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn missing_prediction_is_coverage_error() {
        let d = small();
        let preds = Predictions::new(vec![record(1, &[1.0, 0.0, 0.0], 0.5)], 3).unwrap();
        assert!(matches!(
            identify_indistinguishable(&d, &preds),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn potential_positives_keep_input_order() {
        let d = small();
        let preds = Predictions::new(
            vec![
                record(1, &[1.0, 0.0, 0.0], 0.5),
                record(2, &[0.0, 1.0, 0.0], 0.5),
                record(3, &[0.2, 0.6, 0.2], 0.4),
                record(4, &[0.0, 0.1, 0.9], 0.2),
            ],
            3,
        )
        .unwrap();
        let c = identify_potential_positives(&d, &preds).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].relation_id, c[0].predicate, c[0].na_score), (3, 1, 0.4));
        assert_eq!((c[1].relation_id, c[1].predicate), (4, 2));
    }

    #[test]
    fn no_na_pairs_no_candidates() {
        let mut d = small();
        d.na_pairs.clear();
        let preds = Predictions::default();
        assert!(identify_potential_positives(&d, &preds).unwrap().is_empty());
    }

    #[test]
    fn prediction_validation() {
        assert!(record(1, &[0.1, 0.2], 0.5).validate(3).is_err());
        assert!(record(1, &[0.1, 0.2, 1.5], 0.5).validate(3).is_err());
        assert!(record(1, &[0.1, 0.2, 0.3], 0.0).validate(3).is_err());
        assert!(record(1, &[0.1, 0.2, 0.3], 1.0).validate(3).is_ok());
    }

    #[test]
    fn sentences() {
        let v = vocab(&["standing on", "beside"]);
        let mut r = rel(1, "img", Some(0));
        assert_eq!(
            triplet_to_sentence(&r, &v).unwrap(),
            "The person is standing on the snow."
        );
        r.subject.class_label = "dog".into();
        r.object.class_label = "tree".into();
        r.predicate = Some(1);
        let s = triplet_to_sentence(&r, &v).unwrap();
        assert_eq!(s, "The dog is beside the tree.");
        assert_eq!(s, triplet_to_sentence(&r, &v).unwrap());
        r.predicate = None;
        assert!(triplet_to_sentence(&r, &v).is_err());
    }

    #[test]
    fn confusion_from_predictions_averages_rows() {
        let d = small();
        let preds = Predictions::new(
            vec![record(1, &[0.6, 0.4, 0.0], 0.5), record(2, &[0.2, 0.8, 0.0], 0.5)],
            3,
        )
        .unwrap();
        let c = ConfusionMatrix::from_predictions(&d, &preds).unwrap();
        assert_eq!(c.row(0), &[0.6, 0.4, 0.0]);
        assert_eq!(c.get(1, 1), 0.8);
        assert_eq!(c.row(2), &[0.0, 0.0, 0.0]);
    }
}
