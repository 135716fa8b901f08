//! Transfer planning: similarity-ratio relabelling of indistinguishable
//! triplets, influence-ranked promotion of NA pairs, and plan application.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, NaCandidate, PredicateId, PredicateVocab, Predictions, Provenance, RelationId};
use crate::error::{Error, Result};
use crate::prototype::SimilarityMatrix;

/// Counts below this floor (unseen pairs or predicates) are raised to it.
pub const COUNT_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Indistinguishable,
    NaPromotion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Move {
    pub relation_id: RelationId,
    /// `None` for promoted NA pairs.
    pub from: Option<PredicateId>,
    pub to: PredicateId,
    pub score: f64,
    pub kind: MoveKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferPlan {
    pub moves: Vec<Move>,
}

#[derive(Serialize, Deserialize)]
struct MoveLine {
    relation_id: RelationId,
    from: Option<String>,
    to: String,
    score: f64,
    kind: MoveKind,
}

impl TransferPlan {
    pub fn new(moves: Vec<Move>) -> Result<Self> {
        let plan = Self { moves };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for m in &self.moves {
            if !ids.insert(m.relation_id) {
                return Err(Error::Plan(format!("relation {} moves twice", m.relation_id)));
            }
            if !m.score.is_finite() {
                return Err(Error::Plan(format!(
                    "relation {} has a non-finite score",
                    m.relation_id
                )));
            }
            match (m.kind, m.from) {
                (MoveKind::Indistinguishable, Some(from)) if from == m.to => {
                    return Err(Error::Plan(format!(
                        "relation {} moves to its own predicate",
                        m.relation_id
                    )))
                }
                (MoveKind::Indistinguishable, None) => {
                    return Err(Error::Plan(format!("relabel of {} lacks a source", m.relation_id)))
                }
                (MoveKind::NaPromotion, Some(_)) => {
                    return Err(Error::Plan(format!("promotion of {} has a source", m.relation_id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn count(&self, kind: MoveKind) -> usize {
        self.moves.iter().filter(|m| m.kind == kind).count()
    }

    /// One JSON object per move.
    pub fn write_jsonl(&self, vocab: &PredicateVocab, out: &mut impl Write) -> std::io::Result<()> {
        for m in &self.moves {
            let line = MoveLine {
                relation_id: m.relation_id,
                from: m.from.map(|p| vocab.label(p).to_string()),
                to: vocab.label(m.to).to_string(),
                score: m.score,
                kind: m.kind,
            };
            serde_json::to_writer(&mut *out, &line)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn parse_jsonl(reader: impl BufRead, origin: &Path, vocab: &PredicateVocab) -> Result<Self> {
        let mut moves = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: MoveLine = serde_json::from_str(&line).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
            let lookup = |label: &str| {
                vocab
                    .id(label)
                    .ok_or_else(|| Error::Vocabulary(format!("plan line {}: unknown `{label}`", i + 1)))
            };
            moves.push(Move {
                relation_id: m.relation_id,
                from: m.from.as_deref().map(lookup).transpose()?,
                to: lookup(&m.to)?,
                score: m.score,
                kind: m.kind,
            });
        }
        Self::new(moves)
    }
}

/// Inverse annotation counts per (subject class, object class) pair and per predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScarcityTable {
    pair: BTreeMap<(String, String), f64>,
    predicate: Vec<f64>,
}

impl ScarcityTable {
    pub fn pair(&self, subject: &str, object: &str) -> f64 {
        self.pair
            .get(&(subject.to_string(), object.to_string()))
            .copied()
            .unwrap_or(1.0 / COUNT_FLOOR)
    }

    pub fn predicate(&self, p: PredicateId) -> f64 {
        self.predicate[p]
    }
}

pub fn compute_scarcity(dataset: &Dataset) -> Result<ScarcityTable> {
    if dataset.relations.is_empty() {
        return Err(Error::Precondition("scarcity of an empty dataset".into()));
    }
    let mut pair_counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rel in &dataset.relations {
        *pair_counts
            .entry((rel.subject.class_label.clone(), rel.object.class_label.clone()))
            .or_default() += 1;
    }
    let inverse = |n: usize| 1.0 / (n as f64).max(COUNT_FLOOR);
    Ok(ScarcityTable {
        pair: pair_counts.into_iter().map(|(k, n)| (k, inverse(n))).collect(),
        predicate: dataset.predicate_counts().into_iter().map(inverse).collect(),
    })
}

/// Relabels flagged relations toward the model's argmax. Within each
/// (annotated, predicted) group the `⌈clamp(S, 0, 1) · n⌉` most confident
/// samples move. With `direction_constraint`, only groups whose source
/// predicate is more frequent than the target are eligible.
pub fn plan_indistinguishable(
    dataset: &Dataset,
    flagged: &BTreeSet<RelationId>,
    predictions: &Predictions,
    similarity: &SimilarityMatrix,
    direction_constraint: bool,
) -> Result<Vec<Move>> {
    let counts = dataset.predicate_counts();
    let by_id: HashMap<RelationId, PredicateId> = dataset
        .relations
        .iter()
        .map(|r| (r.relation_id, r.predicate.expect("annotated")))
        .collect();
    let mut groups: BTreeMap<(PredicateId, PredicateId), Vec<(RelationId, f64)>> = BTreeMap::new();
    for id in flagged {
        let from = *by_id
            .get(id)
            .ok_or_else(|| Error::Plan(format!("flagged relation {id} is not annotated")))?;
        let record = predictions
            .get(*id)
            .ok_or_else(|| Error::Coverage(format!("no prediction record for relation {id}")))?;
        let to = record.argmax();
        if to == from {
            continue;
        }
        groups.entry((from, to)).or_default().push((*id, record.scores[to]));
    }

    let mut moves = Vec::new();
    for ((from, to), mut members) in groups {
        if direction_constraint && counts[from] <= counts[to] {
            continue;
        }
        let ratio = similarity.get(from, to).clamp(0.0, 1.0);
        let quota = (ratio * members.len() as f64).ceil() as usize;
        members.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        moves.extend(members.into_iter().take(quota).map(|(id, score)| Move {
            relation_id: id,
            from: Some(from),
            to,
            score,
            kind: MoveKind::Indistinguishable,
        }));
    }
    Ok(moves)
}

/// `sqrt(−ln(na_score) · c_pair · c_pred)`.
pub fn influence_factor(na_score: f64, pair_scarcity: f64, predicate_scarcity: f64) -> Result<f64> {
    if !(na_score > 0.0 && na_score <= 1.0) {
        return Err(Error::Validation(format!("na_score {na_score} outside (0, 1]")));
    }
    if !(pair_scarcity > 0.0 && predicate_scarcity > 0.0) {
        return Err(Error::Validation("scarcities must be positive".into()));
    }
    Ok((-na_score.ln() * pair_scarcity * predicate_scarcity).sqrt())
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Promotes the top `⌈k_g · |candidates|⌉` NA pairs by influence factor.
/// Pair scarcity is softmax-normalized over the candidate set; ties rank by
/// relation id.
pub fn plan_na_promotions(
    dataset: &Dataset,
    candidates: &[NaCandidate],
    scarcity: &ScarcityTable,
    k_g: f64,
) -> Result<Vec<Move>> {
    if !(0.0..=1.0).contains(&k_g) {
        return Err(Error::Precondition(format!("K_g {k_g} outside [0, 1]")));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let pairs: HashMap<RelationId, (&str, &str)> = dataset
        .na_pairs
        .iter()
        .map(|r| {
            (
                r.relation_id,
                (r.subject.class_label.as_str(), r.object.class_label.as_str()),
            )
        })
        .collect();
    // Candidate order must not matter, so normalize over an id-sorted view.
    let mut sorted: Vec<&NaCandidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.relation_id);
    let raw: Vec<f64> = sorted
        .iter()
        .map(|c| {
            pairs
                .get(&c.relation_id)
                .map(|(s, o)| scarcity.pair(s, o))
                .ok_or_else(|| Error::Plan(format!("candidate {} is not an NA pair", c.relation_id)))
        })
        .collect::<Result<_>>()?;
    let normalized = softmax(&raw);
    let mut ranked: Vec<(f64, &NaCandidate)> = sorted
        .into_iter()
        .zip(normalized)
        .map(|(c, pair)| Ok((influence_factor(c.na_score, pair, scarcity.predicate(c.predicate))?, c)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.relation_id.cmp(&b.1.relation_id)));
    let quota = (k_g * candidates.len() as f64).ceil() as usize;
    Ok(ranked
        .into_iter()
        .take(quota)
        .map(|(e, c)| Move {
            relation_id: c.relation_id,
            from: None,
            to: c.predicate,
            score: e,
            kind: MoveKind::NaPromotion,
        })
        .collect())
}

/// Applies a plan to a copy of the dataset. Relabels only touch relations
/// still carrying their original annotation, so a plan cannot apply twice.
pub fn apply_plan(dataset: &Dataset, plan: &TransferPlan) -> Result<Dataset> {
    plan.validate()?;
    let mut out = dataset.clone();
    let relation_pos: HashMap<RelationId, usize> = out
        .relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.relation_id, i))
        .collect();
    let mut promoted = BTreeSet::new();
    for m in &plan.moves {
        match m.kind {
            MoveKind::Indistinguishable => {
                let pos = *relation_pos
                    .get(&m.relation_id)
                    .ok_or_else(|| Error::Plan(format!("relabel of unknown relation {}", m.relation_id)))?;
                let rel = &mut out.relations[pos];
                if rel.provenance != Provenance::Original || rel.predicate != m.from {
                    return Err(Error::Plan(format!(
                        "relation {} was already transferred or does not match the plan",
                        m.relation_id
                    )));
                }
                rel.predicate = Some(m.to);
                rel.provenance = Provenance::Transferred;
            }
            MoveKind::NaPromotion => {
                if !out.na_pairs.iter().any(|r| r.relation_id == m.relation_id) {
                    return Err(Error::Plan(format!(
                        "promotion of {} which is not an NA pair",
                        m.relation_id
                    )));
                }
                promoted.insert(m.relation_id);
            }
        }
    }
    if !promoted.is_empty() {
        let targets: HashMap<RelationId, PredicateId> = plan
            .moves
            .iter()
            .filter(|m| m.kind == MoveKind::NaPromotion)
            .map(|m| (m.relation_id, m.to))
            .collect();
        let (moved, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut out.na_pairs)
            .into_iter()
            .partition(|r| promoted.contains(&r.relation_id));
        out.na_pairs = kept;
        for mut r in moved {
            r.predicate = Some(targets[&r.relation_id]);
            r.provenance = Provenance::NaPromoted;
            out.relations.push(r);
        }
        out.sort_by_image();
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityRef, PredictionRecord, RelationInstance};

    fn dataset(labels: &[PredicateId], na: usize) -> Dataset {
        let vocab = PredicateVocab::new(vec!["on".into(), "standing on".into(), "near".into()]).unwrap();
        let mk = |id: RelationId, p: Option<PredicateId>| RelationInstance {
            relation_id: id,
            image_id: format!("img{}", id % 3),
            subject: EntityRef::new("person", format!("s{id}")),
            object: EntityRef::new(if id.is_multiple_of(2) { "snow" } else { "grass" }, format!("o{id}")),
            predicate: p,
            provenance: Provenance::Original,
        };
        let relations = labels
            .iter()
            .enumerate()
            .map(|(i, p)| mk(i as RelationId, Some(*p)))
            .collect();
        let na_pairs = (0..na).map(|i| mk((labels.len() + i) as RelationId, None)).collect();
        Dataset::new(
            vocab,
            vec![],
            vec!["img0".into(), "img1".into(), "img2".into()],
            relations,
            na_pairs,
        )
        .unwrap()
    }

    fn sim(s01: f64) -> SimilarityMatrix {
        SimilarityMatrix::from_rows(vec![vec![1.0, s01, 0.1], vec![s01, 1.0, 0.1], vec![0.1, 0.1, 1.0]]).unwrap()
    }

    fn predictions(d: &Dataset, to: PredicateId, flagged: &[RelationId]) -> Predictions {
        let mut out = Vec::new();
        for r in d.relations.iter().chain(&d.na_pairs) {
            let mut scores = vec![0.0; 3];
            if flagged.contains(&r.relation_id) {
                scores[to] = 0.5 + r.relation_id as f64 / 100.0;
            } else {
                scores[r.predicate.unwrap_or(0)] = 0.9;
            }
            out.push(PredictionRecord {
                relation_id: r.relation_id,
                scores,
                na_score: 0.5,
            });
        }
        Predictions::new(out, 3).unwrap()
    }

    #[test]
    fn scarcity_is_inverse_count() {
        let d = dataset(&[0, 0, 0, 0, 1, 1, 1, 1], 0);
        let s = compute_scarcity(&d).unwrap();
        assert_eq!(s.predicate(0), 0.25);
        assert_eq!(s.predicate(0), s.predicate(1));
        assert_eq!(s.predicate(2), 2.0);
        assert_eq!(s.pair("person", "snow"), 0.25);
        assert_eq!(s.pair("horse", "snow"), 2.0);
    }

    #[test]
    fn ratio_ceiling_and_clamp() {
        let d = dataset(&[0, 0, 0, 0, 0, 0, 0, 1], 0);
        let flagged: BTreeSet<RelationId> = (0..5).collect();
        let p = predictions(&d, 1, &[0, 1, 2, 3, 4]);
        let half = plan_indistinguishable(&d, &flagged, &p, &sim(0.5), true).unwrap();
        let ids: Vec<RelationId> = half.iter().map(|m| m.relation_id).collect();
        assert_eq!(ids, vec![4, 3, 2]);
        assert!(plan_indistinguishable(&d, &flagged, &p, &sim(-0.2), true)
            .unwrap()
            .is_empty());
        assert_eq!(
            plan_indistinguishable(&d, &flagged, &p, &sim(1.0), true).unwrap().len(),
            5
        );
    }

    #[test]
    fn direction_constraint_blocks_tail_to_head() {
        let d = dataset(&[0, 0, 0, 1, 1, 1, 1, 1], 0);
        let flagged: BTreeSet<RelationId> = [0, 1].into_iter().collect();
        let p = predictions(&d, 1, &[0, 1]);
        assert!(plan_indistinguishable(&d, &flagged, &p, &sim(1.0), true)
            .unwrap()
            .is_empty());
        assert_eq!(
            plan_indistinguishable(&d, &flagged, &p, &sim(1.0), false)
                .unwrap()
                .len(),
            2
        );
    }

    #[test]
    fn influence_examples() {
        assert_eq!(influence_factor(1.0, 0.3, 0.2).unwrap(), 0.0);
        let e = influence_factor((-1.0f64).exp(), 0.04, 0.25).unwrap();
        assert!((e - 0.1).abs() < 1e-12);
        assert!(influence_factor(0.2, 0.1, 0.1).unwrap() > influence_factor(0.3, 0.1, 0.1).unwrap());
        assert!(influence_factor(0.0, 0.1, 0.1).is_err());
        assert!(influence_factor(1.1, 0.1, 0.1).is_err());
    }

    #[test]
    fn promotions_follow_quota_and_ranking() {
        let d = dataset(&[0, 1, 2], 100);
        let s = compute_scarcity(&d).unwrap();
        let cands: Vec<NaCandidate> = d
            .na_pairs
            .iter()
            .enumerate()
            .map(|(i, r)| NaCandidate {
                relation_id: r.relation_id,
                predicate: i % 3,
                na_score: if i == 0 { 1.0 } else { 0.01 + i as f64 / 200.0 },
            })
            .collect();
        let moves = plan_na_promotions(&d, &cands, &s, 0.05).unwrap();
        assert_eq!(moves.len(), 5);
        assert!(moves.iter().all(|m| m.relation_id != d.na_pairs[0].relation_id));
        assert!(moves.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(plan_na_promotions(&d, &cands, &s, 0.0).unwrap().is_empty());
        let mut rev = cands.clone();
        rev.reverse();
        assert_eq!(plan_na_promotions(&d, &rev, &s, 0.05).unwrap(), moves);
    }

    #[test]
    fn apply_conserves_and_guards() {
        let d = dataset(&[0, 0, 1], 2);
        assert_eq!(apply_plan(&d, &TransferPlan::default()).unwrap(), d);
        let plan = TransferPlan::new(vec![
            Move {
                relation_id: 0,
                from: Some(0),
                to: 1,
                score: 0.7,
                kind: MoveKind::Indistinguishable,
            },
            Move {
                relation_id: 4,
                from: None,
                to: 2,
                score: 0.3,
                kind: MoveKind::NaPromotion,
            },
        ])
        .unwrap();
        let out = apply_plan(&d, &plan).unwrap();
        assert_eq!(out.relations.len(), d.relations.len() + 1);
        assert_eq!(out.na_pairs.len(), 1);
        let before = d.predicate_counts();
        let after = out.predicate_counts();
        assert_eq!(after[0], before[0] - 1);
        assert_eq!(after[1], before[1] + 1);
        assert_eq!(after[2], before[2] + 1);
        assert_eq!(out.relation(0).unwrap().provenance, Provenance::Transferred);
        assert_eq!(out.relation(4).unwrap().provenance, Provenance::NaPromoted);
        assert!(matches!(apply_plan(&out, &plan), Err(Error::Plan(_))));

        let unknown = TransferPlan::new(vec![Move {
            relation_id: 99,
            from: Some(0),
            to: 1,
            score: 0.1,
            kind: MoveKind::Indistinguishable,
        }])
        .unwrap();
        assert!(matches!(apply_plan(&d, &unknown), Err(Error::Plan(_))));
    }

    #[test]
    fn plan_jsonl_roundtrip() {
        let d = dataset(&[0, 1], 1);
        let plan = TransferPlan::new(vec![
            Move {
                relation_id: 0,
                from: Some(0),
                to: 1,
                score: 0.25,
                kind: MoveKind::Indistinguishable,
            },
            Move {
                relation_id: 2,
                from: None,
                to: 2,
                score: 0.125,
                kind: MoveKind::NaPromotion,
            },
        ])
        .unwrap();
        let mut buf = Vec::new();
        plan.write_jsonl(&d.vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "{\"relation_id\":0,\"from\":\"on\",\"to\":\"standing on\",\"score\":0.25,\"kind\":\"indistinguishable\"}"
        ));
        let back = TransferPlan::parse_jsonl(buf.as_slice(), Path::new("plan"), &d.vocab).unwrap();
        assert_eq!(back, plan);
    }
}
