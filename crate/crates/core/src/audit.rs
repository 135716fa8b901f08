//! Dataset statistics, recall metrics and before/after transfer reports.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, EntityRef, PredicateId, PredicateVocab};
use crate::error::{Error, Result};
use crate::transfer::{MoveKind, TransferPlan};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `(predicate, count)` from most to least frequent; ties by index.
    pub fn by_frequency(&self) -> Vec<(PredicateId, usize)> {
        let mut v: Vec<(PredicateId, usize)> = self.counts.iter().copied().enumerate().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn predicate_histogram(dataset: &Dataset) -> Histogram {
    Histogram {
        counts: dataset.predicate_counts(),
    }
}

/// Composite `0.3·R + 0.6·mR + 0.1·PQ`.
pub fn pr_score(recall: f64, mean_recall: f64, pq: f64) -> f64 {
    0.3 * recall + 0.6 * mean_recall + 0.1 * pq
}

/// Harmonic mean of R and mR; 0 when both are 0.
pub fn f_score(recall: f64, mean_recall: f64) -> f64 {
    if recall + mean_recall == 0.0 {
        0.0
    } else {
        // Grouped so that f(x, x) is exactly x.
        recall * (2.0 * mean_recall / (recall + mean_recall))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub subject: EntityRef,
    pub predicate: PredicateId,
    pub object: EntityRef,
}

/// Triplets per image id. For predictions the order within an image is the ranking.
pub type TripletsByImage = BTreeMap<String, Vec<Triplet>>;

pub fn ground_truth(dataset: &Dataset) -> TripletsByImage {
    let mut gt = TripletsByImage::new();
    for rel in &dataset.relations {
        gt.entry(rel.image_id.clone()).or_default().push(Triplet {
            subject: rel.subject.clone(),
            predicate: rel.predicate.expect("annotated"),
            object: rel.object.clone(),
        });
    }
    gt
}

/// For each image, which ground-truth triplets are matched within the top
/// `k` predictions. Each prediction matches at most one ground-truth triplet.
fn matches_at_k(gt: &[Triplet], ranked: &[Triplet], k: usize) -> Vec<bool> {
    let mut matched = vec![false; gt.len()];
    for pred in ranked.iter().take(k) {
        if let Some(slot) = gt.iter().enumerate().position(|(i, g)| !matched[i] && g == pred) {
            matched[slot] = true;
        }
    }
    matched
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Validation("K must be positive".into()));
    }
    Ok(())
}

/// Mean over images with ground truth of the fraction recovered in the top `k`.
pub fn recall_at_k(gt: &TripletsByImage, ranked: &TripletsByImage, k: usize) -> Result<f64> {
    check_k(k)?;
    let mut sum = 0.0;
    let mut images = 0usize;
    for (image, truth) in gt.iter().filter(|(_, t)| !t.is_empty()) {
        let preds = ranked.get(image).map(Vec::as_slice).unwrap_or_default();
        let hits = matches_at_k(truth, preds, k).iter().filter(|m| **m).count();
        sum += hits as f64 / truth.len() as f64;
        images += 1;
    }
    Ok(if images == 0 { 0.0 } else { sum / images as f64 })
}

/// Per-predicate recall (averaged over images containing the predicate),
/// then averaged over predicates present in the ground truth.
pub fn mean_recall_at_k(gt: &TripletsByImage, ranked: &TripletsByImage, k: usize) -> Result<f64> {
    check_k(k)?;
    let mut per_predicate: BTreeMap<PredicateId, (f64, usize)> = BTreeMap::new();
    for (image, truth) in gt {
        let preds = ranked.get(image).map(Vec::as_slice).unwrap_or_default();
        let matched = matches_at_k(truth, preds, k);
        let mut counts: BTreeMap<PredicateId, (usize, usize)> = BTreeMap::new();
        for (t, m) in truth.iter().zip(&matched) {
            let e = counts.entry(t.predicate).or_default();
            e.0 += usize::from(*m);
            e.1 += 1;
        }
        for (p, (hit, total)) in counts {
            let e = per_predicate.entry(p).or_default();
            e.0 += hit as f64 / total as f64;
            e.1 += 1;
        }
    }
    if per_predicate.is_empty() {
        return Ok(0.0);
    }
    let n = per_predicate.len() as f64;
    Ok(per_predicate.values().map(|(s, c)| s / *c as f64).sum::<f64>() / n)
}

#[derive(Deserialize)]
struct EntityLine {
    class: String,
    seg: String,
}

#[derive(Deserialize)]
struct TripletLine {
    sub: EntityLine,
    obj: EntityLine,
    predicate: String,
}

#[derive(Deserialize)]
struct RankedLine {
    image_id: String,
    triplets: Vec<TripletLine>,
}

/// Ranked predictions: JSONL `{"image_id", "triplets": [{"sub", "obj", "predicate"}]}`,
/// best first.
pub fn parse_ranked(reader: impl BufRead, origin: &Path, vocab: &PredicateVocab) -> Result<TripletsByImage> {
    let mut out = TripletsByImage::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RankedLine = serde_json::from_str(&line).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        let triplets = parsed
            .triplets
            .into_iter()
            .map(|t| {
                Ok(Triplet {
                    predicate: vocab.id(&t.predicate).ok_or_else(|| {
                        Error::Vocabulary(format!("line {}: unknown predicate `{}`", i + 1, t.predicate))
                    })?,
                    subject: EntityRef::new(t.sub.class, t.sub.seg),
                    object: EntityRef::new(t.obj.class, t.obj.seg),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.entry(parsed.image_id).or_default().extend(triplets);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub predicate: String,
    pub before: usize,
    pub after: usize,
    pub moves_in: usize,
    pub moves_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCount {
    pub from: String,
    pub to: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub rows: Vec<ReportRow>,
    pub indistinguishable_moves: usize,
    pub na_promotions: usize,
    /// Most frequent (from, to) relabels, descending.
    pub top_pairs: Vec<PairCount>,
}

impl TransferReport {
    pub fn total_moves(&self) -> usize {
        self.indistinguishable_moves + self.na_promotions
    }

    /// `predicate,before,after,delta,moves_in,moves_out`, in vocabulary order.
    pub fn write_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["predicate", "before", "after", "delta", "moves_in", "moves_out"])?;
        for r in &self.rows {
            wtr.write_record([
                r.predicate.clone(),
                r.before.to_string(),
                r.after.to_string(),
                (r.after as i64 - r.before as i64).to_string(),
                r.moves_in.to_string(),
                r.moves_out.to_string(),
            ])?;
        }
        wtr.flush()
    }
}

const TOP_PAIRS: usize = 10;

pub fn transfer_report(original: &Dataset, enhanced: &Dataset, plan: &TransferPlan) -> TransferReport {
    let vocab = &original.vocab;
    let before = original.predicate_counts();
    let after = enhanced.predicate_counts();
    let mut moves_in = vec![0; vocab.len()];
    let mut moves_out = vec![0; vocab.len()];
    let mut pairs: HashMap<(PredicateId, PredicateId), usize> = HashMap::new();
    for m in &plan.moves {
        moves_in[m.to] += 1;
        if let Some(from) = m.from {
            moves_out[from] += 1;
            *pairs.entry((from, m.to)).or_default() += 1;
        }
    }
    let mut top: Vec<((PredicateId, PredicateId), usize)> = pairs.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    TransferReport {
        rows: (0..vocab.len())
            .map(|p| ReportRow {
                predicate: vocab.label(p).to_string(),
                before: before[p],
                after: after[p],
                moves_in: moves_in[p],
                moves_out: moves_out[p],
            })
            .collect(),
        indistinguishable_moves: plan.count(MoveKind::Indistinguishable),
        na_promotions: plan.count(MoveKind::NaPromotion),
        top_pairs: top
            .into_iter()
            .take(TOP_PAIRS)
            .map(|((f, t), count)| PairCount {
                from: vocab.label(f).to_string(),
                to: vocab.label(t).to_string(),
                count,
            })
            .collect(),
    }
}
