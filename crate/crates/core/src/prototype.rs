//! Per-predicate prototypes updated at a speed inversely proportional to the
//! class's loss variance, multistage filtration of high-loss outliers, and
//! the prototype similarity matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::contrastive::{BatchOutcome, EpochReport, TrainingHook};
use crate::corpus::{PredicateId, PredicateVocab, RelationId};
use crate::embedding::{norm, raw_cosine};
use crate::error::{Error, Result};

/// Added to the class loss variance before it divides the approach speed.
pub const VARIANCE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSchedule {
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    /// Momentum of the moving average, in `[0, 1)`. The published value (5e5)
    /// cannot be a convex weight and is not used.
    pub beta: f64,
    pub gamma: f64,
    /// Scale of the bias threshold.
    pub mu: f64,
    /// Percentage of flagged samples dropped per epoch.
    pub drop_percent: f64,
    /// Classes with fewer active samples than this never lose samples.
    pub protect_below: usize,
    pub schedule: UpdateSchedule,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            gamma: 1.5,
            mu: 1.0,
            drop_percent: 50.0,
            protect_below: 100,
            schedule: UpdateSchedule::PerBatch,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config("prototype: beta must be in [0, 1)".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("prototype: gamma must be > 0".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config("prototype: mu must be >= 0".into()));
        }
        if !(0.0..=100.0).contains(&self.drop_percent) {
            return Err(Error::Config("prototype: drop_percent must be in [0, 100]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSpace {
    prototypes: Array2<f64>,
    pub class_counts_seen: Vec<u64>,
    /// Mean per-sample loss variance of each class from the latest epoch.
    pub per_class_variance: Vec<f64>,
}

impl PrototypeSpace {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            prototypes: Array2::zeros((num_classes, dim)),
            class_counts_seen: vec![0; num_classes],
            per_class_variance: vec![0.0; num_classes],
        }
    }

    pub fn from_prototypes(prototypes: Array2<f64>) -> Self {
        let q = prototypes.nrows();
        Self {
            prototypes,
            class_counts_seen: vec![0; q],
            per_class_variance: vec![0.0; q],
        }
    }

    /// Per-class mean of `encoded` rows; classes without samples stay zero.
    pub fn from_class_means(encoded: ArrayView2<'_, f64>, predicates: &[PredicateId], num_classes: usize) -> Self {
        let mut space = Self::zeros(num_classes, encoded.ncols());
        let mut counts = vec![0usize; num_classes];
        for (row, p) in encoded.rows().into_iter().zip(predicates) {
            space.prototypes.row_mut(*p).scaled_add(1.0, &row);
            counts[*p] += 1;
        }
        for (p, c) in counts.iter().enumerate() {
            if *c > 0 {
                space.prototypes.row_mut(p).mapv_inplace(|v| v / *c as f64);
            }
        }
        space
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototype(&self, p: PredicateId) -> ArrayView1<'_, f64> {
        self.prototypes.row(p)
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    /// One row per predicate: `predicate,v1,...,vL`.
    pub fn write_csv(&self, vocab: &PredicateVocab, out: impl Write) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["predicate".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("v{i}")));
        wtr.write_record(&header)?;
        for (p, row) in self.prototypes.rows().into_iter().enumerate() {
            let mut record = vec![vocab.label(p).to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&record)?;
        }
        wtr.flush()
    }

    pub fn parse_csv(reader: impl Read, origin: &Path, vocab: &PredicateVocab) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| Error::parse(origin, line, e.to_string()))?;
            let label = record.get(0).unwrap_or_default();
            if vocab.id(label) != Some(rows.len()) {
                return Err(Error::parse(origin, line, format!("unexpected predicate `{label}`")));
            }
            let values = record
                .iter()
                .skip(1)
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(origin, line, e.to_string()))?;
            rows.push(values);
        }
        if rows.len() != vocab.len() {
            return Err(Error::Validation(format!(
                "{}: {} prototypes for {} predicates",
                origin.display(),
                rows.len(),
                vocab.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Validation(format!(
                "{}: ragged prototype rows",
                origin.display()
            )));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let prototypes = Array2::from_shape_vec((vocab.len(), dim), flat).expect("shape checked");
        Ok(Self::from_prototypes(prototypes))
    }
}

/// Mean of the given rows.
pub fn batch_class_average(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Precondition("class average of zero samples".into()))?;
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        if r.len() != mean.len() {
            return Err(Error::Validation("rows differ in dimension".into()));
        }
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// `1 / (γ · (Var + ε_v) · N)`.
pub fn approach_speed(variance: f64, count: usize, gamma: f64) -> f64 {
    1.0 / (gamma * (variance + VARIANCE_EPSILON) * count as f64)
}

/// Moves prototype `p` toward `h_aver` by `(1 − β) · speed` of the gap,
/// capped at the full gap. Returns the applied fraction.
pub fn update_prototype(
    space: &mut PrototypeSpace,
    p: PredicateId,
    h_aver: &[f64],
    variance: f64,
    count: usize,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    if p >= space.num_classes() {
        return Err(Error::Precondition(format!("predicate {p} out of range")));
    }
    if h_aver.len() != space.dim() {
        return Err(Error::Validation(format!(
            "class average has dim {}, prototypes have {}",
            h_aver.len(),
            space.dim()
        )));
    }
    if count == 0 {
        return Err(Error::Precondition("prototype update from zero samples".into()));
    }
    let rate = ((1.0 - beta) * approach_speed(variance, count, gamma)).min(1.0);
    if !rate.is_finite() {
        return Err(Error::Numerical(format!("approach rate for predicate {p} is {rate}")));
    }
    let mut row = space.prototypes.row_mut(p);
    let updated: Array1<f64> = row.iter().zip(h_aver).map(|(old, h)| old + rate * (h - old)).collect();
    if updated.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("prototype {p} became non-finite")));
    }
    row.assign(&updated);
    space.class_counts_seen[p] += count as u64;
    Ok(rate)
}

/// `V_i > μ · V_aver · ‖H_aver − P‖`.
pub fn flag_biased(sample_variance: f64, class_variance: f64, shift: f64, mu: f64) -> bool {
    sample_variance > mu * class_variance * shift
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationState {
    active: BTreeSet<RelationId>,
    dropped: Vec<(usize, RelationId)>,
    per_class_active_count: Vec<usize>,
    class_of: HashMap<RelationId, PredicateId>,
}

impl FiltrationState {
    pub fn new(ids: &[RelationId], predicates: &[PredicateId], num_classes: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for p in predicates {
            counts[*p] += 1;
        }
        Self {
            active: ids.iter().copied().collect(),
            dropped: Vec::new(),
            per_class_active_count: counts,
            class_of: ids.iter().copied().zip(predicates.iter().copied()).collect(),
        }
    }

    pub fn is_active(&self, id: RelationId) -> bool {
        self.active.contains(&id)
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn class_active_count(&self, p: PredicateId) -> usize {
        self.per_class_active_count[p]
    }

    pub fn per_class_active_count(&self) -> &[usize] {
        &self.per_class_active_count
    }

    /// `(epoch, relation_id)` in drop order.
    pub fn dropped(&self) -> &[(usize, RelationId)] {
        &self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlaggedSample {
    pub relation_id: RelationId,
    pub predicate: PredicateId,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    /// Flagged samples outside protected classes.
    pub eligible: usize,
    /// Dropped samples, highest loss first.
    pub dropped: Vec<FlaggedSample>,
}

/// Drops the top `drop_percent`% (rounded up) of the flagged samples by
/// loss. Classes with fewer than `protect_below` active samples at the start
/// of the stage are exempt and do not count toward the candidate set.
pub fn multistage_filtration(
    flagged: &[FlaggedSample],
    drop_percent: f64,
    protect_below: usize,
    epoch: usize,
    state: &mut FiltrationState,
) -> Result<StageOutcome> {
    if !(0.0..=100.0).contains(&drop_percent) {
        return Err(Error::Precondition(format!(
            "drop percent {drop_percent} outside [0, 100]"
        )));
    }
    let mut eligible: Vec<FlaggedSample> = flagged
        .iter()
        .filter(|s| state.is_active(s.relation_id))
        .filter(|s| state.per_class_active_count[s.predicate] >= protect_below)
        .copied()
        .collect();
    eligible.sort_by(|a, b| b.loss.total_cmp(&a.loss).then(a.relation_id.cmp(&b.relation_id)));
    let quota = ((drop_percent / 100.0) * eligible.len() as f64).ceil() as usize;
    let dropped: Vec<FlaggedSample> = eligible.iter().take(quota).copied().collect();
    for s in &dropped {
        state.active.remove(&s.relation_id);
        state.per_class_active_count[state.class_of[&s.relation_id]] -= 1;
        state.dropped.push((epoch, s.relation_id));
    }
    Ok(StageOutcome {
        eligible: eligible.len(),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    q: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let q = rows.len();
        if rows.iter().any(|r| r.len() != q) {
            return Err(Error::Validation("similarity matrix must be square".into()));
        }
        Ok(Self {
            q,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn get(&self, i: PredicateId, j: PredicateId) -> f64 {
        self.entries[i * self.q + j]
    }

    /// Header `predicate,<labels>`, then one labelled row per predicate.
    pub fn write_csv(&self, vocab: &PredicateVocab, out: impl Write) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["predicate"];
        header.extend(vocab.labels().iter().map(String::as_str));
        wtr.write_record(&header)?;
        for i in 0..self.q {
            let mut record = vec![vocab.label(i).to_string()];
            record.extend((0..self.q).map(|j| self.get(i, j).to_string()));
            wtr.write_record(&record)?;
        }
        wtr.flush()
    }

    pub fn parse_csv(reader: impl Read, origin: &Path, vocab: &PredicateVocab) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::parse(origin, 1, e.to_string()))?
            .clone();
        if header.iter().skip(1).ne(vocab.labels().iter().map(String::as_str)) {
            return Err(Error::Vocabulary(format!(
                "{}: similarity header does not match the vocabulary",
                origin.display()
            )));
        }
        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::parse(origin, i + 2, e.to_string()))?;
            let row = record
                .iter()
                .skip(1)
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(origin, i + 2, e.to_string()))?;
            rows.push(row);
        }
        if rows.len() != vocab.len() {
            return Err(Error::Validation(format!("{}: wrong row count", origin.display())));
        }
        Self::from_rows(rows)
    }
}

/// Pairwise cosine similarity between prototypes.
#[allow(clippy::needless_range_loop)]
pub fn similarity_matrix(space: &PrototypeSpace, vocab: &PredicateVocab) -> Result<SimilarityMatrix> {
    let q = space.num_classes();
    for p in 0..q {
        let row = space.prototype(p);
        if norm(row.as_slice().expect("contiguous")) == 0.0 {
            return Err(Error::ClassNeverSeen(vocab.label(p).to_string()));
        }
    }
    let mut rows = vec![vec![0.0; q]; q];
    for i in 0..q {
        for j in i..q {
            let s = raw_cosine(
                space.prototype(i).as_slice().expect("contiguous"),
                space.prototype(j).as_slice().expect("contiguous"),
            )?;
            rows[i][j] = s;
            rows[j][i] = s;
        }
    }
    SimilarityMatrix::from_rows(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationLogEntry {
    pub epoch: usize,
    pub relation_id: RelationId,
    pub loss: f64,
    pub reason: &'static str,
}

pub fn write_filtration_log(entries: &[FiltrationLogEntry], out: impl Write) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["epoch", "relation_id", "loss", "reason"])?;
    for e in entries {
        wtr.write_record([
            e.epoch.to_string(),
            e.relation_id.to_string(),
            e.loss.to_string(),
            e.reason.to_string(),
        ])?;
    }
    wtr.flush()
}

/// Per-epoch filtration summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub epoch: usize,
    pub flagged: usize,
    pub eligible: usize,
    pub dropped: usize,
    pub per_class_active_before: Vec<usize>,
}

/// Training hook that keeps the prototype space current and filters
/// biased samples at the end of every epoch.
pub struct PrototypeLearner {
    pub space: PrototypeSpace,
    pub state: FiltrationState,
    pub config: PrototypeConfig,
    pub log: Vec<FiltrationLogEntry>,
    pub stages: Vec<StageRecord>,
}

impl PrototypeLearner {
    /// Prototypes start at the class means of the initial encodings.
    pub fn new(
        initial_encoded: ArrayView2<'_, f64>,
        ids: &[RelationId],
        predicates: &[PredicateId],
        num_classes: usize,
        config: PrototypeConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            space: PrototypeSpace::from_class_means(initial_encoded, predicates, num_classes),
            state: FiltrationState::new(ids, predicates, num_classes),
            config,
            log: Vec::new(),
            stages: Vec::new(),
        })
    }

    fn class_rows(encoded: &Array2<f64>, members: impl Iterator<Item = usize>) -> Vec<&[f64]> {
        members
            .map(|k| encoded.row(k).to_slice().expect("contiguous"))
            .collect()
    }
}

impl TrainingHook for PrototypeLearner {
    fn after_batch(&mut self, batch: &BatchOutcome<'_>) -> Result<()> {
        if self.config.schedule != UpdateSchedule::PerBatch {
            return Ok(());
        }
        let mut by_class: BTreeMap<PredicateId, Vec<usize>> = BTreeMap::new();
        for (row, p) in batch.predicates.iter().enumerate() {
            by_class.entry(*p).or_default().push(row);
        }
        for (p, rows) in by_class {
            let h_aver = batch_class_average(&Self::class_rows(batch.encoded, rows.iter().copied()))?;
            let variance = batch.breakdown.per_class_variance.get(&p).copied().unwrap_or(0.0);
            update_prototype(
                &mut self.space,
                p,
                &h_aver,
                variance,
                rows.len(),
                self.config.beta,
                self.config.gamma,
            )?;
        }
        Ok(())
    }

    fn after_epoch(&mut self, report: &EpochReport<'_>) -> Result<Vec<usize>> {
        let q = self.space.num_classes();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); q];
        for (k, p) in report.predicates.iter().enumerate() {
            if report.active[k] {
                members[*p].push(k);
            }
        }

        if self.config.schedule == UpdateSchedule::PerEpoch {
            for (p, ks) in members.iter().enumerate().filter(|(_, ks)| !ks.is_empty()) {
                let h_aver = batch_class_average(&Self::class_rows(report.encoded, ks.iter().copied()))?;
                let losses: Vec<f64> = ks.iter().filter_map(|&k| report.losses[k]).collect();
                let variance = crate::contrastive::population_variance(&losses);
                update_prototype(
                    &mut self.space,
                    p,
                    &h_aver,
                    variance,
                    ks.len(),
                    self.config.beta,
                    self.config.gamma,
                )?;
            }
        }

        let mut flagged = Vec::new();
        for (p, ks) in members.iter().enumerate() {
            let with_var: Vec<(usize, f64)> = ks.iter().filter_map(|&k| report.variances[k].map(|v| (k, v))).collect();
            if with_var.is_empty() {
                continue;
            }
            let v_aver = with_var.iter().map(|(_, v)| v).sum::<f64>() / with_var.len() as f64;
            self.space.per_class_variance[p] = v_aver;
            let h_aver = batch_class_average(&Self::class_rows(report.encoded, ks.iter().copied()))?;
            let shift: f64 = h_aver
                .iter()
                .zip(self.space.prototype(p).iter())
                .map(|(h, proto)| (h - proto).powi(2))
                .sum::<f64>()
                .sqrt();
            for (k, v) in with_var {
                if flag_biased(v, v_aver, shift, self.config.mu) {
                    flagged.push(FlaggedSample {
                        relation_id: report.ids[k],
                        predicate: p,
                        loss: report.losses[k].expect("variance implies loss"),
                    });
                }
            }
        }

        let before = self.state.per_class_active_count().to_vec();
        let outcome = multistage_filtration(
            &flagged,
            self.config.drop_percent,
            self.config.protect_below,
            report.epoch,
            &mut self.state,
        )?;
        self.stages.push(StageRecord {
            epoch: report.epoch,
            flagged: flagged.len(),
            eligible: outcome.eligible,
            dropped: outcome.dropped.len(),
            per_class_active_before: before,
        });
        let index: HashMap<RelationId, usize> = report.ids.iter().enumerate().map(|(k, id)| (*id, k)).collect();
        let mut drops = Vec::with_capacity(outcome.dropped.len());
        for s in outcome.dropped {
            self.log.push(FiltrationLogEntry {
                epoch: report.epoch,
                relation_id: s.relation_id,
                loss: s.loss,
                reason: "biased_high_loss",
            });
            drops.push(index[&s.relation_id]);
        }
        Ok(drops)
    }
}
