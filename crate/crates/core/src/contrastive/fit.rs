use std::collections::BTreeMap;

use log::debug;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{encode_rows, loss_and_gradient, EncoderParams, LossBreakdown, TrainConfig};
use crate::corpus::{ConfusionMatrix, Dataset, PredicateId, RelationId};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

/// Annotated samples with their frozen base embeddings (one row each).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub ids: Vec<RelationId>,
    pub base: Array2<f64>,
    pub predicates: Vec<PredicateId>,
}

impl TrainingSet {
    pub fn new(ids: Vec<RelationId>, base: Array2<f64>, predicates: Vec<PredicateId>) -> Result<Self> {
        if ids.len() != base.nrows() || ids.len() != predicates.len() {
            return Err(Error::Validation(format!(
                "training set sizes disagree: {} ids, {} rows, {} labels",
                ids.len(),
                base.nrows(),
                predicates.len()
            )));
        }
        Ok(Self { ids, base, predicates })
    }

    /// Every annotated relation of `dataset`, in dataset order.
    pub fn from_dataset(dataset: &Dataset, table: &EmbeddingTable) -> Result<Self> {
        table.require_all(dataset.relations.iter().map(|r| r.relation_id))?;
        let n = dataset.relations.len();
        let mut base = Array2::zeros((n, table.dim()));
        let mut ids = Vec::with_capacity(n);
        let mut predicates = Vec::with_capacity(n);
        for (k, rel) in dataset.relations.iter().enumerate() {
            let v = table.get(rel.relation_id).expect("coverage checked");
            base.row_mut(k).assign(&ndarray::ArrayView1::from(&v[..]));
            ids.push(rel.relation_id);
            predicates.push(rel.predicate.expect("annotated"));
        }
        Self::new(ids, base, predicates)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One optimization step's view, handed to the hook before the weights move.
pub struct BatchOutcome<'a> {
    pub epoch: usize,
    /// Sample indices into the training set.
    pub members: &'a [usize],
    pub predicates: &'a [PredicateId],
    pub encoded: &'a Array2<f64>,
    pub breakdown: &'a LossBreakdown,
}

/// End-of-epoch statistics, indexed by training-set sample.
pub struct EpochReport<'a> {
    pub epoch: usize,
    pub ids: &'a [RelationId],
    pub predicates: &'a [PredicateId],
    pub active: &'a [bool],
    /// Loss each sample received in its batch this epoch.
    pub losses: &'a [Option<f64>],
    /// Squared deviation of the sample's loss from its class mean.
    pub variances: &'a [Option<f64>],
    /// All samples encoded with the weights at the end of the epoch.
    pub encoded: &'a Array2<f64>,
}

pub trait TrainingHook {
    fn after_batch(&mut self, _batch: &BatchOutcome<'_>) -> Result<()> {
        Ok(())
    }

    /// Returns sample indices to deactivate for the remaining epochs.
    fn after_epoch(&mut self, _report: &EpochReport<'_>) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }
}

pub struct NoHook;

impl TrainingHook for NoHook {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_lm: f64,
    pub l_irm: f64,
    pub active_count: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: EncoderParams,
    pub trace: Vec<EpochTrace>,
    pub losses: Vec<Option<f64>>,
    pub variances: Vec<Option<f64>>,
    pub active: Vec<bool>,
}

/// Splits active samples into batches where every class present tends to
/// contribute at least two samples.
fn class_aware_batches(
    active: &[bool],
    predicates: &[PredicateId],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<PredicateId, Vec<usize>> = BTreeMap::new();
    for (k, p) in predicates.iter().enumerate() {
        if active[k] {
            by_class.entry(*p).or_default().push(k);
        }
    }
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    for members in by_class.values_mut() {
        members.shuffle(rng);
        let mut pairs: Vec<Vec<usize>> = members.chunks(2).map(<[usize]>::to_vec).collect();
        if pairs.len() > 1 && pairs.last().is_some_and(|c| c.len() == 1) {
            let odd = pairs.pop().expect("non-empty");
            pairs.last_mut().expect("non-empty").extend(odd);
        }
        chunks.extend(pairs);
    }
    chunks.shuffle(rng);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    for chunk in chunks {
        current.extend(chunk);
        if current.len() >= batch_size {
            batches.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        match batches.last_mut() {
            Some(last) if current.len() < 2 => last.extend(current),
            _ => batches.push(current),
        }
    }
    batches
}

/// Mini-batch gradient descent with momentum on the robust contrastive
/// objective. Only active samples are batched; the hook may deactivate
/// samples after every epoch.
pub fn fit(
    set: &TrainingSet,
    confusion: &ConfusionMatrix,
    config: &TrainConfig,
    projected_dim: usize,
    hook: &mut dyn TrainingHook,
) -> Result<FitOutcome> {
    config.validate()?;
    let n = set.len();
    let mut params = EncoderParams::identity_padded(projected_dim, set.base.ncols(), config.init_noise, config.seed)?;
    let mut velocity = Array2::<f64>::zeros(params.weight().dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut active = vec![true; n];
    let mut trace = Vec::with_capacity(config.epochs);
    let mut losses: Vec<Option<f64>> = vec![None; n];
    let mut variances: Vec<Option<f64>> = vec![None; n];

    for epoch in 1..=config.epochs {
        let active_count = active.iter().filter(|a| **a).count();
        losses.iter_mut().for_each(|l| *l = None);
        let mut irm_sum = 0.0;
        let mut steps = 0usize;

        for members in class_aware_batches(&active, &set.predicates, config.batch_size, &mut rng) {
            let base = set.base.select(Axis(0), &members);
            let predicates: Vec<PredicateId> = members.iter().map(|&k| set.predicates[k]).collect();
            let eval = match loss_and_gradient(&params, base.view(), &predicates, confusion, config) {
                Ok(eval) => eval,
                Err(Error::DegenerateBatch) => {
                    debug!("epoch {epoch}: skipping batch without positive pairs");
                    continue;
                }
                Err(Error::Numerical(msg)) => {
                    let ids: Vec<RelationId> = members.iter().map(|&k| set.ids[k]).collect();
                    return Err(Error::Numerical(format!("{msg}; batch relation ids {ids:?}")));
                }
                Err(e) => return Err(e),
            };
            for (slot, l) in members.iter().zip(&eval.breakdown.per_sample_lm) {
                losses[*slot] = *l;
            }
            hook.after_batch(&BatchOutcome {
                epoch,
                members: &members,
                predicates: &predicates,
                encoded: &eval.encoded,
                breakdown: &eval.breakdown,
            })?;
            velocity.mapv_inplace(|v| v * config.momentum);
            velocity += &eval.gradient;
            params.step(&velocity, config.learning_rate);
            irm_sum += eval.breakdown.l_irm;
            steps += 1;
        }

        let mut class_stats: BTreeMap<PredicateId, (f64, usize)> = BTreeMap::new();
        for (l, p) in losses.iter().zip(&set.predicates) {
            if let Some(l) = l {
                let e = class_stats.entry(*p).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
        }
        for (k, l) in losses.iter().enumerate() {
            variances[k] = l.map(|l| {
                let (sum, count) = class_stats[&set.predicates[k]];
                (l - sum / count as f64).powi(2)
            });
        }
        let (loss_sum, loss_n) = losses.iter().flatten().fold((0.0, 0usize), |(s, c), l| (s + l, c + 1));
        trace.push(EpochTrace {
            epoch,
            mean_lm: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            l_irm: if steps > 0 { irm_sum / steps as f64 } else { 0.0 },
            active_count,
        });

        let (encoded, _) = encode_rows(&params, set.base.view())?;
        let drops = hook.after_epoch(&EpochReport {
            epoch,
            ids: &set.ids,
            predicates: &set.predicates,
            active: &active,
            losses: &losses,
            variances: &variances,
            encoded: &encoded,
        })?;
        for k in drops {
            if k >= n || !active[k] {
                return Err(Error::Precondition(format!(
                    "hook dropped sample {k} which is not active"
                )));
            }
            active[k] = false;
        }
        debug!(
            "epoch {epoch}: mean_lm {:.6} active {active_count}",
            trace.last().expect("pushed").mean_lm
        );
    }

    Ok(FitOutcome {
        params,
        trace,
        losses,
        variances,
        active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_active_samples_once() {
        let predicates = vec![0, 0, 0, 1, 1, 2, 2, 2, 2, 3];
        let mut active = vec![true; predicates.len()];
        active[4] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = class_aware_batches(&active, &predicates, 4, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 5, 6, 7, 8, 9]);
        for b in &batches {
            assert!(b.len() >= 2);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let base = ndarray::array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]];
        let set = TrainingSet::new(vec![1, 2, 3, 4], base, vec![0, 0, 1, 1]).unwrap();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let c = ConfusionMatrix::zeros(2);
        let out = fit(&set, &c, &config, 2, &mut NoHook).unwrap();
        let init = EncoderParams::identity_padded(2, 2, config.init_noise, config.seed).unwrap();
        assert_eq!(out.params, init);
        assert!(out.trace.is_empty());
    }
}
