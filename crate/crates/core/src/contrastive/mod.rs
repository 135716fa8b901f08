//! Robust contrastive objective over a linear projection of frozen base
//! embeddings: InfoNCE with an angular margin on positives, confusion
//! weighted negatives, and a per-class loss-variance penalty.

mod fit;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ConfusionMatrix, PredicateId};
use crate::embedding::{clamp_cosine, cosine_similarity, norm, EmbeddingVector, COSINE_CLAMP};
use crate::error::{Error, Result};

pub use fit::{fit, BatchOutcome, EpochReport, EpochTrace, FitOutcome, NoHook, TrainingHook, TrainingSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    /// Angular margin added to positive-pair angles, in degrees.
    pub margin_degrees: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian noise added to the initial weight.
    pub init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            margin_degrees: 10.0,
            lambda: 0.3,
            learning_rate: 2e-5,
            momentum: 0.9,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            init_noise: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn margin(&self) -> f64 {
        self.margin_degrees.to_radians()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train: {what}")));
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !self.margin_degrees.is_finite() {
            return bad("margin must be finite");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.init_noise >= 0.0) {
            return bad("init_noise must be >= 0");
        }
        Ok(())
    }
}

/// Projection weight of shape `projected_dim × base_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    weight: Array2<f64>,
}

impl EncoderParams {
    pub fn new(weight: Array2<f64>) -> Result<Self> {
        if weight.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("encoder weight has non-finite entries".into()));
        }
        if weight.nrows() < 2 || weight.ncols() < 2 {
            return Err(Error::Validation(format!(
                "encoder weight must be at least 2x2, got {:?}",
                weight.dim()
            )));
        }
        Ok(Self { weight })
    }

    /// Identity on the leading `min(L, B)` block plus seeded Gaussian noise.
    pub fn identity_padded(projected_dim: usize, base_dim: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut weight = Array2::<f64>::zeros((projected_dim, base_dim));
        for i in 0..projected_dim.min(base_dim) {
            weight[[i, i]] = 1.0;
        }
        if noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
            weight.iter_mut().for_each(|w| *w += normal.sample(&mut rng));
        }
        Self::new(weight)
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn projected_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn base_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Gradient step `weight -= lr * direction`.
    pub(crate) fn step(&mut self, direction: &Array2<f64>, lr: f64) {
        self.weight.scaled_add(-lr, direction);
    }
}

/// `normalize(weight · base)`.
pub fn encode(params: &EncoderParams, base: &[f64]) -> Result<EmbeddingVector> {
    if base.len() != params.base_dim() {
        return Err(Error::Validation(format!(
            "base embedding has dim {}, encoder expects {}",
            base.len(),
            params.base_dim()
        )));
    }
    let z = params.weight.dot(&ArrayView1::from(base));
    let n = norm(z.as_slice().expect("contiguous"));
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Validation("projection collapsed to a zero vector".into()));
    }
    EmbeddingVector::new(z.iter().map(|v| v / n).collect())
}

/// Encodes every row of `base` (n × B), returning the unit rows (n × L)
/// and the pre-normalization norms.
pub(crate) fn encode_rows(params: &EncoderParams, base: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    if base.ncols() != params.base_dim() {
        return Err(Error::Validation(format!(
            "base embeddings have dim {}, encoder expects {}",
            base.ncols(),
            params.base_dim()
        )));
    }
    let mut h = base.dot(&params.weight.t());
    let mut norms = Vec::with_capacity(h.nrows());
    for (k, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Validation(format!("sample {k} projects to a zero vector")));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((h, norms))
}

/// `Σ_j exp(cos(θ_ij + m) / T)` over the positives; `None` when there are none.
pub fn positive_mass(anchor: &[f64], positives: &[&[f64]], margin: f64, temperature: f64) -> Result<Option<f64>> {
    if positives.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for p in positives {
        let theta = cosine_similarity(anchor, p)?.acos();
        total += ((theta + margin).cos() / temperature).exp();
    }
    Ok(Some(total))
}

/// `Σ_g (1 − C[p_i][p_g]) · exp(cos θ_ig / T)`.
pub fn negative_mass(
    anchor: &[f64],
    anchor_predicate: PredicateId,
    negatives: &[(&[f64], PredicateId)],
    confusion: &ConfusionMatrix,
    temperature: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (h, p) in negatives {
        let w = 1.0 - confusion.get(anchor_predicate, *p);
        total += w * (cosine_similarity(anchor, h)? / temperature).exp();
    }
    Ok(total)
}

/// Per-anchor quantities of the objective, in log space for stability.
struct AnchorTerms {
    loss: f64,
    /// `(partner, dL/dcos)` for every positive and weighted negative.
    partials: Vec<(usize, f64)>,
}

/// Loss of anchor `i` against every other row of `gram`, and the partial
/// derivative of that loss with respect to each raw cosine. `None` means
/// the anchor has no positive in the batch.
fn anchor_terms(
    i: usize,
    gram: &Array2<f64>,
    predicates: &[PredicateId],
    confusion: &ConfusionMatrix,
    margin: f64,
    temperature: f64,
) -> Option<AnchorTerms> {
    let n = predicates.len();
    let pi = predicates[i];
    // (partner, exponent, d exponent / d raw cosine, is_positive)
    let mut terms: Vec<(usize, f64, f64, bool)> = Vec::with_capacity(n);
    for j in (0..n).filter(|&j| j != i) {
        let raw = gram[[i, j]];
        let c = clamp_cosine(raw);
        let interior = raw.abs() < 1.0 - COSINE_CLAMP;
        if predicates[j] == pi {
            let theta = c.acos();
            let e = (theta + margin).cos() / temperature;
            let de = if interior {
                (theta + margin).sin() / (temperature * (1.0 - c * c).sqrt())
            } else {
                0.0
            };
            terms.push((j, e, de, true));
        } else {
            let w = 1.0 - confusion.get(pi, predicates[j]);
            if w > 0.0 {
                let de = if interior { 1.0 / temperature } else { 0.0 };
                terms.push((j, c / temperature + w.ln(), de, false));
            }
        }
    }
    if !terms.iter().any(|t| t.3) {
        return None;
    }
    let shift = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = terms.iter().map(|t| (t.1 - shift).exp()).collect();
    let pos: f64 = terms.iter().zip(&weights).filter(|(t, _)| t.3).map(|(_, w)| w).sum();
    let neg: f64 = terms.iter().zip(&weights).filter(|(t, _)| !t.3).map(|(_, w)| w).sum();
    let all = pos + neg;
    let loss = (neg / pos).ln_1p();
    // L = ln(pos + neg) − ln(pos): dL/de = w/all − [positive] w/pos
    let partials = terms
        .iter()
        .zip(&weights)
        .map(|(t, w)| {
            let d_exp = if t.3 { w / all - w / pos } else { w / all };
            (t.0, d_exp * t.2)
        })
        .collect();
    Some(AnchorTerms { loss, partials })
}

fn gram_of(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut gram = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            gram[[i, j]] = crate::embedding::raw_cosine(rows[i], rows[j])?;
        }
    }
    Ok(gram)
}

/// Per-sample InfoNCE losses; `None` for anchors without a positive.
pub fn infonce_loss(
    embeddings: &[&[f64]],
    predicates: &[PredicateId],
    confusion: &ConfusionMatrix,
    margin: f64,
    temperature: f64,
) -> Result<Vec<Option<f64>>> {
    if embeddings.len() != predicates.len() {
        return Err(Error::Validation("embeddings and predicates differ in length".into()));
    }
    if embeddings.len() < 2 {
        return Err(Error::Validation("batch size must be >= 2".into()));
    }
    let gram = gram_of(embeddings)?;
    let losses: Vec<Option<f64>> = (0..embeddings.len())
        .map(|i| anchor_terms(i, &gram, predicates, confusion, margin, temperature).map(|t| t.loss))
        .collect();
    if losses.iter().all(Option::is_none) {
        return Err(Error::DegenerateBatch);
    }
    Ok(losses)
}

/// Population variance of the losses of each predicate present in the batch.
pub fn class_variances(losses: &[Option<f64>], predicates: &[PredicateId]) -> BTreeMap<PredicateId, f64> {
    let mut groups: BTreeMap<PredicateId, Vec<f64>> = BTreeMap::new();
    for (l, p) in losses.iter().zip(predicates) {
        if let Some(l) = l {
            groups.entry(*p).or_default().push(*l);
        }
    }
    groups
        .into_iter()
        .map(|(p, ls)| (p, population_variance(&ls)))
        .collect()
}

pub(crate) fn population_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// `λ · Σ_i Var(L^{class(i)})`, summed over every sample with a loss.
pub fn irm_regularizer(losses: &[Option<f64>], predicates: &[PredicateId], lambda: f64) -> f64 {
    let variances = class_variances(losses, predicates);
    losses
        .iter()
        .zip(predicates)
        .filter(|(l, _)| l.is_some())
        .map(|(_, p)| lambda * variances[p])
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub per_sample_lm: Vec<Option<f64>>,
    pub per_class_variance: BTreeMap<PredicateId, f64>,
    pub l_irm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean_lm(&self) -> f64 {
        let (sum, n) = self
            .per_sample_lm
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), l| (s + l, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Loss, weight gradient and the encoded batch from one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub breakdown: LossBreakdown,
    pub gradient: Array2<f64>,
    /// Unit-norm encoded rows (n × L).
    pub encoded: Array2<f64>,
}

/// Total loss `mean(L_lm) + L_irm` for a batch of base embeddings (n × B)
/// and its analytic gradient with respect to the encoder weight.
pub fn loss_and_gradient(
    params: &EncoderParams,
    base: ArrayView2<'_, f64>,
    predicates: &[PredicateId],
    confusion: &ConfusionMatrix,
    config: &TrainConfig,
) -> Result<BatchEvaluation> {
    let n = base.nrows();
    if n != predicates.len() {
        return Err(Error::Validation("base rows and predicates differ in length".into()));
    }
    if n < 2 {
        return Err(Error::Validation("batch size must be >= 2".into()));
    }
    let q = confusion.dim();
    if let Some(p) = predicates.iter().find(|p| **p >= q) {
        return Err(Error::Validation(format!("predicate {p} outside confusion matrix")));
    }
    let (h, norms) = encode_rows(params, base)?;
    let gram = h.dot(&h.t());
    let margin = config.margin();

    let anchors: Vec<Option<AnchorTerms>> = (0..n)
        .map(|i| anchor_terms(i, &gram, predicates, confusion, margin, config.temperature))
        .collect();
    let per_sample_lm: Vec<Option<f64>> = anchors.iter().map(|a| a.as_ref().map(|t| t.loss)).collect();
    let active = per_sample_lm.iter().flatten().count();
    if active == 0 {
        return Err(Error::DegenerateBatch);
    }
    let per_class_variance = class_variances(&per_sample_lm, predicates);
    let l_irm = irm_regularizer(&per_sample_lm, predicates, config.lambda);
    let mean_lm = per_sample_lm.iter().flatten().sum::<f64>() / active as f64;

    let mut class_mean: BTreeMap<PredicateId, (f64, usize)> = BTreeMap::new();
    for (l, p) in per_sample_lm.iter().zip(predicates) {
        if let Some(l) = l {
            let e = class_mean.entry(*p).or_insert((0.0, 0));
            e.0 += l;
            e.1 += 1;
        }
    }

    // dTotal/dh_k accumulated over every (anchor, partner) cosine.
    let mut grad_h = Array2::<f64>::zeros(h.dim());
    for (i, terms) in anchors.iter().enumerate() {
        let Some(terms) = terms else { continue };
        let (sum, count) = class_mean[&predicates[i]];
        let upstream = 1.0 / active as f64 + 2.0 * config.lambda * (terms.loss - sum / count as f64);
        for &(j, d_cos) in &terms.partials {
            let coef = upstream * d_cos;
            if !coef.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for anchor {i} (partner {j})"
                )));
            }
            let (hi, hj) = (h.row(i).to_owned(), h.row(j).to_owned());
            grad_h.row_mut(i).scaled_add(coef, &hj);
            grad_h.row_mut(j).scaled_add(coef, &hi);
        }
    }

    // Back through h = z / ‖z‖.
    let mut grad_z = grad_h;
    for (k, mut g) in grad_z.axis_iter_mut(Axis(0)).enumerate() {
        let hk = h.row(k);
        let radial = hk.dot(&g);
        g.scaled_add(-radial, &hk);
        g.mapv_inplace(|v| v / norms[k]);
    }
    let gradient = grad_z.t().dot(&base);
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite weight gradient".into()));
    }

    Ok(BatchEvaluation {
        breakdown: LossBreakdown {
            per_sample_lm,
            per_class_variance,
            l_irm,
            total: mean_lm + l_irm,
        },
        gradient,
        encoded: h,
    })
}
