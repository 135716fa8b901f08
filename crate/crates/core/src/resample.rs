//! Repeat-factor resampling of images by their scarcest triplet.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::transfer::ScarcityTable;

/// `max(1, t · c_pair · c_pred)`.
pub fn triplet_repeat_factor(pair_scarcity: f64, predicate_scarcity: f64, t: f64) -> f64 {
    (t * pair_scarcity * predicate_scarcity).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatPlan {
    /// `(image_id, R)` in dataset image order.
    pub per_image: Vec<(String, f64)>,
    pub materialized_index: Vec<String>,
}

/// Largest triplet repeat factor among each image's relations; images
/// without relations get 1.
pub fn image_repeat_factors(dataset: &Dataset, scarcity: &ScarcityTable, t: f64) -> Result<Vec<(String, f64)>> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("repeat threshold t = {t} must be > 0")));
    }
    let mut best: HashMap<&str, f64> = HashMap::new();
    for rel in &dataset.relations {
        let p = rel.predicate.expect("annotated");
        let r = triplet_repeat_factor(
            scarcity.pair(&rel.subject.class_label, &rel.object.class_label),
            scarcity.predicate(p),
            t,
        );
        let slot = best.entry(rel.image_id.as_str()).or_insert(1.0);
        *slot = slot.max(r);
    }
    Ok(dataset
        .images
        .iter()
        .map(|img| (img.clone(), best.get(img.as_str()).copied().unwrap_or(1.0)))
        .collect())
}

/// Each image appears `floor(R)` times plus once more with probability
/// `frac(R)`; the result is shuffled. Fully determined by `seed`.
pub fn materialize(factors: &[(String, f64)], seed: u64) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = Vec::new();
    for (image, r) in factors {
        if !(*r >= 1.0) || !r.is_finite() {
            return Err(Error::Precondition(format!(
                "repeat factor {r} for `{image}` must be finite and >= 1"
            )));
        }
        let whole = r.floor();
        let frac = r - whole;
        let extra = frac > 0.0 && rng.random::<f64>() < frac;
        let copies = whole as usize + usize::from(extra);
        index.extend(std::iter::repeat_n(image.clone(), copies));
    }
    index.shuffle(&mut rng);
    Ok(index)
}

pub fn plan_resampling(dataset: &Dataset, scarcity: &ScarcityTable, t: f64, seed: u64) -> Result<RepeatPlan> {
    let per_image = image_repeat_factors(dataset, scarcity, t)?;
    let expected: f64 = per_image.iter().map(|(_, r)| r).sum();
    if expected > 100.0 * per_image.len().max(1) as f64 {
        log::warn!(
            "repeat threshold t = {t} expands {} images to ~{expected:.0} entries; t may be too large for this dataset",
            per_image.len()
        );
    }
    let materialized_index = materialize(&per_image, seed)?;
    Ok(RepeatPlan {
        per_image,
        materialized_index,
    })
}

impl RepeatPlan {
    /// Plain text, one image id per line.
    pub fn write_index(&self, out: &mut impl Write) -> std::io::Result<()> {
        for image in &self.materialized_index {
            writeln!(out, "{image}")?;
        }
        Ok(())
    }

    pub fn write_factors(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "image_id,repeat_factor")?;
        for (image, r) in &self.per_image {
            writeln!(out, "{image},{r}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityRef, PredicateVocab, Provenance, RelationInstance};
    use crate::transfer::compute_scarcity;

    #[test]
    fn triplet_factor_examples() {
        assert_eq!(triplet_repeat_factor(0.01, 0.01, 100.0), 1.0);
        assert!((triplet_repeat_factor(0.02, 0.9, 100.0) - 1.8).abs() < 1e-12);
        let r1 = triplet_repeat_factor(0.1, 0.5, 100.0);
        let r2 = triplet_repeat_factor(0.1, 0.5, 200.0);
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    fn image_dataset() -> Dataset {
        let vocab = PredicateVocab::new(vec!["on".into(), "beside".into()]).unwrap();
        let rel = |id: u64, img: &str, p: usize, obj: &str| RelationInstance {
            relation_id: id,
            image_id: img.into(),
            subject: EntityRef::new("person", format!("s{id}")),
            object: EntityRef::new(obj, format!("o{id}")),
            predicate: Some(p),
            provenance: Provenance::Original,
        };
        Dataset::new(
            vocab,
            vec![],
            vec!["a".into(), "b".into(), "empty".into()],
            vec![
                rel(0, "a", 0, "snow"),
                rel(1, "a", 0, "snow"),
                rel(2, "a", 0, "snow"),
                rel(3, "b", 0, "snow"),
                rel(4, "b", 1, "tree"),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn image_factor_is_max_and_empty_is_one() {
        let d = image_dataset();
        let s = compute_scarcity(&d).unwrap();
        let f = image_repeat_factors(&d, &s, 10.0).unwrap();
        // on: 4 → 0.25; beside: 1; (person, snow): 4 → 0.25; (person, tree): 1
        assert_eq!(f[0], ("a".to_string(), 1.0));
        assert_eq!(f[1], ("b".to_string(), 10.0));
        assert_eq!(f[2], ("empty".to_string(), 1.0));
        let clamped = image_repeat_factors(&d, &s, 0.5).unwrap();
        assert!(clamped.iter().all(|(_, r)| *r == 1.0));
    }

    #[test]
    fn materialize_examples() {
        let ones: Vec<(String, f64)> = (0..20).map(|i| (format!("i{i}"), 1.0)).collect();
        let mut idx = materialize(&ones, 5).unwrap();
        idx.sort();
        let mut expected: Vec<String> = ones.iter().map(|(i, _)| i.clone()).collect();
        expected.sort();
        assert_eq!(idx, expected);

        let two = vec![("x".to_string(), 2.0), ("y".to_string(), 1.0)];
        let idx = materialize(&two, 1).unwrap();
        assert_eq!(idx.iter().filter(|i| *i == "x").count(), 2);
        assert_eq!(materialize(&two, 1).unwrap(), idx);
        assert!(materialize(&[("z".to_string(), 0.5)], 0).is_err());
    }
}
