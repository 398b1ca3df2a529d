//! Sample-set metrics: validity, uniqueness, novelty, generative efficiency,
//! MinMAE against a property target, and internal diversity.

use std::collections::HashMap;

use serde::Serialize;

use crate::canon::{canonical_key, is_isomorphic};
use crate::fingerprint::{circular_fingerprint, tanimoto, Fingerprint, DEFAULT_BITS, DEFAULT_RADIUS};
use crate::graph::{MolGraph, SurrogateProperty};

/// Set of graphs up to isomorphism. Lookups go through the canonical key and
/// fall back to an explicit isomorphism test when keys collide.
#[derive(Clone, Debug, Default)]
pub struct MolIndex {
    buckets: HashMap<String, Vec<MolGraph>>,
    len: usize,
}

impl MolIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, g: &MolGraph) -> bool {
        self.contains_keyed(&canonical_key(g), g)
    }

    fn contains_keyed(&self, key: &str, g: &MolGraph) -> bool {
        self.buckets.get(key).is_some_and(|b| b.iter().any(|h| is_isomorphic(g, h)))
    }

    /// Adds `g`; returns false if an isomorphic graph was already present.
    pub fn insert(&mut self, g: &MolGraph) -> bool {
        let key = canonical_key(g);
        if self.contains_keyed(&key, g) {
            return false;
        }
        self.buckets.entry(key).or_default().push(g.clone());
        self.len += 1;
        true
    }
}

impl<'a> FromIterator<&'a MolGraph> for MolIndex {
    fn from_iter<I: IntoIterator<Item = &'a MolGraph>>(iter: I) -> Self {
        let mut idx = MolIndex::new();
        for g in iter {
            idx.insert(g);
        }
        idx
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SampleCounts {
    pub total: usize,
    pub valid: usize,
    pub unique: usize,
    pub novel: usize,
    /// Valid, first occurrence of its structure, and absent from training data.
    pub efficient: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Efficiency {
    pub counts: SampleCounts,
    /// valid / total
    pub validity: f64,
    /// unique / valid
    pub uniqueness: f64,
    /// novel / valid
    pub novelty: f64,
    /// efficient / total
    pub efficiency: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `None` entries are samples that failed to decode.
pub fn generative_efficiency(samples: &[Option<MolGraph>], train: &MolIndex) -> Efficiency {
    let mut seen = MolIndex::new();
    let mut c = SampleCounts {
        total: samples.len(),
        ..Default::default()
    };
    for g in samples.iter().flatten() {
        c.valid += 1;
        let unique = seen.insert(g);
        let novel = !train.contains(g);
        c.unique += unique as usize;
        c.novel += novel as usize;
        c.efficient += (unique && novel) as usize;
    }
    Efficiency {
        counts: c,
        validity: ratio(c.valid, c.total),
        uniqueness: ratio(c.unique, c.valid),
        novelty: ratio(c.novel, c.valid),
        efficiency: ratio(c.efficient, c.total),
    }
}

/// Smallest absolute error between a valid sample's property and `target`;
/// `f64::INFINITY` when there are no valid samples.
pub fn min_mae(samples: &[Option<MolGraph>], target: f64, property: SurrogateProperty) -> f64 {
    min_abs_error(samples.iter().flatten().map(|g| property.compute(g)), target)
}

/// Smallest `|value - target|`, `f64::INFINITY` for no values.
pub fn min_abs_error(values: impl IntoIterator<Item = f64>, target: f64) -> f64 {
    values.into_iter().map(|v| (v - target).abs()).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("internal diversity needs at least 2 valid samples, got {0}")]
pub struct TooFewSamples(pub usize);

/// One minus the mean pairwise Tanimoto similarity.
pub fn diversity_of(fps: &[Fingerprint]) -> Result<f64, TooFewSamples> {
    if fps.len() < 2 {
        return Err(TooFewSamples(fps.len()));
    }
    let mut sum = 0.0;
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            sum += tanimoto(&fps[i], &fps[j]);
        }
    }
    let pairs = fps.len() * (fps.len() - 1) / 2;
    Ok(1.0 - sum / pairs as f64)
}

pub fn internal_diversity(samples: &[Option<MolGraph>]) -> Result<f64, TooFewSamples> {
    let fps: Vec<Fingerprint> = samples
        .iter()
        .flatten()
        .map(|g| circular_fingerprint(g, DEFAULT_RADIUS, DEFAULT_BITS).expect("default length is a power of two"))
        .collect();
    diversity_of(&fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;
    use crate::smiles::parse_smiles;
    use proptest::prelude::*;

    fn g(s: &str) -> Option<MolGraph> {
        Some(parse_smiles(s).unwrap())
    }

    #[test]
    fn efficiency_counts() {
        let train: MolIndex = [parse_smiles("CCO").unwrap()].iter().collect();
        let samples = vec![g("CC"), g("C1CC1"), g("CC"), g("OCC")];
        let e = generative_efficiency(&samples, &train);
        assert_eq!(e.counts, SampleCounts { total: 4, valid: 4, unique: 3, novel: 3, efficient: 2 });
        assert_eq!(e.efficiency, 0.5);
        assert_eq!(e.uniqueness, 0.75);

        let same = vec![g("CCN"); 5];
        let e = generative_efficiency(&same, &MolIndex::new());
        assert_eq!(e.counts.unique, 1);

        let with_failures = vec![None, g("C"), None, g("N")];
        let e = generative_efficiency(&with_failures, &MolIndex::new());
        assert_eq!((e.validity, e.uniqueness, e.efficiency), (0.5, 1.0, 0.5));
        let e = generative_efficiency(&[], &MolIndex::new());
        assert_eq!((e.validity, e.efficiency), (0.0, 0.0));
    }

    #[test]
    fn index_is_up_to_isomorphism() {
        let mut idx = MolIndex::new();
        assert!(idx.insert(&benzene()));
        assert!(!idx.insert(&benzene().permuted(&[3, 4, 5, 0, 1, 2])));
        assert!(idx.insert(&cyclohexane()));
        assert_eq!(idx.len(), 2);
        assert!(idx.contains(&parse_smiles("C1=CC=CC=C1").unwrap()));
        assert!(!idx.contains(&decalin()));
    }

    #[test]
    fn min_mae_examples() {
        assert_eq!(min_abs_error([578.0, 590.0], 580.0), 2.0);
        let samples = vec![g("C"), g("CC"), None];
        let ethane = SurrogateProperty::MolWt.compute(&parse_smiles("CC").unwrap());
        assert_eq!(min_mae(&samples, ethane, SurrogateProperty::MolWt), 0.0);
        assert_eq!(min_mae(&samples, 4.0, SurrogateProperty::HeavyAtomCount), 2.0);
        assert_eq!(min_mae(&[None, None], 1.0, SurrogateProperty::RingCount), f64::INFINITY);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(internal_diversity(&vec![g("CCO"); 4]).unwrap(), 0.0);
        let mut a = Fingerprint::empty(64, 2).unwrap();
        let mut b = Fingerprint::empty(64, 2).unwrap();
        a.set(1);
        b.set(2);
        assert_eq!(diversity_of(&[a.clone(), b.clone()]).unwrap(), 1.0);
        let d = diversity_of(&[a.clone(), a, b]).unwrap();
        assert!((d - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(internal_diversity(&[g("C"), None]), Err(TooFewSamples(1)));
    }

    fn pool() -> Vec<Option<MolGraph>> {
        ["C", "CC", "CCO", "C1CC1", "CC", "OCC", "C=O", "C#N", "CCC", "C1CCCCC1"]
            .iter()
            .map(|s| g(s))
            .chain([None, None])
            .collect()
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_order_free(perm in Just(pool()).prop_shuffle(), cut in 0usize..12) {
            let train: MolIndex = pool()[..3].iter().flatten().collect();
            let samples = &perm[..cut.max(1)];
            let e = generative_efficiency(samples, &train);
            for x in [e.validity, e.uniqueness, e.novelty, e.efficiency] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert!(e.efficiency <= e.validity.min(e.uniqueness).min(e.novelty) + 1e-12);
            let full = generative_efficiency(&perm, &train);
            let reference = generative_efficiency(&pool(), &train);
            prop_assert_eq!(full.counts, reference.counts);
            if let (Ok(a), Ok(b)) = (internal_diversity(&perm), internal_diversity(&pool())) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
