//! Property declarations, z-score standardization and missing-value masking.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PropertyKind {
    Continuous,
    Categorical { cardinality: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyDef {
    pub name: String,
    pub kind: PropertyKind,
    /// Standardization mean (continuous only).
    pub mean: f64,
    /// Standardization scale (continuous only), always > 0.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PropertyError {
    #[error("expected {expected} property values, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("property `{name}`: category {value} is not an integer in 0..{cardinality}")]
    Category { name: String, value: f64, cardinality: usize },
    #[error("property `{name}`: non-finite value {value}")]
    NonFinite { name: String, value: f64 },
    #[error("property `{name}`: statistics must have std > 0, got {std}")]
    Stats { name: String, std: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertySpec {
    pub props: Vec<PropertyDef>,
}

impl PropertySpec {
    pub fn new(props: Vec<PropertyDef>) -> Result<Self, PropertyError> {
        for p in &props {
            if p.kind == PropertyKind::Continuous && !(p.std > 0.0 && p.std.is_finite()) {
                return Err(PropertyError::Stats {
                    name: p.name.clone(),
                    std: p.std,
                });
            }
        }
        Ok(PropertySpec { props })
    }

    /// Fits mean and std of each continuous property over the known values in
    /// `rows`. A zero or undefined spread falls back to 1. With
    /// `standardize == false` the identity transform (mean 0, std 1) is used.
    pub fn fit(kinds: &[(String, PropertyKind)], rows: &[Vec<Option<f64>>], standardize: bool) -> PropertySpec {
        let props = kinds
            .iter()
            .enumerate()
            .map(|(j, (name, kind))| {
                let (mut mean, mut std) = (0.0, 1.0);
                if standardize && *kind == PropertyKind::Continuous {
                    let known: Vec<f64> = rows.iter().filter_map(|r| r.get(j).copied().flatten()).collect();
                    if !known.is_empty() {
                        mean = known.iter().sum::<f64>() / known.len() as f64;
                        let var = known.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / known.len() as f64;
                        if var > 0.0 {
                            std = var.sqrt();
                        }
                    }
                }
                PropertyDef {
                    name: name.clone(),
                    kind: *kind,
                    mean,
                    std,
                }
            })
            .collect();
        PropertySpec { props }
    }

    pub fn len(&self) -> usize {
        self.props.len()
    }

    pub fn is_empty(&self) -> bool {
        self.props.is_empty()
    }

    pub fn n_continuous(&self) -> usize {
        self.props.iter().filter(|p| p.kind == PropertyKind::Continuous).count()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.props
            .iter()
            .filter_map(|p| match p.kind {
                PropertyKind::Categorical { cardinality } => Some(cardinality),
                PropertyKind::Continuous => None,
            })
            .collect()
    }

    /// Width of the property head: one value per continuous property plus
    /// one logit per category.
    pub fn head_width(&self) -> usize {
        self.n_continuous() + self.cardinalities().iter().sum::<usize>()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.props.iter().position(|p| p.name == name)
    }

    pub fn all_missing(&self) -> PropertyVector {
        PropertyVector {
            values: self
                .props
                .iter()
                .map(|p| match p.kind {
                    PropertyKind::Continuous => PropValue::Continuous(None),
                    PropertyKind::Categorical { .. } => PropValue::Categorical(None),
                })
                .collect(),
        }
    }

    /// Raw values (categories as integral floats) to standardized form.
    pub fn standardize(&self, raw: &[Option<f64>]) -> Result<PropertyVector, PropertyError> {
        if raw.len() != self.props.len() {
            return Err(PropertyError::Arity {
                expected: self.props.len(),
                found: raw.len(),
            });
        }
        let values = self
            .props
            .iter()
            .zip(raw)
            .map(|(p, &x)| {
                if let Some(v) = x {
                    if !v.is_finite() {
                        return Err(PropertyError::NonFinite {
                            name: p.name.clone(),
                            value: v,
                        });
                    }
                }
                Ok(match p.kind {
                    PropertyKind::Continuous => PropValue::Continuous(x.map(|v| (v - p.mean) / p.std)),
                    PropertyKind::Categorical { cardinality } => PropValue::Categorical(match x {
                        None => None,
                        Some(v) if v >= 0.0 && v.fract() == 0.0 && (v as usize) < cardinality => Some(v as usize),
                        Some(v) => {
                            return Err(PropertyError::Category {
                                name: p.name.clone(),
                                value: v,
                                cardinality,
                            })
                        }
                    }),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(PropertyVector { values })
    }

    pub fn destandardize(&self, pv: &PropertyVector) -> Vec<Option<f64>> {
        self.props
            .iter()
            .zip(&pv.values)
            .map(|(p, v)| match *v {
                PropValue::Continuous(z) => z.map(|z| z * p.std + p.mean),
                PropValue::Categorical(c) => c.map(|c| c as f64),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PropValue {
    /// Standardized value, `None` when missing.
    Continuous(Option<f64>),
    Categorical(Option<usize>),
}

impl PropValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, PropValue::Continuous(None) | PropValue::Categorical(None))
    }

    fn clear(&mut self) {
        *self = match self {
            PropValue::Continuous(_) => PropValue::Continuous(None),
            PropValue::Categorical(_) => PropValue::Categorical(None),
        }
    }
}

/// Property values in spec order.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyVector {
    pub values: Vec<PropValue>,
}

impl PropertyVector {
    /// Continuous encoder input: standardized values (0 where missing)
    /// followed by the missing flags.
    pub fn continuous_features(&self) -> Vec<f64> {
        let cont: Vec<Option<f64>> = self
            .values
            .iter()
            .filter_map(|v| match *v {
                PropValue::Continuous(z) => Some(z),
                PropValue::Categorical(_) => None,
            })
            .collect();
        cont.iter()
            .map(|z| z.unwrap_or(0.0))
            .chain(cont.iter().map(|z| if z.is_none() { 1.0 } else { 0.0 }))
            .collect()
    }

    /// Category ids in spec order of the categorical properties, with
    /// `cardinality` standing for missing.
    pub fn category_ids(&self, spec: &PropertySpec) -> Vec<usize> {
        self.values
            .iter()
            .zip(&spec.props)
            .filter_map(|(v, p)| match (*v, p.kind) {
                (PropValue::Categorical(c), PropertyKind::Categorical { cardinality }) => Some(c.unwrap_or(cardinality)),
                _ => None,
            })
            .collect()
    }

    pub fn is_all_missing(&self) -> bool {
        self.values.iter().all(PropValue::is_missing)
    }

    /// Copy with the properties at `indices` set to missing.
    pub fn with_missing(&self, indices: &[usize]) -> PropertyVector {
        let mut out = self.clone();
        for &i in indices {
            out.values[i].clear();
        }
        out
    }
}

/// Number of properties to hide, uniform on `0..=total`.
pub fn sample_mask_count<R: Rng + ?Sized>(total: usize, rng: &mut R) -> usize {
    rng.gen_range(0..=total)
}

/// Hides `t` distinct properties chosen uniformly at random.
pub fn mask_properties<R: Rng + ?Sized>(pv: &PropertyVector, t: usize, rng: &mut R) -> PropertyVector {
    let n = pv.values.len();
    let t = t.min(n);
    let picked: Vec<usize> = sample(rng, n, t).into_vec();
    pv.with_missing(&picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> PropertySpec {
        PropertySpec::new(vec![
            PropertyDef {
                name: "a".into(),
                kind: PropertyKind::Continuous,
                mean: 8.0,
                std: 2.0,
            },
            PropertyDef {
                name: "c".into(),
                kind: PropertyKind::Categorical { cardinality: 3 },
                mean: 0.0,
                std: 1.0,
            },
            PropertyDef {
                name: "b".into(),
                kind: PropertyKind::Continuous,
                mean: -1.0,
                std: 0.5,
            },
        ])
        .unwrap()
    }

    #[test]
    fn z_scores_and_inverse() {
        let s = spec();
        let pv = s.standardize(&[Some(10.0), Some(2.0), None]).unwrap();
        assert_eq!(pv.values[0], PropValue::Continuous(Some(1.0)));
        assert_eq!(pv.values[1], PropValue::Categorical(Some(2)));
        assert_eq!(pv.values[2], PropValue::Continuous(None));
        assert_eq!(pv.continuous_features(), vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pv.category_ids(&s), vec![2]);
        for x in [-3.7, 0.0, 1e3, 123.456] {
            let back = s.destandardize(&s.standardize(&[Some(x), None, Some(x)]).unwrap());
            assert!((back[0].unwrap() - x).abs() < 1e-12);
            assert!((back[2].unwrap() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let s = spec();
        assert!(matches!(s.standardize(&[Some(1.0)]), Err(PropertyError::Arity { expected: 3, found: 1 })));
        assert!(matches!(s.standardize(&[None, Some(3.0), None]), Err(PropertyError::Category { .. })));
        assert!(matches!(s.standardize(&[None, Some(0.5), None]), Err(PropertyError::Category { .. })));
        assert!(matches!(s.standardize(&[Some(f64::NAN), None, None]), Err(PropertyError::NonFinite { .. })));
        let bad = PropertyDef {
            name: "z".into(),
            kind: PropertyKind::Continuous,
            mean: 0.0,
            std: 0.0,
        };
        assert!(matches!(PropertySpec::new(vec![bad]), Err(PropertyError::Stats { .. })));
    }

    #[test]
    fn fit_statistics() {
        let kinds = vec![("x".to_string(), PropertyKind::Continuous), ("k".to_string(), PropertyKind::Continuous)];
        let rows = vec![vec![Some(1.0), Some(5.0)], vec![Some(3.0), Some(5.0)], vec![None, Some(5.0)]];
        let s = PropertySpec::fit(&kinds, &rows, true);
        assert_eq!((s.props[0].mean, s.props[0].std), (2.0, 1.0));
        // Constant column: spread falls back to 1.
        assert_eq!((s.props[1].mean, s.props[1].std), (5.0, 1.0));
        let raw = PropertySpec::fit(&kinds, &rows, false);
        assert_eq!((raw.props[0].mean, raw.props[0].std), (0.0, 1.0));
    }

    #[test]
    fn masking_counts() {
        let s = spec();
        let pv = s.standardize(&[Some(1.0), Some(0.0), Some(2.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mask_properties(&pv, 0, &mut rng), pv);
        assert!(mask_properties(&pv, 3, &mut rng).is_all_missing());
        for _ in 0..100 {
            let m = mask_properties(&pv, 2, &mut rng);
            assert_eq!(m.values.iter().filter(|v| v.is_missing()).count(), 2);
            let f = m.continuous_features();
            for j in 0..2 {
                if f[2 + j] == 1.0 {
                    assert_eq!(f[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn mask_count_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_mask_count(3, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }
}
