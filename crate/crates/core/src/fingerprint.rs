//! Circular (Morgan-style) fingerprints and Tanimoto similarity.

use crate::canon::{combine, initial_color, mix64};
use crate::graph::MolGraph;

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_BITS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fingerprint length {0} is not a positive power of two")]
pub struct BadFingerprintLength(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fingerprint {
    words: Vec<u64>,
    n_bits: usize,
    radius: usize,
}

impl Fingerprint {
    pub fn empty(n_bits: usize, radius: usize) -> Result<Self, BadFingerprintLength> {
        if n_bits == 0 || !n_bits.is_power_of_two() {
            return Err(BadFingerprintLength(n_bits));
        }
        Ok(Fingerprint {
            words: vec![0; n_bits.div_ceil(64)],
            n_bits,
            radius,
        })
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit & (self.n_bits - 1);
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

/// For every atom and every radius `r <= radius`, the identifier of its
/// r-neighborhood (iterated neighbor-label hashing) sets one bit.
pub fn circular_fingerprint(g: &MolGraph, radius: usize, n_bits: usize) -> Result<Fingerprint, BadFingerprintLength> {
    let mut fp = Fingerprint::empty(n_bits, radius)?;
    let mut ids: Vec<u64> = (0..g.atom_count()).map(|u| initial_color(g, u)).collect();
    for r in 0..=radius {
        if r > 0 {
            let mut scratch = Vec::new();
            ids = (0..g.atom_count())
                .map(|u| {
                    scratch.clear();
                    scratch.extend(g.neighbors(u).iter().map(|&(v, o)| combine(o.value() as u64, ids[v])));
                    scratch.sort_unstable();
                    scratch.iter().fold(combine(r as u64, ids[u]), |h, &x| combine(h, x))
                })
                .collect();
        }
        for &id in &ids {
            fp.set(mix64(id) as usize);
        }
    }
    Ok(fp)
}

/// |a ∩ b| / |a ∪ b|, defined as 1.0 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> f64 {
    assert_eq!(a.n_bits, b.n_bits, "fingerprint lengths differ");
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;

    fn from_bits(bits: &[usize]) -> Fingerprint {
        let mut f = Fingerprint::empty(64, 0).unwrap();
        for &b in bits {
            f.set(b);
        }
        f
    }

    #[test]
    fn tanimoto_examples() {
        let f = circular_fingerprint(&benzene(), DEFAULT_RADIUS, DEFAULT_BITS).unwrap();
        assert_eq!(tanimoto(&f, &f), 1.0);
        assert_eq!(tanimoto(&from_bits(&[1, 2]), &from_bits(&[3, 4])), 0.0);
        assert_eq!(tanimoto(&from_bits(&[1, 2, 3]), &from_bits(&[2, 3, 4])), 0.5);
        assert_eq!(tanimoto(&from_bits(&[]), &from_bits(&[])), 1.0);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert_eq!(circular_fingerprint(&benzene(), 2, 1000), Err(BadFingerprintLength(1000)));
        assert!(circular_fingerprint(&benzene(), 2, 0).is_err());
    }

    #[test]
    fn permutation_invariant_and_discriminative() {
        let g = decalin();
        let a = circular_fingerprint(&g, 2, 2048).unwrap();
        let b = circular_fingerprint(&g.permuted(&[3, 1, 4, 0, 5, 9, 2, 6, 8, 7]), 2, 2048).unwrap();
        assert_eq!(a, b);
        let c = circular_fingerprint(&ethanol(), 2, 2048).unwrap();
        assert!(tanimoto(&a, &c) < 0.5);
        assert!(a.count_ones() > 0);
    }
}
