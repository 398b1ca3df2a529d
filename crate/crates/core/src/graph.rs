//! Attributed molecular graphs and the graph-computable properties used as
//! conditioning targets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::element::{Element, HYDROGEN_MASS};

/// A heavy atom with its formal charge and number of attached hydrogens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub charge: i8,
    pub h_count: u8,
}

impl Atom {
    pub fn new(element: Element, charge: i8, h_count: u8) -> Self {
        Atom {
            element,
            charge,
            h_count,
        }
    }

    /// Compact label such as `CH3`, `NH3+` or `Zn-2`.
    pub fn label(&self) -> String {
        let mut s = self.element.symbol().to_string();
        match self.h_count {
            0 => {}
            1 => s.push('H'),
            n => {
                s.push('H');
                s.push_str(&n.to_string());
            }
        }
        match self.charge {
            0 => {}
            1 => s.push('+'),
            -1 => s.push('-'),
            c if c > 0 => s.push_str(&format!("+{c}")),
            c => s.push_str(&format!("-{}", -(c as i16))),
        }
        s
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BondOrder {
    Single = 1,
    Double = 2,
    Triple = 3,
}

impl BondOrder {
    pub const ALL: [BondOrder; 3] = [BondOrder::Single, BondOrder::Double, BondOrder::Triple];

    pub fn value(self) -> u8 {
        self as u8
    }

    pub fn from_value(v: u8) -> Option<BondOrder> {
        match v {
            1 => Some(BondOrder::Single),
            2 => Some(BondOrder::Double),
            3 => Some(BondOrder::Triple),
            _ => None,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BondOrder::Single => "-",
            BondOrder::Double => "=",
            BondOrder::Triple => "#",
        }
    }
}

impl TryFrom<u8> for BondOrder {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        BondOrder::from_value(v).ok_or_else(|| format!("invalid bond order {v}"))
    }
}

impl From<BondOrder> for u8 {
    fn from(o: BondOrder) -> u8 {
        o.value()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    /// The endpoint opposite to `atom`, if `atom` is an endpoint.
    pub fn other(&self, atom: usize) -> Option<usize> {
        if self.a == atom {
            Some(self.b)
        } else if self.b == atom {
            Some(self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("atom index {index} out of range for graph with {len} atoms")]
    AtomIndex { index: usize, len: usize },
    #[error("self-loop on atom {0}")]
    SelfLoop(usize),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
}

/// Undirected molecular graph. May hold several disconnected components
/// (e.g. the two ions of a salt).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MolGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<(usize, BondOrder)>>,
}

impl MolGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(atoms: Vec<Atom>, bonds: &[(usize, usize, BondOrder)]) -> Result<Self, GraphError> {
        let mut g = MolGraph::new();
        for atom in atoms {
            g.add_atom(atom);
        }
        for &(a, b, order) in bonds {
            g.add_bond(a, b, order)?;
        }
        Ok(g)
    }

    pub fn add_atom(&mut self, atom: Atom) -> usize {
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        self.atoms.len() - 1
    }

    pub fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> Result<(), GraphError> {
        let len = self.atoms.len();
        for index in [a, b] {
            if index >= len {
                return Err(GraphError::AtomIndex { index, len });
            }
        }
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        if self.bond_order(a, b).is_some() {
            return Err(GraphError::DuplicateBond(a.min(b), a.max(b)));
        }
        self.bonds.push(Bond { a, b, order });
        self.adjacency[a].push((b, order));
        self.adjacency[b].push((a, order));
        Ok(())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Neighbors of `atom` with the connecting bond order, in bond insertion order.
    pub fn neighbors(&self, atom: usize) -> &[(usize, BondOrder)] {
        &self.adjacency[atom]
    }

    pub fn bond_order(&self, a: usize, b: usize) -> Option<BondOrder> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|(n, _)| *n == b)
            .map(|&(_, o)| o)
    }

    /// Sum of the orders of the bonds incident to `atom`.
    pub fn weighted_degree(&self, atom: usize) -> Result<u32, GraphError> {
        let nbrs = self.adjacency.get(atom).ok_or(GraphError::AtomIndex {
            index: atom,
            len: self.atoms.len(),
        })?;
        Ok(nbrs.iter().map(|(_, o)| o.value() as u32).sum())
    }

    /// Molecular weight in Daltons, counting attached hydrogens.
    pub fn molecular_weight(&self) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.element.mass() + a.h_count as f64 * HYDROGEN_MASS)
            .sum()
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.len()
    }

    /// Cyclomatic number: |bonds| - |atoms| + |components|.
    pub fn ring_count(&self) -> usize {
        self.bonds.len() + self.connected_components() - self.atoms.len()
    }

    pub fn connected_components(&self) -> usize {
        self.component_labels().1
    }

    /// Component id per atom (numbered by lowest member atom) and the component count.
    pub fn component_labels(&self) -> (Vec<usize>, usize) {
        let n = self.atoms.len();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = count;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if label[v] == usize::MAX {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// Atom index lists of each connected component, ordered by lowest atom index.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let (labels, count) = self.component_labels();
        let mut out = vec![Vec::new(); count];
        for (atom, &c) in labels.iter().enumerate() {
            out[c].push(atom);
        }
        out
    }

    /// Returns a copy with atoms reordered so that new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length mismatch");
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut g = MolGraph::new();
        for &old in perm {
            g.add_atom(self.atoms[old]);
        }
        for bond in &self.bonds {
            g.add_bond(inverse[bond.a], inverse[bond.b], bond.order)
                .expect("permutation preserves a valid bond set");
        }
        g
    }
}

/// Graph-computable molecular properties used as conditioning targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SurrogateProperty {
    #[serde(rename = "molWt")]
    MolWt,
    #[serde(rename = "ring_count")]
    RingCount,
    #[serde(rename = "heavy_atom_count")]
    HeavyAtomCount,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown property `{0}` (expected molWt, ring_count or heavy_atom_count)")]
pub struct UnknownProperty(pub String);

impl SurrogateProperty {
    pub const ALL: [SurrogateProperty; 3] = [
        SurrogateProperty::MolWt,
        SurrogateProperty::RingCount,
        SurrogateProperty::HeavyAtomCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SurrogateProperty::MolWt => "molWt",
            SurrogateProperty::RingCount => "ring_count",
            SurrogateProperty::HeavyAtomCount => "heavy_atom_count",
        }
    }

    pub fn compute(self, g: &MolGraph) -> f64 {
        match self {
            SurrogateProperty::MolWt => g.molecular_weight(),
            SurrogateProperty::RingCount => g.ring_count() as f64,
            SurrogateProperty::HeavyAtomCount => g.heavy_atom_count() as f64,
        }
    }
}

impl FromStr for SurrogateProperty {
    type Err = UnknownProperty;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SurrogateProperty::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| UnknownProperty(s.to_string()))
    }
}

impl fmt::Display for SurrogateProperty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn atom(sym: &str, h: u8) -> Atom {
        Atom::new(sym.parse().unwrap(), 0, h)
    }

    pub fn chain(n: usize) -> MolGraph {
        let mut atoms = vec![atom("C", 2); n];
        if n > 0 {
            atoms[0].h_count = 3;
            atoms[n - 1].h_count = 3;
        }
        let bonds: Vec<_> = (1..n).map(|i| (i - 1, i, BondOrder::Single)).collect();
        MolGraph::from_parts(atoms, &bonds).unwrap()
    }

    pub fn ring(n: usize, h: u8, alternate: bool) -> MolGraph {
        let atoms = vec![atom("C", h); n];
        let bonds: Vec<_> = (0..n)
            .map(|i| {
                let order = if alternate && i % 2 == 0 {
                    BondOrder::Double
                } else {
                    BondOrder::Single
                };
                (i, (i + 1) % n, order)
            })
            .collect();
        MolGraph::from_parts(atoms, &bonds).unwrap()
    }

    /// Kekulized benzene.
    pub fn benzene() -> MolGraph {
        ring(6, 1, true)
    }

    pub fn cyclohexane() -> MolGraph {
        ring(6, 2, false)
    }

    pub fn isobutane() -> MolGraph {
        let atoms = vec![atom("C", 1), atom("C", 3), atom("C", 3), atom("C", 3)];
        MolGraph::from_parts(
            atoms,
            &[(0, 1, BondOrder::Single), (0, 2, BondOrder::Single), (0, 3, BondOrder::Single)],
        )
        .unwrap()
    }

    /// Decalin: two fused six-rings sharing the 0-5 edge.
    pub fn decalin() -> MolGraph {
        let mut atoms = vec![atom("C", 2); 10];
        atoms[0].h_count = 1;
        atoms[5].h_count = 1;
        let mut bonds: Vec<_> = (0..6).map(|i| (i, (i + 1) % 6, BondOrder::Single)).collect();
        bonds.extend([
            (5, 6, BondOrder::Single),
            (6, 7, BondOrder::Single),
            (7, 8, BondOrder::Single),
            (8, 9, BondOrder::Single),
            (9, 0, BondOrder::Single),
        ]);
        MolGraph::from_parts(atoms, &bonds).unwrap()
    }

    pub fn ethanol() -> MolGraph {
        MolGraph::from_parts(
            vec![atom("C", 3), atom("C", 2), atom("O", 1)],
            &[(0, 1, BondOrder::Single), (1, 2, BondOrder::Single)],
        )
        .unwrap()
    }

    pub fn dimethyl_ether() -> MolGraph {
        MolGraph::from_parts(
            vec![atom("C", 3), atom("O", 0), atom("C", 3)],
            &[(0, 1, BondOrder::Single), (1, 2, BondOrder::Single)],
        )
        .unwrap()
    }

    pub fn salt() -> MolGraph {
        MolGraph::from_parts(
            vec![Atom::new(Element::NA, 1, 0), Atom::new(Element::CL, -1, 0)],
            &[],
        )
        .unwrap()
    }

    pub fn formaldehyde() -> MolGraph {
        MolGraph::from_parts(vec![atom("O", 0), atom("C", 2)], &[(0, 1, BondOrder::Double)]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn weighted_degree_examples() {
        let mut g = MolGraph::new();
        g.add_atom(atom("C", 4));
        assert_eq!(g.weighted_degree(0).unwrap(), 0);
        assert_eq!(isobutane().weighted_degree(0).unwrap(), 3);
        assert_eq!(formaldehyde().weighted_degree(0).unwrap(), 2);
        assert!(matches!(g.weighted_degree(5), Err(GraphError::AtomIndex { .. })));
    }

    #[test]
    fn molecular_weight_examples() {
        assert_eq!(MolGraph::new().molecular_weight(), 0.0);
        let mut water = MolGraph::new();
        water.add_atom(atom("O", 2));
        assert!((water.molecular_weight() - 18.015).abs() < 0.01);
        assert!((salt().molecular_weight() - 58.44).abs() < 0.01);
    }

    #[test]
    fn ring_count_examples() {
        assert_eq!(chain(5).ring_count(), 0);
        assert_eq!(benzene().ring_count(), 1);
        assert_eq!(decalin().ring_count(), 2);
        assert_eq!(decalin().bonds().len(), 11);
    }

    #[test]
    fn component_counts() {
        let empty = MolGraph::new();
        assert_eq!((empty.heavy_atom_count(), empty.connected_components()), (0, 0));
        assert_eq!((salt().heavy_atom_count(), salt().connected_components()), (2, 2));
        assert_eq!((benzene().heavy_atom_count(), benzene().connected_components()), (6, 1));
    }

    #[test]
    fn bond_invariants_enforced() {
        let mut g = chain(3);
        assert_eq!(g.add_bond(0, 0, BondOrder::Single), Err(GraphError::SelfLoop(0)));
        assert_eq!(g.add_bond(1, 0, BondOrder::Double), Err(GraphError::DuplicateBond(0, 1)));
        assert!(matches!(g.add_bond(0, 9, BondOrder::Single), Err(GraphError::AtomIndex { .. })));
    }

    #[test]
    fn weight_additive_over_components() {
        let a = benzene();
        let b = salt();
        let mut joined = a.clone();
        let offset = joined.atom_count();
        for atom in b.atoms() {
            joined.add_atom(*atom);
        }
        for bond in b.bonds() {
            joined.add_bond(bond.a + offset, bond.b + offset, bond.order).unwrap();
        }
        let sum = a.molecular_weight() + b.molecular_weight();
        assert!((joined.molecular_weight() - sum).abs() < 1e-9);
        let perm: Vec<usize> = (0..joined.atom_count()).rev().collect();
        assert!((joined.permuted(&perm).molecular_weight() - sum).abs() < 1e-9);
    }

    #[test]
    fn atom_labels() {
        assert_eq!(atom("C", 3).label(), "CH3");
        assert_eq!(Atom::new(Element::N, 1, 3).label(), "NH3+");
        assert_eq!(Atom::new("Zn".parse().unwrap(), -2, 0).label(), "Zn-2");
        assert_eq!(Atom::new(Element::O, -1, 0).label(), "O-");
    }

    #[test]
    fn surrogate_names_parse() {
        for p in SurrogateProperty::ALL {
            assert_eq!(p.name().parse::<SurrogateProperty>().unwrap(), p);
        }
        assert!("logP".parse::<SurrogateProperty>().is_err());
    }
}
