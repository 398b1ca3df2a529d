//! Label refinement over molecular graphs: canonical keys for deduplication
//! and the VF2-style isomorphism check that resolves key collisions.

use std::collections::VecDeque;

use crate::graph::MolGraph;

/// 64-bit finalizer (splitmix64).
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn combine(h: u64, x: u64) -> u64 {
    mix64(h ^ x.wrapping_mul(0x1000_0000_01b3).rotate_left(17))
}

/// Label of an atom before refinement: element, charge, hydrogens, degree
/// and bond-order sum are all isomorphism invariants.
pub(crate) fn initial_color(g: &MolGraph, atom: usize) -> u64 {
    let a = g.atoms()[atom];
    let nbrs = g.neighbors(atom);
    let wdeg: u64 = nbrs.iter().map(|(_, o)| o.value() as u64).sum();
    let mut h = mix64(a.element.atomic_number() as u64);
    h = combine(h, a.charge as i64 as u64);
    h = combine(h, a.h_count as u64);
    h = combine(h, nbrs.len() as u64);
    combine(h, wdeg)
}

/// One refinement round: each atom's new color digests its old color and the
/// sorted multiset of (bond order, neighbor color).
pub(crate) fn refine_round(g: &MolGraph, colors: &[u64]) -> Vec<u64> {
    let mut scratch = Vec::new();
    (0..g.atom_count())
        .map(|u| {
            scratch.clear();
            scratch.extend(
                g.neighbors(u)
                    .iter()
                    .map(|&(v, o)| combine(o.value() as u64, colors[v])),
            );
            scratch.sort_unstable();
            scratch.iter().fold(combine(0x51ed_270b, colors[u]), |h, &x| combine(h, x))
        })
        .collect()
}

fn distinct(colors: &[u64]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

fn eccentricity(g: &MolGraph, start: usize, dist: &mut [usize], queue: &mut VecDeque<usize>) -> usize {
    dist.iter_mut().for_each(|d| *d = usize::MAX);
    dist[start] = 0;
    queue.clear();
    queue.push_back(start);
    let mut far = 0;
    while let Some(u) = queue.pop_front() {
        far = far.max(dist[u]);
        for &(v, _) in g.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    far
}

/// Deterministic key that is identical for isomorphic graphs.
///
/// Each connected component is refined for `2 * diameter` rounds (at least
/// one) and digested from its sorted final colors; the key is the sorted list
/// of component digests. Distinct keys imply non-isomorphic graphs; equal keys
/// must be confirmed with [`is_isomorphic`] where exactness matters.
pub fn canonical_key(g: &MolGraph) -> String {
    let n = g.atom_count();
    let mut dist = vec![0; n];
    let mut queue = VecDeque::new();
    let mut digests: Vec<u64> = Vec::new();
    let init: Vec<u64> = (0..n).map(|u| initial_color(g, u)).collect();
    let components = g.components();
    // Refinement is local, so rounds can run on the whole graph once the
    // largest per-component round count is known; components are then
    // digested from the colors at their own round count.
    let rounds: Vec<usize> = components
        .iter()
        .map(|members| {
            let diameter = members
                .iter()
                .map(|&u| eccentricity(g, u, &mut dist, &mut queue))
                .max()
                .unwrap_or(0);
            (2 * diameter).max(1)
        })
        .collect();
    let max_rounds = rounds.iter().copied().max().unwrap_or(0);
    let mut history = vec![init];
    for _ in 0..max_rounds {
        let next = refine_round(g, history.last().unwrap());
        history.push(next);
    }
    for (c, members) in components.iter().enumerate() {
        let colors = &history[rounds[c]];
        let mut member_colors: Vec<u64> = members.iter().map(|&u| colors[u]).collect();
        member_colors.sort_unstable();
        let digest = member_colors
            .iter()
            .fold(mix64(members.len() as u64), |h, &x| combine(h, x));
        digests.push(digest);
    }
    digests.sort_unstable();
    digests
        .iter()
        .map(|d| format!("{d:016x}"))
        .collect::<Vec<_>>()
        .join(".")
}

/// Result of a bounded isomorphism search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IsoOutcome {
    Isomorphic,
    NotIsomorphic,
    /// The search exceeded its node budget.
    Undecided,
}

/// Default number of search nodes before giving up.
pub const DEFAULT_ISO_BUDGET: usize = 2_000_000;

/// Label-preserving isomorphism test; an undecided search counts as `false`.
pub fn is_isomorphic(a: &MolGraph, b: &MolGraph) -> bool {
    isomorphism(a, b, DEFAULT_ISO_BUDGET) == IsoOutcome::Isomorphic
}

/// Stable joint refinement of two graphs with a shared color space. Returns
/// `None` as soon as the color histograms diverge.
fn joint_colors(a: &MolGraph, b: &MolGraph) -> Option<(Vec<u64>, Vec<u64>)> {
    let mut ca: Vec<u64> = (0..a.atom_count()).map(|u| initial_color(a, u)).collect();
    let mut cb: Vec<u64> = (0..b.atom_count()).map(|u| initial_color(b, u)).collect();
    let mut classes = 0;
    loop {
        let mut sa = ca.clone();
        let mut sb = cb.clone();
        sa.sort_unstable();
        sb.sort_unstable();
        if sa != sb {
            return None;
        }
        let now = distinct(&ca);
        if now == classes {
            return Some((ca, cb));
        }
        classes = now;
        ca = refine_round(a, &ca);
        cb = refine_round(b, &cb);
    }
}

struct Matcher<'g> {
    a: &'g MolGraph,
    b: &'g MolGraph,
    ca: Vec<u64>,
    cb: Vec<u64>,
    order: Vec<usize>,
    map_ab: Vec<usize>,
    map_ba: Vec<usize>,
    nodes: usize,
    budget: usize,
}

const UNMAPPED: usize = usize::MAX;

impl Matcher<'_> {
    /// Matching order: each next atom maximizes its number of already-ordered
    /// neighbors, preferring rare colors, so constraints bite early.
    fn build_order(&mut self) {
        let n = self.a.atom_count();
        let mut freq = std::collections::HashMap::new();
        for &c in &self.ca {
            *freq.entry(c).or_insert(0usize) += 1;
        }
        let mut placed = vec![false; n];
        let mut links = vec![0usize; n];
        for _ in 0..n {
            let next = (0..n)
                .filter(|&u| !placed[u])
                .max_by(|&x, &y| {
                    links[x]
                        .cmp(&links[y])
                        .then(freq[&self.ca[y]].cmp(&freq[&self.ca[x]]))
                        .then(y.cmp(&x))
                })
                .unwrap();
            placed[next] = true;
            self.order.push(next);
            for &(v, _) in self.a.neighbors(next) {
                links[v] += 1;
            }
        }
    }

    fn feasible(&self, u: usize, v: usize) -> bool {
        if self.ca[u] != self.cb[v] || self.map_ba[v] != UNMAPPED {
            return false;
        }
        let mut mapped_u = 0;
        for &(un, order) in self.a.neighbors(u) {
            let vn = self.map_ab[un];
            if vn != UNMAPPED {
                mapped_u += 1;
                if self.b.bond_order(v, vn) != Some(order) {
                    return false;
                }
            }
        }
        let mapped_v = self
            .b
            .neighbors(v)
            .iter()
            .filter(|(vn, _)| self.map_ba[*vn] != UNMAPPED)
            .count();
        mapped_u == mapped_v
    }

    fn search(&mut self, depth: usize) -> IsoOutcome {
        if depth == self.order.len() {
            return IsoOutcome::Isomorphic;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            return IsoOutcome::Undecided;
        }
        let u = self.order[depth];
        for v in 0..self.b.atom_count() {
            if !self.feasible(u, v) {
                continue;
            }
            self.map_ab[u] = v;
            self.map_ba[v] = u;
            match self.search(depth + 1) {
                IsoOutcome::NotIsomorphic => {}
                done => return done,
            }
            self.map_ab[u] = UNMAPPED;
            self.map_ba[v] = UNMAPPED;
        }
        IsoOutcome::NotIsomorphic
    }
}

/// VF2-style backtracking with refined-color and degree pruning, bounded by
/// `budget` search nodes.
pub fn isomorphism(a: &MolGraph, b: &MolGraph, budget: usize) -> IsoOutcome {
    if a.atom_count() != b.atom_count() || a.bonds().len() != b.bonds().len() {
        return IsoOutcome::NotIsomorphic;
    }
    let Some((ca, cb)) = joint_colors(a, b) else {
        return IsoOutcome::NotIsomorphic;
    };
    let n = a.atom_count();
    let mut m = Matcher {
        a,
        b,
        ca,
        cb,
        order: Vec::with_capacity(n),
        map_ab: vec![UNMAPPED; n],
        map_ba: vec![UNMAPPED; n],
        nodes: 0,
        budget,
    };
    m.build_order();
    m.search(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;
    use crate::graph::{Atom, BondOrder};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixtures() -> Vec<MolGraph> {
        vec![
            chain(5),
            benzene(),
            cyclohexane(),
            isobutane(),
            decalin(),
            ethanol(),
            dimethyl_ether(),
            salt(),
            formaldehyde(),
            MolGraph::new(),
        ]
    }

    fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    }

    #[test]
    fn permuted_graph_is_isomorphic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in fixtures() {
            let p = g.permuted(&random_perm(g.atom_count(), &mut rng));
            assert!(is_isomorphic(&g, &p));
        }
    }

    #[test]
    fn distinguishes_fixture_pairs() {
        assert!(!is_isomorphic(&ethanol(), &dimethyl_ether()));
        assert!(!is_isomorphic(&benzene(), &cyclohexane()));
        assert!(!is_isomorphic(&chain(4), &isobutane()));
    }

    #[test]
    fn equivalence_relation_on_fixtures() {
        let fx = fixtures();
        for (i, a) in fx.iter().enumerate() {
            assert!(is_isomorphic(a, a));
            for b in &fx[i + 1..] {
                assert_eq!(is_isomorphic(a, b), is_isomorphic(b, a));
                assert!(!is_isomorphic(a, b));
            }
        }
    }

    #[test]
    fn regular_graphs_that_refinement_cannot_split() {
        // Two triangles vs one six-ring: every atom looks alike to color
        // refinement, only the backtracking search separates them.
        let two_triangles = MolGraph::from_parts(
            vec![atom("C", 2); 6],
            &[
                (0, 1, BondOrder::Single),
                (1, 2, BondOrder::Single),
                (2, 0, BondOrder::Single),
                (3, 4, BondOrder::Single),
                (4, 5, BondOrder::Single),
                (5, 3, BondOrder::Single),
            ],
        )
        .unwrap();
        assert!(!is_isomorphic(&two_triangles, &cyclohexane()));
        assert!(is_isomorphic(&two_triangles, &two_triangles.permuted(&[3, 0, 4, 1, 5, 2])));
    }

    #[test]
    fn key_examples() {
        let methane = MolGraph::from_parts(vec![atom("C", 4)], &[]).unwrap();
        let ethane = MolGraph::from_parts(vec![atom("C", 3); 2], &[(0, 1, BondOrder::Single)]).unwrap();
        assert_ne!(canonical_key(&methane), canonical_key(&ethane));
        assert_ne!(canonical_key(&ethanol()), canonical_key(&dimethyl_ether()));
        let charged = MolGraph::from_parts(vec![Atom::new(crate::Element::C, -1, 3)], &[]).unwrap();
        let neutral = MolGraph::from_parts(vec![atom("C", 3)], &[]).unwrap();
        assert_ne!(canonical_key(&charged), canonical_key(&neutral));
    }

    #[test]
    fn key_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for g in fixtures() {
            let key = canonical_key(&g);
            for _ in 0..100 {
                let p = g.permuted(&random_perm(g.atom_count(), &mut rng));
                assert_eq!(canonical_key(&p), key);
            }
        }
    }

    #[test]
    fn undecided_when_budget_exhausted() {
        let g = decalin();
        let p = g.permuted(&[9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(isomorphism(&g, &p, 0), IsoOutcome::Undecided);
        assert_eq!(isomorphism(&g, &p, 1000), IsoOutcome::Isomorphic);
    }
}
