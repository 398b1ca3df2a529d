//! Spanning-tree tokenization of molecular graphs and its inverse.
//!
//! Each component is walked depth-first. Tree edges become bond tokens (side
//! subtrees wrapped in `(` `)`), and every non-tree edge becomes a `[bor]` at
//! its earlier-visited endpoint plus `bond [eor-i]` at the later one, where
//! `i` indexes the currently open anchors oldest first. At every atom the
//! attachments come out as: ring closures, `[bor]` marks, side branches, then
//! the main-path child.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{BondOrder, MolGraph};
use crate::vocab::{self, Token, Vocab};

/// Token ids, starting with BOS and ending with EOS when complete.
pub type TokenSeq = Vec<u32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    /// Root at the lowest atom index, neighbors in index order.
    Canonical,
    /// Random roots, neighbor order and component order from a seeded stream.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("atom {index} ({label}) has no token in the vocabulary")]
    UnknownAtom { index: usize, label: String },
    #[error("{open} simultaneously open rings exceed the capacity of {r_max}")]
    RingCapacity { open: usize, r_max: usize },
    #[error("cannot encode an empty graph")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeErrorKind {
    MissingBos,
    MissingEos,
    UnknownId,
    UnexpectedToken,
    RingIndex,
    InvalidRingBond,
    Unclosed,
    TrailingTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("token {position}: {message}")]
pub struct DecodeError {
    pub position: usize,
    pub kind: DecodeErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown token `{token}` at position {position}")]
pub struct UnknownTokenText {
    pub position: usize,
    pub token: String,
}

struct Tree {
    /// Visit order of the component's atoms.
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
    /// Back-edge partners that open at this atom (partner visited later).
    ring_opens: Vec<Vec<usize>>,
    /// Back-edge partners that close at this atom (partner visited earlier).
    ring_closes: Vec<Vec<usize>>,
}

fn build_tree(root: usize, neighbor_order: &[Vec<usize>], visit: &mut [usize], tree: &mut Tree) {
    let mut stack: Vec<(usize, usize, usize)> = vec![(root, usize::MAX, 0)];
    visit[root] = tree.order.len();
    tree.order.push(root);
    while let Some(top) = stack.last_mut() {
        let (u, parent, next) = *top;
        if next == neighbor_order[u].len() {
            stack.pop();
            continue;
        }
        top.2 += 1;
        let w = neighbor_order[u][next];
        if w == parent {
            continue;
        }
        if visit[w] == usize::MAX {
            visit[w] = tree.order.len();
            tree.order.push(w);
            tree.children[u].push(w);
            stack.push((w, u, 0));
        } else if visit[w] < visit[u] {
            tree.ring_opens[w].push(u);
            tree.ring_closes[u].push(w);
        }
    }
}

/// Encodes `g` as BOS, components joined by `.`, EOS.
pub fn encode(g: &MolGraph, v: &Vocab, order: Order) -> Result<TokenSeq, EncodeError> {
    if g.is_empty() {
        return Err(EncodeError::Empty);
    }
    let mut atom_ids = Vec::with_capacity(g.atom_count());
    for (index, atom) in g.atoms().iter().enumerate() {
        atom_ids.push(v.atom_id(atom).ok_or_else(|| EncodeError::UnknownAtom {
            index,
            label: atom.label(),
        })?);
    }

    let mut rng = match order {
        Order::Canonical => None,
        Order::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut neighbor_order: Vec<Vec<usize>> =
        (0..g.atom_count()).map(|i| g.neighbors(i).iter().map(|&(w, _)| w).collect()).collect();
    let components = g.components();
    let mut roots: Vec<usize> = components.iter().map(|c| c[0]).collect();
    match rng.as_mut() {
        None => {
            for n in &mut neighbor_order {
                n.sort_unstable();
            }
        }
        Some(rng) => {
            for n in &mut neighbor_order {
                n.shuffle(rng);
            }
            for (c, root) in components.iter().zip(roots.iter_mut()) {
                *root = c[rng.gen_range(0..c.len())];
            }
            let mut idx: Vec<usize> = (0..components.len()).collect();
            idx.shuffle(rng);
            roots = idx.iter().map(|&i| roots[i]).collect();
        }
    }

    let n = g.atom_count();
    let mut tree = Tree {
        order: Vec::with_capacity(n),
        children: vec![Vec::new(); n],
        ring_opens: vec![Vec::new(); n],
        ring_closes: vec![Vec::new(); n],
    };
    let mut visit = vec![usize::MAX; n];
    let mut out = vec![vocab::BOS];
    // Open anchors as (anchor atom, partner that will close it).
    let mut open: Vec<(usize, usize)> = Vec::new();

    enum Step {
        Atom(usize),
        Tok(u32),
    }

    for (ci, &root) in roots.iter().enumerate() {
        if ci > 0 {
            out.push(vocab::DOT);
        }
        build_tree(root, &neighbor_order, &mut visit, &mut tree);
        let mut stack = vec![Step::Atom(root)];
        while let Some(step) = stack.pop() {
            let u = match step {
                Step::Tok(t) => {
                    out.push(t);
                    continue;
                }
                Step::Atom(u) => u,
            };
            out.push(atom_ids[u]);
            let mut closes = tree.ring_closes[u].clone();
            closes.sort_by_key(|&a| visit[a]);
            for a in closes {
                let i = open.iter().position(|&(x, y)| x == a && y == u).expect("anchor opened before its closure");
                open.remove(i);
                out.push(Vocab::bond_id(g.bond_order(u, a).expect("ring bond")));
                out.push(v.ring_close_id(i + 1).expect("index within capacity"));
            }
            let mut opens = tree.ring_opens[u].clone();
            opens.sort_by_key(|&w| visit[w]);
            for w in opens {
                open.push((u, w));
                if open.len() > v.r_max() {
                    return Err(EncodeError::RingCapacity {
                        open: open.len(),
                        r_max: v.r_max(),
                    });
                }
                out.push(vocab::RING_OPEN);
            }
            let children = &tree.children[u];
            if let Some((&last, side)) = children.split_last() {
                stack.push(Step::Atom(last));
                stack.push(Step::Tok(Vocab::bond_id(g.bond_order(u, last).expect("tree bond"))));
                for &c in side.iter().rev() {
                    stack.push(Step::Tok(vocab::BRANCH_CLOSE));
                    stack.push(Step::Atom(c));
                    stack.push(Step::Tok(Vocab::bond_id(g.bond_order(u, c).expect("tree bond"))));
                    stack.push(Step::Tok(vocab::BRANCH_OPEN));
                }
            }
        }
        debug_assert!(open.is_empty());
    }
    out.push(vocab::EOS);
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Expect {
    Atom,
    AfterAtom,
    AfterBond(BondOrder),
    AfterOpen,
}

fn decode_err(position: usize, kind: DecodeErrorKind, message: impl Into<String>) -> DecodeError {
    DecodeError {
        position,
        kind,
        message: message.into(),
    }
}

/// Rebuilds the graph from a complete sequence. This is a plain structural
/// parser; it does not consult valencies.
pub fn decode(t: &[u32], v: &Vocab) -> Result<MolGraph, DecodeError> {
    if t.first() != Some(&vocab::BOS) {
        return Err(decode_err(0, DecodeErrorKind::MissingBos, "sequence must start with [BOS]"));
    }
    let mut g = MolGraph::new();
    let mut expect = Expect::Atom;
    let mut current = usize::MAX;
    let mut branches: Vec<usize> = Vec::new();
    let mut anchors: Vec<usize> = Vec::new();

    for (pos, &id) in t.iter().enumerate().skip(1) {
        let tok = v
            .token(id)
            .ok_or_else(|| decode_err(pos, DecodeErrorKind::UnknownId, format!("id {id} is outside the vocabulary")))?;
        let unexpected = || {
            decode_err(
                pos,
                DecodeErrorKind::UnexpectedToken,
                format!("`{}` is not allowed here", v.token_text(id)),
            )
        };
        match (expect, tok) {
            (Expect::Atom, Token::Atom(a)) => {
                current = g.add_atom(v.atom_tokens()[a].atom());
                expect = Expect::AfterAtom;
            }
            (Expect::AfterBond(order), Token::Atom(a)) => {
                let next = g.add_atom(v.atom_tokens()[a].atom());
                g.add_bond(current, next, order).expect("fresh atom");
                current = next;
                expect = Expect::AfterAtom;
            }
            (Expect::AfterBond(order), Token::RingClose(i)) => {
                if i > anchors.len() {
                    return Err(decode_err(
                        pos,
                        DecodeErrorKind::RingIndex,
                        format!("[eor-{i}] with {} open ring(s)", anchors.len()),
                    ));
                }
                let anchor = anchors.remove(i - 1);
                g.add_bond(current, anchor, order)
                    .map_err(|e| decode_err(pos, DecodeErrorKind::InvalidRingBond, e.to_string()))?;
                expect = Expect::AfterAtom;
            }
            (Expect::AfterAtom | Expect::AfterOpen, Token::Bond(order)) => expect = Expect::AfterBond(order),
            (Expect::AfterAtom, Token::BranchOpen) => {
                branches.push(current);
                expect = Expect::AfterOpen;
            }
            (Expect::AfterAtom, Token::BranchClose) => match branches.pop() {
                Some(a) => current = a,
                None => return Err(unexpected()),
            },
            (Expect::AfterAtom, Token::RingOpen) => anchors.push(current),
            (Expect::AfterAtom, Token::Dot | Token::Eos) => {
                if !branches.is_empty() || !anchors.is_empty() {
                    return Err(decode_err(
                        pos,
                        DecodeErrorKind::Unclosed,
                        format!("{} open branch(es) and {} open ring(s)", branches.len(), anchors.len()),
                    ));
                }
                if tok == Token::Eos {
                    if pos + 1 != t.len() {
                        return Err(decode_err(pos + 1, DecodeErrorKind::TrailingTokens, "tokens after [EOS]"));
                    }
                    return Ok(g);
                }
                expect = Expect::Atom;
            }
            _ => return Err(unexpected()),
        }
    }
    Err(decode_err(t.len(), DecodeErrorKind::MissingEos, "sequence ended without [EOS]"))
}

/// Whitespace-separated token text.
pub fn to_text(t: &[u32], v: &Vocab) -> String {
    t.iter().map(|&id| v.token_text(id)).collect::<Vec<_>>().join(" ")
}

pub fn from_text(text: &str, v: &Vocab) -> Result<TokenSeq, UnknownTokenText> {
    text.split_whitespace()
        .enumerate()
        .map(|(position, tok)| {
            v.id_of_text(tok).ok_or_else(|| UnknownTokenText {
                position,
                token: tok.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::is_isomorphic;
    use crate::graph::fixtures::*;
    use crate::smiles::parse_smiles;
    use proptest::prelude::*;

    fn vocab_for(graphs: &[&MolGraph]) -> Vocab {
        Vocab::induce(graphs.iter().copied(), 100).unwrap()
    }

    fn text(g: &MolGraph, order: Order) -> String {
        let v = vocab_for(&[g]);
        to_text(&encode(g, &v, order).unwrap(), &v)
    }

    #[test]
    fn single_atom_and_salt() {
        let methane = parse_smiles("C").unwrap();
        assert_eq!(text(&methane, Order::Canonical), "[BOS] CH4 [EOS]");
        assert_eq!(text(&salt(), Order::Canonical), "[BOS] Na+ . Cl- [EOS]");
    }

    #[test]
    fn cyclohexane_canonical_trace() {
        assert_eq!(
            text(&cyclohexane(), Order::Canonical),
            "[BOS] CH2 [bor] - CH2 - CH2 - CH2 - CH2 - CH2 - [eor-1] [EOS]"
        );
    }

    #[test]
    fn branches_and_fused_rings() {
        assert_eq!(text(&isobutane(), Order::Canonical), "[BOS] CH ( - CH3 ) ( - CH3 ) - CH3 [EOS]");
        let acetic = parse_smiles("CC(=O)O").unwrap();
        assert_eq!(text(&acetic, Order::Canonical), "[BOS] CH3 - C ( = O ) - OH [EOS]");
        // Two anchors open at once; the oldest closes as [eor-1].
        let bicyclo = parse_smiles("C1CC2CCC1C2").unwrap();
        let t = text(&bicyclo, Order::Canonical);
        assert!(t.contains("[eor-1]"), "{t}");
        let v = vocab_for(&[&bicyclo]);
        assert!(is_isomorphic(&decode(&encode(&bicyclo, &v, Order::Canonical).unwrap(), &v).unwrap(), &bicyclo));
    }

    #[test]
    fn decode_errors_name_positions() {
        let v = vocab_for(&[&cyclohexane()]);
        let ch2 = v.id_of_text("CH2").unwrap();
        let single = Vocab::bond_id(BondOrder::Single);
        let eor2 = v.ring_close_id(2).unwrap();
        let seq = [vocab::BOS, ch2, vocab::RING_OPEN, single, ch2, single, ch2, single, eor2, vocab::EOS];
        let err = decode(&seq, &v).unwrap_err();
        assert_eq!((err.position, err.kind), (8, DecodeErrorKind::RingIndex));

        let err = decode(&[ch2, vocab::EOS], &v).unwrap_err();
        assert_eq!(err.kind, DecodeErrorKind::MissingBos);
        let err = decode(&[vocab::BOS, ch2], &v).unwrap_err();
        assert_eq!((err.position, err.kind), (2, DecodeErrorKind::MissingEos));
        let err = decode(&[vocab::BOS, ch2, ch2, vocab::EOS], &v).unwrap_err();
        assert_eq!((err.position, err.kind), (2, DecodeErrorKind::UnexpectedToken));
        let err = decode(&[vocab::BOS, ch2, vocab::RING_OPEN, vocab::EOS], &v).unwrap_err();
        assert_eq!((err.position, err.kind), (3, DecodeErrorKind::Unclosed));
        // Closing a ring onto the atom that opened it.
        let err = decode(&[vocab::BOS, ch2, vocab::RING_OPEN, single, v.ring_close_id(1).unwrap(), vocab::EOS], &v).unwrap_err();
        assert_eq!((err.position, err.kind), (4, DecodeErrorKind::InvalidRingBond));
    }

    #[test]
    fn text_round_trip() {
        let v = vocab_for(&[&decalin()]);
        let seq = encode(&decalin(), &v, Order::Random(3)).unwrap();
        assert_eq!(from_text(&to_text(&seq, &v), &v).unwrap(), seq);
        let err = from_text("[BOS] Xx [EOS]", &v).unwrap_err();
        assert_eq!(err.position, 1);
    }

    #[test]
    fn encode_errors() {
        let v = vocab_for(&[&cyclohexane()]);
        assert!(matches!(encode(&salt(), &v, Order::Canonical), Err(EncodeError::UnknownAtom { index: 0, .. })));
        assert_eq!(encode(&MolGraph::new(), &v, Order::Canonical), Err(EncodeError::Empty));
        let tight = Vocab::from_atom_tokens(v.atom_tokens().iter().copied(), 0);
        assert!(matches!(encode(&cyclohexane(), &tight, Order::Canonical), Err(EncodeError::RingCapacity { .. })));
    }

    #[test]
    fn same_seed_is_deterministic() {
        let g = decalin();
        let v = vocab_for(&[&g]);
        assert_eq!(encode(&g, &v, Order::Random(9)).unwrap(), encode(&g, &v, Order::Random(9)).unwrap());
        let distinct: std::collections::HashSet<TokenSeq> =
            (0..40).map(|s| encode(&g, &v, Order::Random(s)).unwrap()).collect();
        assert!(distinct.len() > 1);
    }

    fn arb_smiles() -> impl Strategy<Value = String> {
        prop::sample::select(vec![
            "CCO", "C1CCCCC1", "C1=CC=CC=C1", "CC(C)(C)C#N", "C1CC2CCC1C2", "C12C3C4C1C5C2C3C45", "[Na+].[Cl-]",
            "OC(=O)C1=CC=CC=C1C(=O)O", "C1CCC2(CC1)CCCC2", "N#CC(C#N)=C(C#N)C#N", "C[N+](C)(C)CC[O-]",
            "C1CC1C1CC1.C1CCC1", "FC(F)(F)C(Cl)(Br)I", "C1=CC2=CC=CC3=C2C1=CC=C3",
        ])
        .prop_map(str::to_string)
    }

    proptest! {
        #[test]
        fn round_trip_any_order(smiles in arb_smiles(), seed in any::<u64>(), canonical in any::<bool>()) {
            let g = parse_smiles(&smiles).unwrap();
            let v = vocab_for(&[&g]);
            let order = if canonical { Order::Canonical } else { Order::Random(seed) };
            let seq = encode(&g, &v, order).unwrap();
            let back = decode(&seq, &v).unwrap();
            prop_assert!(is_isomorphic(&back, &g));
            let bound = 2 * g.atom_count() + 2 * g.bonds().len() + g.connected_components() + 2;
            prop_assert!(seq.len() <= bound);
        }
    }
}
