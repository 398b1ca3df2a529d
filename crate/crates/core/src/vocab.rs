//! Token inventory induced from a corpus, with per-atom-token maximum valency.
//!
//! Token ids are dense and stable:
//!
//! | id              | token                         |
//! |-----------------|-------------------------------|
//! | 0, 1, 2         | `[BOS]`, `[EOS]`, `[PAD]`     |
//! | 3, 4, 5, 6      | `(`, `)`, `[bor]`, `.`        |
//! | 7, 8, 9         | `-`, `=`, `#`                 |
//! | 10 ..10+R       | `[eor-1]` .. `[eor-R]`        |
//! | 10+R ..         | atom tokens, sorted by label  |

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::element::Element;
use crate::graph::{Atom, BondOrder, MolGraph};

pub const DEFAULT_R_MAX: usize = 100;
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const BRANCH_OPEN: u32 = 3;
pub const BRANCH_CLOSE: u32 = 4;
pub const RING_OPEN: u32 = 5;
pub const DOT: u32 = 6;
pub const BOND_BASE: u32 = 7;
pub const RING_CLOSE_BASE: u32 = 10;

const SPECIAL_ORDER: [&str; 10] = ["[BOS]", "[EOS]", "[PAD]", "(", ")", "[bor]", ".", "-", "=", "#"];

pub const VOCAB_FORMAT: &str = "treegen-vocab";
pub const VOCAB_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomToken {
    pub element: Element,
    pub charge: i8,
    pub h_count: u8,
    pub max_valency: u8,
}

impl AtomToken {
    pub fn atom(&self) -> Atom {
        Atom::new(self.element, self.charge, self.h_count)
    }

    pub fn label(&self) -> String {
        self.atom().label()
    }
}

/// Decoded meaning of a token id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Bos,
    Eos,
    Pad,
    BranchOpen,
    BranchClose,
    RingOpen,
    Dot,
    Bond(BondOrder),
    /// Close a ring to the i-th open anchor, 1-based, oldest first.
    RingClose(usize),
    /// Index into [`Vocab::atom_tokens`].
    Atom(usize),
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("cannot induce a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("atom {atom} has bond-order sum {degree}, above the u8 valency range")]
    ValencyRange { atom: String, degree: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
    #[error("unsupported vocabulary version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    atom_tokens: Vec<AtomToken>,
    r_max: usize,
    atom_index: HashMap<Atom, usize>,
    text_index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    r_max: usize,
    special_order: Vec<String>,
    atom_tokens: Vec<AtomTokenEntry>,
}

#[derive(Serialize, Deserialize)]
struct AtomTokenEntry {
    id: u32,
    label: String,
    element: Element,
    charge: i8,
    h_count: u8,
    max_valency: u8,
}

impl Vocab {
    /// Builds a vocabulary from explicit atom tokens. Duplicated signatures
    /// keep the larger valency; tokens are sorted by label.
    pub fn from_atom_tokens(tokens: impl IntoIterator<Item = AtomToken>, r_max: usize) -> Vocab {
        let mut by_sig: BTreeMap<String, AtomToken> = BTreeMap::new();
        for t in tokens {
            by_sig
                .entry(t.label())
                .and_modify(|e| e.max_valency = e.max_valency.max(t.max_valency))
                .or_insert(t);
        }
        let atom_tokens: Vec<AtomToken> = by_sig.into_values().collect();
        let atom_index = atom_tokens.iter().enumerate().map(|(i, t)| (t.atom(), i)).collect();
        let mut v = Vocab {
            atom_tokens,
            r_max,
            atom_index,
            text_index: HashMap::new(),
        };
        v.text_index = (0..v.len() as u32).map(|id| (v.token_text(id), id)).collect();
        v
    }

    /// One atom token per distinct (element, charge, h_count) signature, with
    /// the largest bond-order sum observed for it as its valency.
    pub fn induce<'a>(corpus: impl IntoIterator<Item = &'a MolGraph>, r_max: usize) -> Result<Vocab, VocabError> {
        let mut max_degree: HashMap<Atom, u32> = HashMap::new();
        for g in corpus {
            for (i, atom) in g.atoms().iter().enumerate() {
                let d = g.weighted_degree(i).expect("index within graph");
                let e = max_degree.entry(*atom).or_insert(0);
                *e = (*e).max(d);
            }
        }
        if max_degree.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut tokens = Vec::with_capacity(max_degree.len());
        for (atom, degree) in max_degree {
            let max_valency = u8::try_from(degree).map_err(|_| VocabError::ValencyRange {
                atom: atom.label(),
                degree,
            })?;
            tokens.push(AtomToken {
                element: atom.element,
                charge: atom.charge,
                h_count: atom.h_count,
                max_valency,
            });
        }
        Ok(Vocab::from_atom_tokens(tokens, r_max))
    }

    pub fn len(&self) -> usize {
        RING_CLOSE_BASE as usize + self.r_max + self.atom_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn atom_tokens(&self) -> &[AtomToken] {
        &self.atom_tokens
    }

    pub fn atom_base(&self) -> u32 {
        RING_CLOSE_BASE + self.r_max as u32
    }

    pub fn atom_id(&self, atom: &Atom) -> Option<u32> {
        self.atom_index.get(atom).map(|&i| self.atom_base() + i as u32)
    }

    pub fn bond_id(order: BondOrder) -> u32 {
        BOND_BASE + order.value() as u32 - 1
    }

    /// Token id of `[eor-i]` (1-based).
    pub fn ring_close_id(&self, i: usize) -> Option<u32> {
        (1..=self.r_max).contains(&i).then(|| RING_CLOSE_BASE + i as u32 - 1)
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        Some(match id {
            BOS => Token::Bos,
            EOS => Token::Eos,
            PAD => Token::Pad,
            BRANCH_OPEN => Token::BranchOpen,
            BRANCH_CLOSE => Token::BranchClose,
            RING_OPEN => Token::RingOpen,
            DOT => Token::Dot,
            7..=9 => Token::Bond(BondOrder::from_value((id - BOND_BASE + 1) as u8)?),
            _ if id < self.atom_base() => Token::RingClose((id - RING_CLOSE_BASE + 1) as usize),
            _ if (id as usize) < self.len() => Token::Atom((id - self.atom_base()) as usize),
            _ => return None,
        })
    }

    pub fn token_text(&self, id: u32) -> String {
        match self.token(id) {
            Some(Token::RingClose(i)) => format!("[eor-{i}]"),
            Some(Token::Atom(a)) => self.atom_tokens[a].label(),
            Some(_) => SPECIAL_ORDER[id as usize].to_string(),
            None => format!("<{id}?>"),
        }
    }

    pub fn id_of_text(&self, text: &str) -> Option<u32> {
        self.text_index.get(text).copied()
    }

    /// Maximum valency of an atom token id, or `None` for non-atom ids.
    pub fn max_valency(&self, id: u32) -> Option<u8> {
        match self.token(id)? {
            Token::Atom(a) => Some(self.atom_tokens[a].max_valency),
            _ => None,
        }
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            format: VOCAB_FORMAT.to_string(),
            version: VOCAB_VERSION,
            r_max: self.r_max,
            special_order: SPECIAL_ORDER.iter().map(|s| s.to_string()).collect(),
            atom_tokens: self
                .atom_tokens
                .iter()
                .enumerate()
                .map(|(i, t)| AtomTokenEntry {
                    id: self.atom_base() + i as u32,
                    label: t.label(),
                    element: t.element,
                    charge: t.charge,
                    h_count: t.h_count,
                    max_valency: t.max_valency,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Vocab, VocabError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| VocabError::Malformed(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == VOCAB_VERSION as u64 => {}
            Some(v) => {
                return Err(VocabError::Version {
                    found: v as u32,
                    expected: VOCAB_VERSION,
                })
            }
            None => return Err(VocabError::Malformed("missing version".into())),
        }
        let file: VocabFile = serde_json::from_value(value).map_err(|e| VocabError::Malformed(e.to_string()))?;
        if file.format != VOCAB_FORMAT {
            return Err(VocabError::Malformed(format!("unexpected format tag `{}`", file.format)));
        }
        if file.special_order != SPECIAL_ORDER {
            return Err(VocabError::Malformed("special token order differs".into()));
        }
        let v = Vocab::from_atom_tokens(
            file.atom_tokens.iter().map(|e| AtomToken {
                element: e.element,
                charge: e.charge,
                h_count: e.h_count,
                max_valency: e.max_valency,
            }),
            file.r_max,
        );
        if v.atom_tokens.len() != file.atom_tokens.len() {
            return Err(VocabError::Malformed("duplicate atom token".into()));
        }
        for e in &file.atom_tokens {
            if v.id_of_text(&e.label) != Some(e.id) {
                return Err(VocabError::Malformed(format!("token `{}` has non-canonical id {}", e.label, e.id)));
            }
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, VocabError> {
        Vocab::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the compact serialized form, used to bind checkpoints to a vocabulary.
    pub fn digest(&self) -> String {
        let compact = serde_json::to_vec(&self.to_file()).expect("vocab serializes");
        Sha256::digest(&compact).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.atom_tokens.iter().map(|t| format!("{}:{}", t.label(), t.max_valency)).collect();
        write!(f, "{} atom tokens (r_max {}): {}", self.atom_tokens.len(), self.r_max, labels.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;
    use crate::smiles::parse_smiles;

    #[test]
    fn induce_examples() {
        let methane = parse_smiles("C").unwrap();
        let v = Vocab::induce([&methane], DEFAULT_R_MAX).unwrap();
        assert_eq!(v.atom_tokens().len(), 1);
        assert_eq!((v.atom_tokens()[0].label(), v.atom_tokens()[0].max_valency), ("CH4".into(), 0));

        let ethane = parse_smiles("CC").unwrap();
        let v = Vocab::induce([&ethane], DEFAULT_R_MAX).unwrap();
        assert_eq!((v.atom_tokens()[0].label(), v.atom_tokens()[0].max_valency), ("CH3".into(), 1));

        assert!(matches!(Vocab::induce([], 100), Err(VocabError::EmptyCorpus)));
        assert!(matches!(Vocab::induce([&MolGraph::new()], 100), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn qm9_style_corpus_has_twenty_one_tokens() {
        // One molecule per QM9 atom signature listed for that dataset.
        let corpus = [
            "CC", "CC(C)(C)C", "CO", "CCC", "CC(C)C", "C=O", "CNC", "CN(C)C", "C[N-]C", "C[NH+](C)C", "CN", "CF",
            "C[NH3+]", "C[O-]", "C[NH2+]C", "C[N+](C)(C)C", "C[C-](C)C", "C[CH-]C", "N", "O", "C",
        ];
        let graphs: Vec<MolGraph> = corpus.iter().map(|s| parse_smiles(s).unwrap()).collect();
        let v = Vocab::induce(&graphs, DEFAULT_R_MAX).unwrap();
        let mut labels: Vec<String> = v.atom_tokens().iter().map(|t| t.label()).collect();
        labels.sort();
        let mut expected = vec![
            "CH3", "C", "O", "CH2", "CH", "NH", "N", "N-", "NH+", "OH", "NH2", "F", "NH3+", "O-", "NH2+", "N+",
            "C-", "CH-", "NH3", "OH2", "CH4",
        ];
        expected.sort();
        assert_eq!(labels, expected);
        assert_eq!(v.atom_tokens().len(), 21);
    }

    #[test]
    fn ids_are_dense_and_fixed() {
        let v = Vocab::induce([&benzene(), &salt()], 100).unwrap();
        assert_eq!(v.len(), 10 + 100 + 3);
        assert_eq!(v.token(BOS), Some(Token::Bos));
        assert_eq!(v.token(EOS), Some(Token::Eos));
        assert_eq!(v.token(PAD), Some(Token::Pad));
        assert_eq!(v.token(10), Some(Token::RingClose(1)));
        assert_eq!(v.token(109), Some(Token::RingClose(100)));
        assert_eq!(v.token(110), Some(Token::Atom(0)));
        assert_eq!(v.token(113), None);
        for id in 0..v.len() as u32 {
            assert_eq!(v.id_of_text(&v.token_text(id)), Some(id));
        }
        let labels: Vec<String> = v.atom_tokens().iter().map(|t| t.label()).collect();
        assert_eq!(labels, vec!["CH", "Cl-", "Na+"]);
    }

    #[test]
    fn corpus_atoms_respect_valency() {
        let corpus: Vec<MolGraph> = ["CC(=O)O", "C1CCCCC1", "C#N", "[Na+].[Cl-]"].iter().map(|s| parse_smiles(s).unwrap()).collect();
        let v = Vocab::induce(&corpus, 100).unwrap();
        for g in &corpus {
            for (i, a) in g.atoms().iter().enumerate() {
                let id = v.atom_id(a).expect("every corpus atom has a token");
                assert!(g.weighted_degree(i).unwrap() <= v.max_valency(id).unwrap() as u32);
            }
        }
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocab::induce([&benzene(), &salt(), &ethanol()], 100).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert_eq!(Vocab::load(&path).unwrap().digest(), v.digest());

        let text = v.to_json();
        assert!(matches!(Vocab::from_json(&text[..text.len() / 2]), Err(VocabError::Malformed(_))));
        let bumped = text.replace("\"version\": 1", "\"version\": 99");
        assert!(matches!(Vocab::from_json(&bumped), Err(VocabError::Version { found: 99, .. })));
        assert!(matches!(Vocab::load(&dir.path().join("missing.json")), Err(VocabError::Io(_))));
    }
}
