//! Molecular graphs, spanning-tree tokenization and grammar masks for
//! autoregressive molecule generation.

pub mod canon;
pub mod codec;
pub mod element;
pub mod fingerprint;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod smiles;
pub mod vocab;

pub use canon::{canonical_key, is_isomorphic};
pub use codec::{decode, encode, Order, TokenSeq};
pub use element::Element;
pub use graph::{Atom, Bond, BondOrder, MolGraph, SurrogateProperty};
pub use mask::{DecoderState, Mask, MaskEngine, MaskError, Rule};
pub use smiles::{parse_smiles, write_smiles};
pub use vocab::{AtomToken, Token, Vocab};
