//! Kekulized SMILES subset: parsing into [`MolGraph`] and bracket-atom writing.
//!
//! Supported: organic-subset and bracket atoms (charge, explicit H count),
//! bonds `-`, `=`, `#`, branches, ring-bond digits and `%nn`, and `.`
//! separated components. Aromatic atoms, stereo marks, isotopes, wildcards
//! and atom classes are rejected as unsupported.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;

use crate::element::Element;
use crate::graph::{Atom, BondOrder, MolGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmilesErrorKind {
    UnsupportedFeature,
    Syntax,
    RingMismatch,
    ValenceOverflow,
}

impl fmt::Display for SmilesErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SmilesErrorKind::UnsupportedFeature => "unsupported feature",
            SmilesErrorKind::Syntax => "syntax error",
            SmilesErrorKind::RingMismatch => "ring mismatch",
            SmilesErrorKind::ValenceOverflow => "valence overflow",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at offset {position}: {message}")]
pub struct SmilesError {
    pub position: usize,
    pub kind: SmilesErrorKind,
    pub message: String,
}

/// Allowed valences of the organic subset, lowest first.
fn organic_valences(e: Element) -> Option<&'static [u32]> {
    Some(match e.symbol() {
        "B" => &[3],
        "C" => &[4],
        "N" => &[3, 5],
        "O" => &[2],
        "P" => &[3, 5],
        "S" => &[2, 4, 6],
        "F" | "Cl" | "Br" | "I" => &[1],
        _ => return None,
    })
}

struct RingOpen {
    atom: usize,
    order: Option<BondOrder>,
    position: usize,
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
    graph: MolGraph,
    /// Organic-subset atoms awaiting implicit hydrogens, with their offsets.
    implicit: Vec<(usize, usize)>,
    prev: Option<usize>,
    pending: Option<(BondOrder, usize)>,
    branches: Vec<usize>,
    rings: HashMap<u32, RingOpen>,
}

impl<'a> Parser<'a> {
    fn err(&self, position: usize, kind: SmilesErrorKind, message: impl Into<String>) -> SmilesError {
        SmilesError {
            position: position.min(self.text.len().saturating_sub(1)),
            kind,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.text.get(self.pos).copied()
    }

    fn place_atom(&mut self, atom: Atom, start: usize) -> Result<usize, SmilesError> {
        let idx = self.graph.add_atom(atom);
        if let Some(prev) = self.prev {
            let order = self.pending.take().map_or(BondOrder::Single, |(o, _)| o);
            self.graph
                .add_bond(prev, idx, order)
                .map_err(|e| self.err(start, SmilesErrorKind::Syntax, e.to_string()))?;
        } else if let Some((_, p)) = self.pending {
            return Err(self.err(p, SmilesErrorKind::Syntax, "bond without a preceding atom"));
        }
        self.prev = Some(idx);
        Ok(idx)
    }

    fn organic_atom(&mut self) -> Result<(), SmilesError> {
        let start = self.pos;
        let c = self.text[self.pos];
        let next = self.text.get(self.pos + 1).copied();
        let (symbol, len) = match (c, next) {
            (b'C', Some(b'l')) => ("Cl", 2),
            (b'B', Some(b'r')) => ("Br", 2),
            (b'B' | b'C' | b'N' | b'O' | b'P' | b'S' | b'F' | b'I', _) => {
                (std::str::from_utf8(&self.text[start..start + 1]).unwrap(), 1)
            }
            _ => {
                return Err(self.err(
                    start,
                    SmilesErrorKind::Syntax,
                    "atoms outside the organic subset must be bracketed",
                ))
            }
        };
        let element = Element::from_symbol(symbol).expect("organic subset symbols are elements");
        self.pos += len;
        let idx = self.place_atom(Atom::new(element, 0, 0), start)?;
        self.implicit.push((idx, start));
        Ok(())
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() && self.pos - start < 3 {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.text[start..self.pos]).ok()?.parse().ok()
    }

    fn bracket_atom(&mut self) -> Result<(), SmilesError> {
        let start = self.pos;
        self.pos += 1;
        let unsupported = |p: &Self, at: usize, what: &str| Err(p.err(at, SmilesErrorKind::UnsupportedFeature, what));
        match self.peek() {
            Some(c) if c.is_ascii_digit() => return unsupported(self, self.pos, "isotopes are not supported"),
            Some(b'*') => return unsupported(self, self.pos, "wildcard atoms are not supported"),
            Some(c) if c.is_ascii_lowercase() => {
                return unsupported(self, self.pos, "aromatic atoms are not supported; kekulize the input")
            }
            Some(c) if c.is_ascii_uppercase() => {}
            _ => return Err(self.err(self.pos, SmilesErrorKind::Syntax, "expected element symbol")),
        }
        let sym_start = self.pos;
        let two = self
            .text
            .get(sym_start..sym_start + 2)
            .and_then(|s| std::str::from_utf8(s).ok())
            .filter(|s| s.as_bytes()[1].is_ascii_lowercase())
            .and_then(Element::from_symbol);
        let element = match two {
            Some(e) => {
                self.pos += 2;
                e
            }
            None => {
                let one = std::str::from_utf8(&self.text[sym_start..sym_start + 1]).unwrap();
                self.pos += 1;
                Element::from_symbol(one)
                    .ok_or_else(|| self.err(sym_start, SmilesErrorKind::Syntax, "unknown element symbol"))?
            }
        };
        if self.peek() == Some(b'@') {
            return unsupported(self, self.pos, "chirality marks are not supported");
        }
        let mut h_count = 0u8;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            h_count = 1;
            if let Some(c) = self.peek().filter(u8::is_ascii_digit) {
                h_count = c - b'0';
                self.pos += 1;
            }
        }
        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            charge = unit;
            if let Some(n) = self.read_number() {
                charge = unit * n as i32;
            } else {
                while self.peek() == Some(sign) {
                    charge += unit;
                    self.pos += 1;
                }
            }
            if charge.abs() > 15 {
                return Err(self.err(start, SmilesErrorKind::Syntax, "charge out of range"));
            }
        }
        match self.peek() {
            Some(b':') => return unsupported(self, self.pos, "atom classes are not supported"),
            Some(b']') => self.pos += 1,
            _ => return Err(self.err(self.pos, SmilesErrorKind::Syntax, "expected `]`")),
        }
        self.place_atom(Atom::new(element, charge as i8, h_count), start)?;
        Ok(())
    }

    fn ring_bond(&mut self) -> Result<(), SmilesError> {
        let start = self.pos;
        let number = if self.text[self.pos] == b'%' {
            self.pos += 1;
            let digits = self.text.get(self.pos..self.pos + 2).filter(|d| d.iter().all(u8::is_ascii_digit));
            let Some(d) = digits else {
                return Err(self.err(start, SmilesErrorKind::Syntax, "`%` must be followed by two digits"));
            };
            self.pos += 2;
            ((d[0] - b'0') * 10 + (d[1] - b'0')) as u32
        } else {
            self.pos += 1;
            (self.text[start] - b'0') as u32
        };
        let Some(atom) = self.prev else {
            return Err(self.err(start, SmilesErrorKind::Syntax, "ring bond without a preceding atom"));
        };
        let order = self.pending.take().map(|(o, _)| o);
        match self.rings.remove(&number) {
            Some(open) => {
                let order = match (open.order, order) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(self.err(start, SmilesErrorKind::Syntax, "conflicting ring bond orders"))
                    }
                    (a, b) => a.or(b).unwrap_or(BondOrder::Single),
                };
                if open.atom == atom {
                    return Err(self.err(start, SmilesErrorKind::Syntax, "ring bond closes on its own atom"));
                }
                self.graph
                    .add_bond(open.atom, atom, order)
                    .map_err(|e| self.err(start, SmilesErrorKind::Syntax, e.to_string()))?;
            }
            None => {
                self.rings.insert(
                    number,
                    RingOpen {
                        atom,
                        order,
                        position: start,
                    },
                );
            }
        }
        Ok(())
    }

    fn run(mut self) -> Result<MolGraph, SmilesError> {
        if self.text.is_empty() {
            return Err(self.err(0, SmilesErrorKind::Syntax, "empty input"));
        }
        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'A'..=b'Z' => self.organic_atom()?,
                b'[' => self.bracket_atom()?,
                b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                    return Err(self.err(at, SmilesErrorKind::UnsupportedFeature, "aromatic atoms are not supported; kekulize the input"))
                }
                b'*' => return Err(self.err(at, SmilesErrorKind::UnsupportedFeature, "wildcard atoms are not supported")),
                b'/' | b'\\' => return Err(self.err(at, SmilesErrorKind::UnsupportedFeature, "bond stereo marks are not supported")),
                b'$' | b':' => return Err(self.err(at, SmilesErrorKind::UnsupportedFeature, "quadruple and aromatic bonds are not supported")),
                b'-' | b'=' | b'#' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return Err(self.err(at, SmilesErrorKind::Syntax, "misplaced bond symbol"));
                    }
                    let order = match c {
                        b'-' => BondOrder::Single,
                        b'=' => BondOrder::Double,
                        _ => BondOrder::Triple,
                    };
                    self.pending = Some((order, at));
                    self.pos += 1;
                }
                b'(' => {
                    match (self.prev, self.pending) {
                        (Some(p), None) => self.branches.push(p),
                        _ => return Err(self.err(at, SmilesErrorKind::Syntax, "branch must follow an atom")),
                    }
                    self.pos += 1;
                }
                b')' => {
                    if self.pending.is_some() {
                        return Err(self.err(at, SmilesErrorKind::Syntax, "bond before `)`"));
                    }
                    let Some(p) = self.branches.pop() else {
                        return Err(self.err(at, SmilesErrorKind::Syntax, "unbalanced `)`"));
                    };
                    self.prev = Some(p);
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => self.ring_bond()?,
                b'.' => {
                    if self.prev.is_none() || self.pending.is_some() || !self.branches.is_empty() {
                        return Err(self.err(at, SmilesErrorKind::Syntax, "misplaced `.`"));
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                _ => return Err(self.err(at, SmilesErrorKind::Syntax, "unexpected character")),
            }
        }
        if let Some((_, p)) = self.pending {
            return Err(self.err(p, SmilesErrorKind::Syntax, "dangling bond"));
        }
        if !self.branches.is_empty() {
            return Err(self.err(self.text.len(), SmilesErrorKind::Syntax, "unclosed branch"));
        }
        if let Some(open) = self.rings.values().min_by_key(|r| r.position) {
            return Err(self.err(open.position, SmilesErrorKind::RingMismatch, "unclosed ring bond"));
        }
        let mut atoms = self.graph.atoms().to_vec();
        for &(idx, at) in &self.implicit {
            let used = self.graph.weighted_degree(idx).expect("atom index is valid");
            let valences = organic_valences(atoms[idx].element).expect("organic subset has valences");
            let Some(v) = valences.iter().find(|&&v| v >= used) else {
                return Err(self.err(at, SmilesErrorKind::ValenceOverflow, format!("{used} bonds exceed the element's valence")));
            };
            atoms[idx].h_count = (v - used) as u8;
        }
        let bonds: Vec<_> = self.graph.bonds().iter().map(|b| (b.a, b.b, b.order)).collect();
        Ok(MolGraph::from_parts(atoms, &bonds).expect("bonds were validated during parsing"))
    }
}

/// Parses a kekulized SMILES string. Never panics on arbitrary input.
pub fn parse_smiles(text: &str) -> Result<MolGraph, SmilesError> {
    Parser {
        text: text.as_bytes(),
        pos: 0,
        graph: MolGraph::new(),
        implicit: Vec::new(),
        prev: None,
        pending: None,
        branches: Vec::new(),
        rings: HashMap::new(),
    }
    .run()
}

fn bracket(atom: &Atom) -> String {
    let mut s = format!("[{}", atom.element.symbol());
    match atom.h_count {
        0 => {}
        1 => s.push('H'),
        n => s.push_str(&format!("H{n}")),
    }
    match atom.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("{c}")),
    }
    s.push(']');
    s
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("more than 99 ring bonds open at once")]
pub struct TooManyRingBonds;

struct Writer<'g> {
    g: &'g MolGraph,
    visited: Vec<bool>,
    children: Vec<Vec<(usize, BondOrder)>>,
    /// Ring bonds opened at an atom: (partner, order).
    opens: Vec<Vec<(usize, BondOrder)>>,
    /// Ring bonds closed at an atom: partner atoms.
    closes: Vec<Vec<usize>>,
    ring_ids: HashMap<(usize, usize), u32>,
    free_ids: Vec<bool>,
    out: String,
}

impl Writer<'_> {
    fn explore(&mut self, u: usize, parent: Option<usize>) {
        self.visited[u] = true;
        let mut nbrs: Vec<(usize, BondOrder)> = self.g.neighbors(u).to_vec();
        nbrs.sort_unstable_by_key(|&(v, _)| v);
        for (v, order) in nbrs {
            if Some(v) == parent {
                continue;
            }
            if !self.visited[v] {
                self.children[u].push((v, order));
                self.explore(v, Some(u));
            } else if !self.children[v].iter().any(|&(c, _)| c == u) && !self.opens[u].iter().any(|&(p, _)| p == v) {
                // Back edge to an ancestor that has not been recorded yet.
                self.opens[v].push((u, order));
                self.closes[u].push(v);
            }
        }
    }

    fn ring_label(id: u32) -> String {
        if id < 10 {
            id.to_string()
        } else {
            format!("%{id}")
        }
    }

    fn emit(&mut self, u: usize) -> Result<(), TooManyRingBonds> {
        self.out.push_str(&bracket(&self.g.atoms()[u]));
        for partner in self.closes[u].clone() {
            let id = self.ring_ids.remove(&(partner, u)).expect("ring opened before closing");
            self.free_ids[id as usize] = true;
            self.out.push_str(&Self::ring_label(id));
        }
        for (partner, order) in self.opens[u].clone() {
            let id = (1..100).find(|&i| self.free_ids[i]).ok_or(TooManyRingBonds)?;
            self.free_ids[id] = false;
            self.ring_ids.insert((u, partner), id as u32);
            if order != BondOrder::Single {
                self.out.push_str(order.symbol());
            }
            self.out.push_str(&Self::ring_label(id as u32));
        }
        let children = self.children[u].clone();
        for (i, &(child, order)) in children.iter().enumerate() {
            let last = i + 1 == children.len();
            if !last {
                self.out.push('(');
            }
            if order != BondOrder::Single {
                self.out.push_str(order.symbol());
            }
            self.emit(child)?;
            if !last {
                self.out.push(')');
            }
        }
        Ok(())
    }
}

/// Writes every atom in bracket form; DFS from the lowest-index atom of
/// each component, neighbors in index order, components joined by `.`.
pub fn write_smiles(g: &MolGraph) -> Result<String, TooManyRingBonds> {
    let n = g.atom_count();
    let mut w = Writer {
        g,
        visited: vec![false; n],
        children: vec![Vec::new(); n],
        opens: vec![Vec::new(); n],
        closes: vec![Vec::new(); n],
        ring_ids: HashMap::new(),
        free_ids: vec![true; 100],
        out: String::new(),
    };
    let components = g.components();
    for (i, members) in components.iter().enumerate() {
        if i > 0 {
            w.out.push('.');
        }
        w.explore(members[0], None);
        w.emit(members[0])?;
    }
    Ok(w.out)
}

/// Reads a SMILES dataset: one entry per line, skipping blank lines and lines
/// starting with `#`. Returns (1-based line number, trimmed text).
pub fn read_smiles_lines<R: BufRead>(reader: R) -> std::io::Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canon::is_isomorphic;
    use crate::graph::fixtures::*;

    fn kind(text: &str) -> SmilesErrorKind {
        parse_smiles(text).unwrap_err().kind
    }

    #[test]
    fn parse_examples() {
        let methane = parse_smiles("C").unwrap();
        assert_eq!(methane.atoms(), &[atom("C", 4)]);

        let salt = parse_smiles("[Na+].[Cl-]").unwrap();
        assert_eq!(salt.connected_components(), 2);
        assert_eq!(salt.atoms()[0].charge, 1);
        assert_eq!(salt.atoms()[1].charge, -1);
        assert!(salt.atoms().iter().all(|a| a.h_count == 0));

        let ring = parse_smiles("C1CCCCC1").unwrap();
        assert_eq!(ring.atom_count(), 6);
        assert_eq!(ring.bonds().len(), 6);
        assert!(ring.atoms().iter().all(|a| a.h_count == 2));
        assert!(ring.bonds().iter().all(|b| b.order == BondOrder::Single));
    }

    #[test]
    fn parses_branches_bonds_and_percent_rings() {
        let g = parse_smiles("CC(=O)O").unwrap();
        assert_eq!(g.atoms().iter().map(|a| a.h_count).collect::<Vec<_>>(), vec![3, 0, 0, 1]);
        assert!(is_isomorphic(&parse_smiles("C=1C=CC=CC=1").unwrap(), &benzene()));
        assert!(is_isomorphic(&parse_smiles("C%10CCCCC%10").unwrap(), &cyclohexane()));
        assert_eq!(parse_smiles("C#N").unwrap().atoms()[1].h_count, 0);
        assert_eq!(parse_smiles("[NH4+]").unwrap().atoms()[0], Atom::new(Element::N, 1, 4));
        assert_eq!(parse_smiles("[Fe+++]").unwrap().atoms()[0].charge, 3);
        assert_eq!(parse_smiles("[O-2]").unwrap().atoms()[0].charge, -2);
        // hypervalent states of the organic subset
        assert_eq!(parse_smiles("CS(=O)(=O)C").unwrap().atoms()[1].h_count, 0);
    }

    #[test]
    fn error_kinds() {
        assert_eq!(kind("c1ccccc1"), SmilesErrorKind::UnsupportedFeature);
        assert_eq!(kind("F/C=C/F"), SmilesErrorKind::UnsupportedFeature);
        assert_eq!(kind("N[C@@H](C)C(=O)O"), SmilesErrorKind::UnsupportedFeature);
        assert_eq!(kind("[13CH4]"), SmilesErrorKind::UnsupportedFeature);
        assert_eq!(kind("*C"), SmilesErrorKind::UnsupportedFeature);
        assert_eq!(kind("C1CC"), SmilesErrorKind::RingMismatch);
        assert_eq!(kind("C(C"), SmilesErrorKind::Syntax);
        assert_eq!(kind("C)"), SmilesErrorKind::Syntax);
        assert_eq!(kind("C=="), SmilesErrorKind::Syntax);
        assert_eq!(kind("=C"), SmilesErrorKind::Syntax);
        assert_eq!(kind(""), SmilesErrorKind::Syntax);
        assert_eq!(kind("C11"), SmilesErrorKind::Syntax);
        assert_eq!(kind("C12CC12"), SmilesErrorKind::Syntax);
        assert_eq!(kind("FC(F)(F)(F)F"), SmilesErrorKind::ValenceOverflow);
        let e = parse_smiles("CC1CC").unwrap_err();
        assert_eq!(e.position, 2);
    }

    #[test]
    fn write_examples() {
        let mut water = MolGraph::new();
        water.add_atom(atom("O", 2));
        assert_eq!(write_smiles(&water).unwrap(), "[OH2]");
        assert_eq!(write_smiles(&salt()).unwrap(), "[Na+].[Cl-]");
        assert_eq!(write_smiles(&parse_smiles("C").unwrap()).unwrap(), "[CH4]");
    }

    #[test]
    fn round_trip_fixtures() {
        for g in [benzene(), cyclohexane(), decalin(), isobutane(), ethanol(), salt(), chain(7)] {
            let text = write_smiles(&g).unwrap();
            assert!(is_isomorphic(&parse_smiles(&text).unwrap(), &g), "{text}");
        }
    }

    #[test]
    fn dataset_lines_skip_comments() {
        let data = "# header\nC\n\n  CC  \n#x\nO\n";
        let lines = read_smiles_lines(data.as_bytes()).unwrap();
        assert_eq!(lines, vec![(2, "C".into()), (4, "CC".into()), (6, "O".into())]);
    }

    proptest::proptest! {
        #[test]
        fn never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..40)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_smiles(&text);
        }

        #[test]
        fn never_panics_on_smiles_alphabet(text in "[CNOSPFIBrl()=#\\[\\]H+\\-0-9%.]{0,30}") {
            if let Err(e) = parse_smiles(&text) {
                proptest::prop_assert!(e.position < text.len().max(1));
            }
        }
    }
}
