//! Incremental decoder state and per-step token masks.
//!
//! Local rules (structure, valency, rings, branches, termination) are checked
//! first. A token that passes them is then kept only if the state it leads to
//! can still reach EOS within the remaining length budget; that completion
//! check is exact, so every state reachable through allowed tokens has at
//! least one allowed token and every finished sequence decodes.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use smallvec::SmallVec;

use crate::graph::BondOrder;
use crate::vocab::{self, Token, Vocab};

/// Node budget for one completion search. Searches that exceed it count as
/// infeasible, which keeps the mask sound.
const SEARCH_NODE_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    Structure,
    BondValency,
    AtomValency,
    RingOpen,
    RingClose,
    Branch,
    Budget,
    Termination,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::Structure => "R1",
            Rule::BondValency => "R2",
            Rule::AtomValency => "R3",
            Rule::RingOpen => "R4",
            Rule::RingClose => "R5",
            Rule::Branch => "R6",
            Rule::Budget => "R7",
            Rule::Termination => "R8",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MaskError {
    #[error("decoder state is already finished")]
    Finished,
    #[error("max_len {0} is below the minimum of 3")]
    MaxLenTooSmall(usize),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("token `{text}` masked at position {position} by rule {rule}")]
    Disallowed {
        token: u32,
        text: String,
        position: usize,
        rule: Rule,
    },
}

/// Kind of the last consumed token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LastKind {
    Bos,
    Atom,
    Bond,
    BranchOpen,
    BranchClose,
    Bor,
    Eor,
    Dot,
    Eos,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    allowed: Vec<bool>,
}

impl Mask {
    pub fn allowed(&self, id: u32) -> bool {
        self.allowed.get(id as usize).copied().unwrap_or(false)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn allowed_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i as u32)
    }
}

/// Vocabulary-derived tables shared by every decoder state.
#[derive(Clone, Debug)]
pub struct MaskEngine {
    vocab: Vocab,
    /// Distinct atom max-valencies, ascending, each with its token ids.
    classes: Vec<(u8, Vec<u32>)>,
}

impl MaskEngine {
    pub fn new(vocab: &Vocab) -> MaskEngine {
        let mut by_valency: std::collections::BTreeMap<u8, Vec<u32>> = Default::default();
        for (i, t) in vocab.atom_tokens().iter().enumerate() {
            by_valency.entry(t.max_valency).or_default().push(vocab.atom_base() + i as u32);
        }
        MaskEngine {
            vocab: vocab.clone(),
            classes: by_valency.into_iter().collect(),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_class(&self) -> Option<u8> {
        self.classes.last().map(|c| c.0)
    }

    /// Fresh state with BOS consumed. `max_len` bounds the whole sequence,
    /// BOS and EOS included.
    pub fn init(&self, max_len: usize) -> Result<DecoderState<'_>, MaskError> {
        if max_len < 3 {
            return Err(MaskError::MaxLenTooSmall(max_len));
        }
        Ok(DecoderState {
            engine: self,
            slots: Vec::new(),
            frames: Vec::new(),
            anchors: Vec::new(),
            mode: Mode::Start,
            last: LastKind::Bos,
            position: 1,
            max_len,
            slack: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Mode {
    /// After BOS or `.`: an atom must follow.
    Start,
    /// After an atom, `[bor]`, `[eor-i]` or `)`.
    AtomLike,
    AfterBond(u8),
    AfterOpen,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Action {
    Atom(u8),
    Bond(u8),
    Open,
    Close,
    Bor,
    Eor(usize),
    Dot,
    Eos,
}

fn action_of(token: Token, vocab: &Vocab) -> Option<Action> {
    Some(match token {
        Token::Atom(a) => Action::Atom(vocab.atom_tokens()[a].max_valency),
        Token::Bond(o) => Action::Bond(o.value()),
        Token::BranchOpen => Action::Open,
        Token::BranchClose => Action::Close,
        Token::RingOpen => Action::Bor,
        Token::RingClose(i) => Action::Eor(i),
        Token::Dot => Action::Dot,
        Token::Eos => Action::Eos,
        Token::Bos | Token::Pad => return None,
    })
}

#[derive(Clone, Debug)]
struct Slot {
    /// Valency still available, with one unit held back per open anchor.
    free: u8,
    nbrs: SmallVec<[u32; 4]>,
}

/// Decoder state after a prefix of tokens.
#[derive(Clone, Debug)]
pub struct DecoderState<'e> {
    engine: &'e MaskEngine,
    slots: Vec<Slot>,
    /// Branch stack bottom to top, then the current atom.
    frames: Vec<u32>,
    /// Open ring anchors, oldest first, with the sequence index of their `[bor]`.
    anchors: Vec<(u32, usize)>,
    mode: Mode,
    last: LastKind,
    position: usize,
    max_len: usize,
    slack: usize,
}

impl<'e> DecoderState<'e> {
    pub fn with_slack(mut self, slack: usize) -> Self {
        self.slack = slack;
        self
    }

    pub fn engine(&self) -> &'e MaskEngine {
        self.engine
    }

    /// Tokens consumed so far, BOS included; equals the index of the next token.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokens_remaining(&self) -> usize {
        self.max_len - self.position
    }

    pub fn is_finished(&self) -> bool {
        self.mode == Mode::Done
    }

    pub fn last_kind(&self) -> LastKind {
        self.last
    }

    pub fn open_branch_count(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn open_anchor_count(&self) -> usize {
        self.anchors.len()
    }

    /// Sequence indices of the `[bor]` tokens of the open anchors, oldest first.
    pub fn open_anchor_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.anchors.iter().map(|&(_, p)| p)
    }

    fn plan(&self) -> Plan {
        let mut map: HashMap<u32, u16> = HashMap::new();
        let mut real: Vec<u32> = Vec::new();
        let mut intern = |r: u32, real: &mut Vec<u32>| -> u16 {
            *map.entry(r).or_insert_with(|| {
                real.push(r);
                (real.len() - 1) as u16
            })
        };
        let frames: Vec<u16> = self.frames.iter().map(|&r| intern(r, &mut real)).collect();
        let anchors: Vec<u16> = self.anchors.iter().map(|&(r, _)| intern(r, &mut real)).collect();
        let free = real.iter().map(|&r| self.slots[r as usize].free).collect();
        let mut edges = Vec::new();
        for (p, &r) in real.iter().enumerate() {
            for n in &self.slots[r as usize].nbrs {
                if let Some(q) = real.iter().position(|x| x == n) {
                    if p < q {
                        edges.push((p as u16, q as u16));
                    }
                }
            }
        }
        edges.sort_unstable();
        Plan {
            free,
            edges,
            frames,
            anchors,
            mode: self.mode,
        }
    }

    fn check_with(&self, plan: &Plan, action: Action, slack: usize) -> Result<(), Rule> {
        plan.local(action, self.engine.vocab.r_max())?;
        let budget = (self.max_len - self.position - 1).checked_sub(slack).ok_or(Rule::Budget)?;
        let child = plan.apply(action);
        let mut search = Search::new(self.engine);
        if search.feasible(&child, budget) {
            Ok(())
        } else {
            Err(Rule::Budget)
        }
    }

    fn mask_with(&self, slack: usize) -> Mask {
        let v = &self.engine.vocab;
        let mut allowed = vec![false; v.len()];
        if self.position >= self.max_len {
            return Mask { allowed };
        }
        let plan = self.plan();
        let set = |ids: &[u32], action: Action, allowed: &mut Vec<bool>| {
            if self.check_with(&plan, action, slack).is_ok() {
                for &id in ids {
                    allowed[id as usize] = true;
                }
            }
        };
        for (valency, ids) in &self.engine.classes {
            set(ids, Action::Atom(*valency), &mut allowed);
        }
        for o in BondOrder::ALL {
            set(&[Vocab::bond_id(o)], Action::Bond(o.value()), &mut allowed);
        }
        set(&[vocab::BRANCH_OPEN], Action::Open, &mut allowed);
        set(&[vocab::BRANCH_CLOSE], Action::Close, &mut allowed);
        set(&[vocab::RING_OPEN], Action::Bor, &mut allowed);
        set(&[vocab::DOT], Action::Dot, &mut allowed);
        set(&[vocab::EOS], Action::Eos, &mut allowed);
        for i in 1..=self.anchors.len().min(v.r_max()) {
            set(&[v.ring_close_id(i).expect("within r_max")], Action::Eor(i), &mut allowed);
        }
        Mask { allowed }
    }

    pub fn mask(&self) -> Result<Mask, MaskError> {
        if self.is_finished() {
            return Err(MaskError::Finished);
        }
        let m = self.mask_with(self.slack);
        if self.slack > 0 && m.count() == 0 {
            return Ok(self.mask_with(0));
        }
        Ok(m)
    }

    /// Rule that masks `id` in this state, if any.
    pub fn check(&self, id: u32) -> Result<(), MaskError> {
        if self.is_finished() {
            return Err(MaskError::Finished);
        }
        let v = &self.engine.vocab;
        let token = v.token(id).ok_or(MaskError::UnknownToken(id))?;
        let disallowed = |rule| MaskError::Disallowed {
            token: id,
            text: v.token_text(id),
            position: self.position,
            rule,
        };
        let action = action_of(token, v).ok_or_else(|| disallowed(Rule::Structure))?;
        let plan = self.plan();
        match self.check_with(&plan, action, self.slack) {
            Ok(()) => Ok(()),
            Err(Rule::Budget) if self.slack > 0 && self.mask_with(self.slack).count() == 0 => {
                self.check_with(&plan, action, 0).map_err(disallowed)
            }
            Err(rule) => Err(disallowed(rule)),
        }
    }

    /// Consumes `id`, failing with the violated rule if the mask forbids it.
    pub fn advance(&mut self, id: u32) -> Result<(), MaskError> {
        self.check(id)?;
        let token = self.engine.vocab.token(id).expect("checked");
        self.apply(action_of(token, &self.engine.vocab).expect("checked"));
        Ok(())
    }

    /// Value-returning form of [`DecoderState::advance`].
    pub fn advanced(&self, id: u32) -> Result<DecoderState<'e>, MaskError> {
        let mut next = self.clone();
        next.advance(id)?;
        Ok(next)
    }

    fn current(&self) -> usize {
        *self.frames.last().expect("an atom is current") as usize
    }

    fn apply(&mut self, action: Action) {
        let pos = self.position;
        self.position += 1;
        match action {
            Action::Atom(valency) => {
                let idx = self.slots.len() as u32;
                let mut slot = Slot {
                    free: valency,
                    nbrs: SmallVec::new(),
                };
                match self.mode {
                    Mode::AfterBond(o) => {
                        let c = self.current();
                        slot.free -= o;
                        slot.nbrs.push(c as u32);
                        self.slots[c].nbrs.push(idx);
                        *self.frames.last_mut().expect("current") = idx;
                    }
                    _ => self.frames.push(idx),
                }
                self.slots.push(slot);
                self.mode = Mode::AtomLike;
                self.last = LastKind::Atom;
            }
            Action::Bond(o) => {
                let c = self.current();
                self.slots[c].free -= o;
                self.mode = Mode::AfterBond(o);
                self.last = LastKind::Bond;
            }
            Action::Open => {
                let c = self.current() as u32;
                self.frames.push(c);
                self.mode = Mode::AfterOpen;
                self.last = LastKind::BranchOpen;
            }
            Action::Close => {
                self.frames.pop();
                self.mode = Mode::AtomLike;
                self.last = LastKind::BranchClose;
            }
            Action::Bor => {
                let c = self.current();
                self.slots[c].free -= 1;
                self.anchors.push((c as u32, pos));
                self.mode = Mode::AtomLike;
                self.last = LastKind::Bor;
            }
            Action::Eor(i) => {
                let o = match self.mode {
                    Mode::AfterBond(o) => o,
                    _ => unreachable!("checked"),
                };
                let c = self.current();
                let (a, _) = self.anchors.remove(i - 1);
                let a = a as usize;
                self.slots[a].free = (self.slots[a].free as u16 + 1 - o as u16) as u8;
                self.slots[a].nbrs.push(c as u32);
                self.slots[c].nbrs.push(a as u32);
                self.mode = Mode::AtomLike;
                self.last = LastKind::Eor;
            }
            Action::Dot => {
                self.frames.clear();
                self.mode = Mode::Start;
                self.last = LastKind::Dot;
            }
            Action::Eos => {
                self.frames.clear();
                self.mode = Mode::Done;
                self.last = LastKind::Eos;
            }
        }
    }

    /// Key that identifies the state up to the future it admits: two states
    /// with equal keys accept exactly the same continuations.
    pub fn key(&self) -> impl std::hash::Hash + Eq + Clone + fmt::Debug {
        (self.plan(), self.position, self.max_len)
    }
}

/// The part of a decoder state that constrains its continuations: atoms that
/// are still reachable (branch frames, current atom, anchors), their free
/// valency and mutual bonds, and the grammar mode.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Plan {
    free: Vec<u8>,
    edges: Vec<(u16, u16)>,
    frames: Vec<u16>,
    anchors: Vec<u16>,
    mode: Mode,
}

impl Plan {
    fn current(&self) -> usize {
        *self.frames.last().expect("an atom is current") as usize
    }

    fn adjacent(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b) as u16, a.max(b) as u16);
        self.edges.binary_search(&key).is_ok()
    }

    fn branches(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    fn local(&self, action: Action, r_max: usize) -> Result<(), Rule> {
        match (self.mode, action) {
            (Mode::Done, _) => Err(Rule::Structure),
            (Mode::Start, Action::Atom(_)) => Ok(()),
            (Mode::Start, _) => Err(Rule::Structure),
            (Mode::AtomLike, Action::Bond(o)) => (self.free[self.current()] >= o).then_some(()).ok_or(Rule::BondValency),
            (Mode::AtomLike, Action::Open) => (self.free[self.current()] >= 1).then_some(()).ok_or(Rule::Branch),
            (Mode::AtomLike, Action::Close) => (self.branches() >= 1).then_some(()).ok_or(Rule::Branch),
            (Mode::AtomLike, Action::Bor) => {
                (self.free[self.current()] >= 1 && self.anchors.len() < r_max).then_some(()).ok_or(Rule::RingOpen)
            }
            (Mode::AtomLike, Action::Dot | Action::Eos) => {
                (self.branches() == 0 && self.anchors.is_empty()).then_some(()).ok_or(Rule::Termination)
            }
            (Mode::AtomLike, _) => Err(Rule::Structure),
            (Mode::AfterBond(o), Action::Atom(v)) => (v >= o).then_some(()).ok_or(Rule::AtomValency),
            (Mode::AfterBond(o), Action::Eor(i)) => {
                let c = self.current();
                let ok = i >= 1 && i <= self.anchors.len() && {
                    let a = self.anchors[i - 1] as usize;
                    a != c && !self.adjacent(a, c) && self.free[a] as u16 + 1 >= o as u16
                };
                ok.then_some(()).ok_or(Rule::RingClose)
            }
            (Mode::AfterBond(_), _) => Err(Rule::Structure),
            (Mode::AfterOpen, Action::Bond(o)) => (self.free[self.current()] >= o).then_some(()).ok_or(Rule::BondValency),
            (Mode::AfterOpen, _) => Err(Rule::Structure),
        }
    }

    /// Successor plan; `action` must pass [`Plan::local`].
    fn apply(&self, action: Action) -> Plan {
        let mut p = self.clone();
        match action {
            Action::Atom(v) => {
                let n = p.free.len() as u16;
                match p.mode {
                    Mode::AfterBond(o) => {
                        let c = p.current() as u16;
                        p.free.push(v - o);
                        p.edges.push((c, n));
                        *p.frames.last_mut().expect("current") = n;
                    }
                    _ => {
                        p.free.push(v);
                        p.frames.push(n);
                    }
                }
                p.mode = Mode::AtomLike;
            }
            Action::Bond(o) => {
                let c = p.current();
                p.free[c] -= o;
                p.mode = Mode::AfterBond(o);
            }
            Action::Open => {
                let c = p.current() as u16;
                p.frames.push(c);
                p.mode = Mode::AfterOpen;
            }
            Action::Close => {
                p.frames.pop();
                p.mode = Mode::AtomLike;
            }
            Action::Bor => {
                let c = p.current();
                p.free[c] -= 1;
                p.anchors.push(c as u16);
                p.mode = Mode::AtomLike;
            }
            Action::Eor(i) => {
                let o = match p.mode {
                    Mode::AfterBond(o) => o,
                    _ => unreachable!("checked by local"),
                };
                let c = p.current();
                let a = p.anchors.remove(i - 1) as usize;
                p.free[a] = (p.free[a] as u16 + 1 - o as u16) as u8;
                p.edges.push((a.min(c) as u16, a.max(c) as u16));
                p.mode = Mode::AtomLike;
            }
            Action::Dot => {
                p.frames.clear();
                p.mode = Mode::Start;
            }
            Action::Eos => {
                p.frames.clear();
                p.mode = Mode::Done;
            }
        }
        p.normalize();
        p
    }

    /// Drops unreachable atoms and renumbers the rest by first appearance in
    /// frames, then anchors, so equal futures give equal plans.
    fn normalize(&mut self) {
        let n = self.free.len();
        let mut map = vec![u16::MAX; n];
        let mut next = 0u16;
        for &a in self.frames.iter().chain(self.anchors.iter()) {
            if map[a as usize] == u16::MAX {
                map[a as usize] = next;
                next += 1;
            }
        }
        let mut free = vec![0u8; next as usize];
        for (old, &new) in map.iter().enumerate() {
            if new != u16::MAX {
                free[new as usize] = self.free[old];
            }
        }
        self.free = free;
        let mut edges: Vec<(u16, u16)> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                let (x, y) = (map[a as usize], map[b as usize]);
                (x != u16::MAX && y != u16::MAX).then(|| (x.min(y), x.max(y)))
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        self.edges = edges;
        for f in &mut self.frames {
            *f = map[*f as usize];
        }
        for a in &mut self.anchors {
            *a = map[*a as usize];
        }
    }

    /// Lower bound on the tokens needed to reach and emit EOS.
    fn lower_bound(&self) -> usize {
        let a = self.anchors.len();
        let b = self.branches();
        match self.mode {
            Mode::Done => 0,
            Mode::Start => 2,
            Mode::AtomLike => 2 * a + b + 1,
            Mode::AfterBond(_) if a > 0 => 2 * a + b,
            Mode::AfterBond(_) => b + 2,
            Mode::AfterOpen if a > 0 => 2 * a + b + 1,
            Mode::AfterOpen => b + 3,
        }
    }
}

struct Search<'e> {
    engine: &'e MaskEngine,
    nodes: usize,
    /// Largest budget at which a plan is known to have no completion.
    failed: HashMap<Plan, usize>,
}

impl<'e> Search<'e> {
    fn new(engine: &'e MaskEngine) -> Self {
        Search {
            engine,
            nodes: 0,
            failed: HashMap::new(),
        }
    }

    /// Exact cost when no anchors are open, `None` if no completion exists.
    fn cost_without_anchors(&self, p: &Plan) -> Option<usize> {
        let max = self.engine.max_class();
        match p.mode {
            Mode::Done => Some(0),
            Mode::Start => max.map(|_| 2),
            Mode::AtomLike => Some(p.branches() + 1),
            Mode::AfterBond(o) => max.filter(|&v| v >= o).map(|_| p.branches() + 2),
            Mode::AfterOpen => {
                (p.free[p.current()] >= 1 && max.is_some_and(|v| v >= 1)).then(|| p.branches() + 3)
            }
        }
    }

    /// True when the current atom can close every anchor directly, which
    /// meets the lower bound.
    fn closes_all_from_current(p: &Plan) -> bool {
        if p.mode != Mode::AtomLike {
            return false;
        }
        let c = p.current();
        if (p.free[c] as usize) < p.anchors.len() {
            return false;
        }
        let mut seen: SmallVec<[u16; 8]> = SmallVec::new();
        for &a in &p.anchors {
            if a as usize == c || p.adjacent(a as usize, c) || seen.contains(&a) {
                return false;
            }
            seen.push(a);
        }
        true
    }

    fn feasible(&mut self, p: &Plan, budget: usize) -> bool {
        if p.lower_bound() > budget {
            return false;
        }
        if p.anchors.is_empty() {
            return self.cost_without_anchors(p).is_some_and(|c| c <= budget);
        }
        if Self::closes_all_from_current(p) {
            return true;
        }
        if self.nodes >= SEARCH_NODE_CAP {
            return false;
        }
        self.nodes += 1;
        if self.failed.get(p).is_some_and(|&b| budget <= b) {
            return false;
        }
        let r_max = self.engine.vocab.r_max();
        let mut actions: SmallVec<[Action; 8]> = SmallVec::new();
        match p.mode {
            Mode::AtomLike => {
                actions.push(Action::Bond(1));
                actions.push(Action::Close);
                actions.push(Action::Open);
            }
            Mode::AfterBond(_) => {
                actions.extend((1..=p.anchors.len()).map(Action::Eor));
                if let Some(v) = self.engine.max_class() {
                    actions.push(Action::Atom(v));
                }
            }
            Mode::AfterOpen => actions.push(Action::Bond(1)),
            Mode::Start | Mode::Done => {}
        }
        for action in actions {
            if p.local(action, r_max).is_ok() && self.feasible(&p.apply(action), budget - 1) {
                return true;
            }
        }
        let entry = self.failed.entry(p.clone()).or_insert(0);
        *entry = (*entry).max(budget);
        false
    }
}

/// Per-token annotations of a complete sequence, used by the model inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    /// Open anchors after consuming each token.
    pub ring_counts: Vec<usize>,
    /// For each position, the `[bor]` indices of anchors open after it.
    pub anchor_positions: Vec<Vec<usize>>,
}

/// Replays `tokens` (starting with BOS) through the mask, failing on the first
/// masked token.
pub fn annotate(engine: &MaskEngine, tokens: &[u32], max_len: usize) -> Result<Annotation, MaskError> {
    let mut s = engine.init(max_len)?;
    let mut ring_counts = vec![0];
    let mut anchor_positions = vec![Vec::new()];
    for &t in tokens.iter().skip(1) {
        s.advance(t)?;
        ring_counts.push(s.open_anchor_count());
        anchor_positions.push(s.open_anchor_positions().collect());
    }
    Ok(Annotation {
        ring_counts,
        anchor_positions,
    })
}

/// Samples uniformly among allowed tokens until EOS.
pub fn rollout_uniform<R: Rng + ?Sized>(engine: &MaskEngine, max_len: usize, rng: &mut R) -> Result<Vec<u32>, MaskError> {
    rollout_weighted(engine, max_len, rng, |_, _| 1.0)
}

/// Samples allowed tokens in proportion to `weight(state, id)` until EOS. A
/// mask whose allowed tokens all weigh zero falls back to uniform.
pub fn rollout_weighted<R, W>(engine: &MaskEngine, max_len: usize, rng: &mut R, mut weight: W) -> Result<Vec<u32>, MaskError>
where
    R: Rng + ?Sized,
    W: FnMut(&DecoderState<'_>, u32) -> f64,
{
    let mut s = engine.init(max_len)?;
    let mut out = vec![vocab::BOS];
    while !s.is_finished() {
        let m = s.mask()?;
        let ids: Vec<u32> = m.allowed_ids().collect();
        assert!(!ids.is_empty(), "mask deadlock at position {}", s.position());
        let weights: Vec<f64> = ids.iter().map(|&id| weight(&s, id).max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let id = if total > 0.0 && total.is_finite() {
            let mut x = rng.gen::<f64>() * total;
            let mut pick = *ids.last().expect("non-empty");
            for (&id, &w) in ids.iter().zip(&weights) {
                if x < w {
                    pick = id;
                    break;
                }
                x -= w;
            }
            pick
        } else {
            ids[rng.gen_range(0..ids.len())]
        };
        s.advance(id)?;
        out.push(id);
    }
    Ok(out)
}
