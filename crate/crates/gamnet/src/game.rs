//! Arenas and the algebra of observable traces.
//!
//! An arena extends a plain interface with question/answer structure: which
//! ports open dialogues, which may appear unprompted, and which port enables
//! which. Plays over an arena are traces whose payloads carry a justifier
//! name, a freshly minted name, and a value. This module checks legality of
//! plays, implements the operators used to state correctness (deletion,
//! reindexing, restriction, interleaving, synchronised composition,
//! saturation), generates the reference copycat strategy, and checks a net
//! against a strategy given as a trace set.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explore::{canonical_trace, drive, observable_outputs, ExploreBudget, CANON_NODE_TAG};
use crate::hram::{CodecError, Data, Message, Payload};
use crate::net::{Net, Trace, TraceEvent};
use crate::nominal::{
    atom, atom_hex, parse_atom_hex, Interface, NameMinter, PointerName, Polarity, PortName,
    Renaming,
};

/// An interface together with its dialogue structure.
///
/// `order` lists every port once, in construction order; positional renaming
/// between two arenas built the same way uses it.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct GameInterface {
    pub base: Interface,
    pub questions: BTreeSet<PortName>,
    pub initials: BTreeSet<PortName>,
    pub enabling: BTreeSet<(PortName, PortName)>,
    pub order: Vec<PortName>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GameError {
    #[error("port {0} out of scope")]
    UnknownPort(PortName),
    #[error("initial port {0} must be an opponent question")]
    BadInitial(PortName),
    #[error("enabler {0} must be a question")]
    BadEnabler(PortName),
    #[error("enabled port {0} may not be initial")]
    EnabledInitial(PortName),
    #[error("enabling {0} -> {1} must switch sides")]
    EnablingPolarity(PortName, PortName),
    #[error("order must list each port exactly once")]
    BadOrder,
    #[error("overlapping port names")]
    Clash,
}

pub fn validate_game(g: &GameInterface) -> Result<(), GameError> {
    let support = g.base.support();
    if g.order.len() != support.len() || g.order.iter().copied().collect::<BTreeSet<_>>() != support
    {
        return Err(GameError::BadOrder);
    }
    for q in &g.questions {
        if !support.contains(q) {
            return Err(GameError::UnknownPort(*q));
        }
    }
    for i in &g.initials {
        if !g.questions.contains(i) || g.base.polarity(*i) != Some(Polarity::O) {
            return Err(GameError::BadInitial(*i));
        }
    }
    for (a, b) in &g.enabling {
        if !g.questions.contains(a) {
            return Err(GameError::BadEnabler(*a));
        }
        if g.initials.contains(b) {
            return Err(GameError::EnabledInitial(*b));
        }
        let (pa, pb) = (g.base.polarity(*a), g.base.polarity(*b));
        match (pa, pb) {
            (None, _) => return Err(GameError::UnknownPort(*a)),
            (_, None) => return Err(GameError::UnknownPort(*b)),
            (Some(x), Some(y)) if x == y => return Err(GameError::EnablingPolarity(*a, *b)),
            _ => {}
        }
    }
    Ok(())
}

impl GameInterface {
    pub fn empty() -> GameInterface {
        GameInterface::default()
    }

    /// One opponent question enabling one proponent answer.
    pub fn ground(q: PortName, a: PortName) -> GameInterface {
        GameInterface {
            base: Interface::from_pairs([(q, Polarity::O), (a, Polarity::P)]),
            questions: BTreeSet::from([q]),
            initials: BTreeSet::from([q]),
            enabling: BTreeSet::from([(q, a)]),
            order: vec![q, a],
        }
    }

    pub fn is_question(&self, p: PortName) -> bool {
        self.questions.contains(&p)
    }

    pub fn is_initial(&self, p: PortName) -> bool {
        self.initials.contains(&p)
    }

    /// Applies a port renaming to every component.
    pub fn rename(&self, pi: &Renaming<PortName>) -> GameInterface {
        GameInterface {
            base: self.base.rename(pi),
            questions: self.questions.iter().map(|p| pi.apply(*p)).collect(),
            initials: self.initials.iter().map(|p| pi.apply(*p)).collect(),
            enabling: self
                .enabling
                .iter()
                .map(|(a, b)| (pi.apply(*a), pi.apply(*b)))
                .collect(),
            order: self.order.iter().map(|p| pi.apply(*p)).collect(),
        }
    }
}

/// Disjoint union of two arenas.
pub fn game_tensor(a: &GameInterface, b: &GameInterface) -> Result<GameInterface, GameError> {
    let base = a.base.tensor(&b.base).map_err(|_| GameError::Clash)?;
    Ok(GameInterface {
        base,
        questions: a.questions.union(&b.questions).copied().collect(),
        initials: a.initials.union(&b.initials).copied().collect(),
        enabling: a.enabling.union(&b.enabling).copied().collect(),
        order: a.order.iter().chain(&b.order).copied().collect(),
    })
}

/// Function-space arena: the left side flips polarity, its initial questions
/// become enabled by the right side's initial questions.
pub fn game_arrow(a: &GameInterface, b: &GameInterface) -> Result<GameInterface, GameError> {
    let base = a.base.dual().tensor(&b.base).map_err(|_| GameError::Clash)?;
    let mut enabling: BTreeSet<(PortName, PortName)> =
        a.enabling.union(&b.enabling).copied().collect();
    for ib in &b.initials {
        for ia in &a.initials {
            enabling.insert((*ib, *ia));
        }
    }
    Ok(GameInterface {
        base,
        questions: a.questions.union(&b.questions).copied().collect(),
        initials: b.initials.clone(),
        enabling,
        order: a.order.iter().chain(&b.order).copied().collect(),
    })
}

/// Mints a disjoint copy of the arena, renamed positionally.
pub fn game_fresh_copy(g: &GameInterface, minter: &NameMinter) -> (GameInterface, Renaming<PortName>) {
    let pi = Renaming::from_pairs(g.order.iter().map(|p| (*p, minter.fresh_port())))
        .expect("fresh ports are distinct");
    (g.rename(&pi), pi)
}

/// Positional renaming between two arenas built the same way, if their
/// structures agree.
pub fn same_shape_game(a: &GameInterface, b: &GameInterface) -> Option<Renaming<PortName>> {
    if a.order.len() != b.order.len() {
        return None;
    }
    let pi = Renaming::from_pairs(a.order.iter().copied().zip(b.order.iter().copied())).ok()?;
    for p in &a.order {
        let q = pi.apply(*p);
        if a.base.polarity(*p) != b.base.polarity(q)
            || a.questions.contains(p) != b.questions.contains(&q)
            || a.initials.contains(p) != b.initials.contains(&q)
        {
            return None;
        }
    }
    let mapped: BTreeSet<(PortName, PortName)> = a
        .enabling
        .iter()
        .map(|(x, y)| (pi.apply(*x), pi.apply(*y)))
        .collect();
    if mapped != b.enabling {
        return None;
    }
    Some(pi)
}

/// Justifier slot of a message.
pub fn justifier_of(ev: &TraceEvent) -> Data {
    ev.msg.payload[0]
}

/// Name-introduction slot of a message.
pub fn fresh_of(ev: &TraceEvent) -> Data {
    ev.msg.payload[1]
}

/// Value slot of a message.
pub fn value_of(ev: &TraceEvent) -> Data {
    ev.msg.payload[2]
}

/// Names the trace itself introduces.
pub fn coabstracted(t: &Trace) -> BTreeSet<PointerName> {
    let mut cp = BTreeSet::new();
    for ev in t {
        if let Data::Ptr(n) = fresh_of(ev) {
            cp.insert(n);
        }
    }
    cp
}

/// Justifier names the trace uses without having introduced them earlier.
pub fn free_pointers(t: &Trace) -> BTreeSet<PointerName> {
    let mut cp = BTreeSet::new();
    let mut fp = BTreeSet::new();
    for ev in t {
        if let Data::Ptr(p) = justifier_of(ev) {
            if !cp.contains(&p) {
                fp.insert(p);
            }
        }
        if let Data::Ptr(n) = fresh_of(ev) {
            cp.insert(n);
        }
    }
    fp
}

/// Moves available after a trace: each message introducing a name offers
/// that name as a justifier at every port its own port enables.
fn enabled_pairs(g: &GameInterface, t: &Trace) -> BTreeSet<(PortName, PointerName)> {
    let mut enabled = BTreeSet::new();
    for ev in t {
        if let Data::Ptr(n) = fresh_of(ev) {
            for (q, e) in &g.enabling {
                if *q == ev.msg.port {
                    enabled.insert((*e, n));
                }
            }
        }
    }
    enabled
}

/// Questions asked but not yet answered, in asking order.
pub fn pending_questions(g: &GameInterface, t: &Trace) -> Vec<(PortName, PointerName)> {
    let mut asked = Vec::new();
    let mut answered = BTreeSet::new();
    for ev in t {
        if g.questions.contains(&ev.msg.port) {
            if let Data::Ptr(n) = fresh_of(ev) {
                asked.push((ev.msg.port, n));
            }
        } else if let Data::Ptr(p) = justifier_of(ev) {
            answered.insert(p);
        }
    }
    asked.retain(|(_, n)| !answered.contains(n));
    asked
}

#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
pub enum Condition {
    UniquePointers,
    CorrectlyLabelled,
    Justified,
    WellOpened,
    StrictlyScoped,
    StrictlyNested,
    Alternating,
}

/// Every requirement a single-threaded play must satisfy.
pub const CONDITIONS: [Condition; 7] = [
    Condition::UniquePointers,
    Condition::CorrectlyLabelled,
    Condition::Justified,
    Condition::WellOpened,
    Condition::StrictlyScoped,
    Condition::StrictlyNested,
    Condition::Alternating,
];

/// Outcome of a legality check. Conditions are evaluated independently, so
/// one malformed trace can fail several at once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LegalityReport {
    /// First message played outside the arena, if any; when set, the
    /// per-condition verdicts are not computed.
    pub unknown_port: Option<usize>,
    /// First offending message index per failed condition.
    pub failures: BTreeMap<Condition, usize>,
}

impl LegalityReport {
    pub fn is_legal(&self) -> bool {
        self.unknown_port.is_none() && self.failures.is_empty()
    }

    pub fn fails_exactly(&self, c: Condition) -> bool {
        self.unknown_port.is_none() && self.failures.len() == 1 && self.failures.contains_key(&c)
    }
}

fn unique_pointers_violation(t: &Trace) -> Option<usize> {
    let mut seen = BTreeSet::new();
    for (i, ev) in t.iter().enumerate() {
        for d in [justifier_of(ev), value_of(ev)] {
            if let Data::Ptr(p) = d {
                seen.insert(p);
            }
        }
        if let Data::Ptr(n) = fresh_of(ev) {
            if !seen.insert(n) {
                return Some(i);
            }
        }
    }
    None
}

fn correctly_labelled_violation(g: &GameInterface, t: &Trace) -> Option<usize> {
    for (i, ev) in t.iter().enumerate() {
        if g.base.polarity(ev.msg.port) != Some(ev.pol) {
            return Some(i);
        }
        let is_q = g.questions.contains(&ev.msg.port);
        let shape_ok = match fresh_of(ev) {
            Data::Ptr(_) => is_q,
            Data::Empty => !is_q,
            Data::Int(_) => false,
        };
        if !shape_ok {
            return Some(i);
        }
    }
    None
}

fn justified_violation(g: &GameInterface, t: &Trace) -> Option<usize> {
    let mut enabled: BTreeSet<(PortName, PointerName)> = BTreeSet::new();
    for (i, ev) in t.iter().enumerate() {
        let port = ev.msg.port;
        if !g.initials.contains(&port) {
            match justifier_of(ev) {
                Data::Ptr(p) if enabled.contains(&(port, p)) => {}
                _ => return Some(i),
            }
        }
        if let Data::Ptr(n) = fresh_of(ev) {
            for (q, e) in &g.enabling {
                if *q == port {
                    enabled.insert((*e, n));
                }
            }
        }
    }
    None
}

fn well_opened_violation(g: &GameInterface, t: &Trace) -> Option<usize> {
    t.iter()
        .enumerate()
        .skip(1)
        .find(|(_, ev)| g.initials.contains(&ev.msg.port))
        .map(|(i, _)| i)
}

fn strictly_scoped_violation(g: &GameInterface, t: &Trace) -> Option<usize> {
    for (i, ev) in t.iter().enumerate() {
        if g.questions.contains(&ev.msg.port) {
            continue;
        }
        let Data::Ptr(p) = justifier_of(ev) else {
            continue;
        };
        // once answered, the question's name must not stay free downstream
        let mut minted = BTreeSet::new();
        for (j, later) in t.iter().enumerate().skip(i + 1) {
            if justifier_of(later) == Data::Ptr(p) && !minted.contains(&p) {
                return Some(j);
            }
            if let Data::Ptr(n) = fresh_of(later) {
                minted.insert(n);
            }
        }
    }
    None
}

fn strictly_nested_violation(g: &GameInterface, t: &Trace) -> Option<usize> {
    for (k, ans) in t.iter().enumerate() {
        if g.questions.contains(&ans.msg.port) {
            continue;
        }
        let Data::Ptr(pq) = justifier_of(ans) else {
            continue;
        };
        let Some(iq) = (0..k).find(|&i| fresh_of(&t[i]) == Data::Ptr(pq)) else {
            continue;
        };
        for j in iq + 1..k {
            if !g.questions.contains(&t[j].msg.port) || justifier_of(&t[j]) != Data::Ptr(pq) {
                continue;
            }
            let Data::Ptr(pc) = fresh_of(&t[j]) else {
                continue;
            };
            let closed = (j + 1..k).any(|m| {
                !g.questions.contains(&t[m].msg.port) && justifier_of(&t[m]) == Data::Ptr(pc)
            });
            if !closed {
                return Some(k);
            }
        }
    }
    None
}

fn alternating_violation(t: &Trace) -> Option<usize> {
    t.windows(2)
        .position(|w| w[0].pol == w[1].pol)
        .map(|i| i + 1)
}

/// Checks the seven legality conditions for single-threaded plays.
pub fn check_legal(g: &GameInterface, t: &Trace) -> LegalityReport {
    let mut report = LegalityReport::default();
    if let Some(i) = t
        .iter()
        .position(|ev| g.base.polarity(ev.msg.port).is_none())
    {
        report.unknown_port = Some(i);
        return report;
    }
    let verdicts = [
        (Condition::UniquePointers, unique_pointers_violation(t)),
        (
            Condition::CorrectlyLabelled,
            correctly_labelled_violation(g, t),
        ),
        (Condition::Justified, justified_violation(g, t)),
        (Condition::WellOpened, well_opened_violation(g, t)),
        (Condition::StrictlyScoped, strictly_scoped_violation(g, t)),
        (Condition::StrictlyNested, strictly_nested_violation(g, t)),
        (Condition::Alternating, alternating_violation(t)),
    ];
    for (c, v) in verdicts {
        if let Some(i) = v {
            report.failures.insert(c, i);
        }
    }
    report
}

/// Removes every message played at one of the given ports.
pub fn delete(t: &Trace, ports: &BTreeSet<PortName>) -> Trace {
    t.iter()
        .filter(|ev| !ports.contains(&ev.msg.port))
        .copied()
        .collect()
}

/// Deletion that rethreads justifiers: when a deleted message minted a name,
/// survivors justified by that name are rejustified by whatever justified
/// the deleted message itself, chains collapsing as they go.
pub fn reindex_delete(t: &Trace, ports: &BTreeSet<PortName>) -> Trace {
    let mut rho: BTreeMap<PointerName, PointerName> = BTreeMap::new();
    let resolve = |rho: &BTreeMap<PointerName, PointerName>, d: Data| match d {
        Data::Ptr(p) => Data::Ptr(rho.get(&p).copied().unwrap_or(p)),
        other => other,
    };
    let mut out = Vec::new();
    for ev in t {
        if ports.contains(&ev.msg.port) {
            if let (Data::Ptr(n), Data::Ptr(j)) =
                (fresh_of(ev), resolve(&rho, justifier_of(ev)))
            {
                rho.insert(n, j);
            }
        } else {
            let mut msg = ev.msg;
            msg.payload[0] = resolve(&rho, msg.payload[0]);
            out.push(TraceEvent { pol: ev.pol, msg });
        }
    }
    out
}

/// Keeps exactly the messages hereditarily justified by one of the roots.
pub fn hereditary_restrict(t: &Trace, roots: &BTreeSet<PointerName>) -> Trace {
    let mut live = roots.clone();
    let mut out = Vec::new();
    for ev in t {
        if let Data::Ptr(p) = justifier_of(ev) {
            if live.contains(&p) {
                if let Data::Ptr(n) = fresh_of(ev) {
                    live.insert(n);
                }
                out.push(*ev);
            }
        }
    }
    out
}

// Internal retag keeping the two sides of an interleaving in distinct
// pointer alphabets after both were canonicalised.
const SECOND_TAG: u16 = 0xFFFC;
const COUNTER_MASK: u64 = 0x0000_FFFF_FFFF_FFFF;

fn retag_second(t: &Trace) -> Trace {
    t.iter()
        .map(|ev| {
            let payload = ev.msg.payload.map(|d| match d {
                Data::Ptr(p) => Data::Ptr(PointerName(atom(SECOND_TAG, p.raw() & COUNTER_MASK))),
                other => other,
            });
            TraceEvent {
                pol: ev.pol,
                msg: Message {
                    port: ev.msg.port,
                    payload,
                },
            }
        })
        .collect()
}

/// All shuffles of a member of the first set with a member of the second,
/// canonicalised. The flag is false when the work cap was reached.
pub fn interleave(
    s1: &BTreeSet<Trace>,
    s2: &BTreeSet<Trace>,
    cap: usize,
) -> (BTreeSet<Trace>, bool) {
    let left: BTreeSet<Trace> = s1.iter().map(canonical_trace).collect();
    let right: BTreeSet<Trace> = s2
        .iter()
        .map(|t| retag_second(&canonical_trace(t)))
        .collect();
    let mut out = BTreeSet::new();
    let mut work = 0usize;
    for a in &left {
        for b in &right {
            let mut stack: Vec<(usize, usize, Trace)> = vec![(0, 0, Vec::new())];
            while let Some((i, j, cur)) = stack.pop() {
                work += 1;
                if work > cap {
                    return (out, false);
                }
                if i == a.len() && j == b.len() {
                    out.insert(canonical_trace(&cur));
                    continue;
                }
                if i < a.len() {
                    let mut next = cur.clone();
                    next.push(a[i]);
                    stack.push((i + 1, j, next));
                }
                if j < b.len() {
                    let mut next = cur;
                    next.push(b[j]);
                    stack.push((i, j + 1, next));
                }
            }
        }
    }
    (out, true)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum WSlot {
    Empty,
    Int(i64),
    Tok(u32),
}

#[derive(Clone, Copy)]
struct WEvent {
    pol: Polarity,
    port: PortName,
    slots: [WSlot; 3],
}

/// Union-find over side-tagged pointer atoms; a class holds at most one
/// atom per side, which keeps each side's renaming injective.
#[derive(Clone, Default)]
struct NameClasses {
    parent: Vec<u32>,
    atoms: Vec<[Option<PointerName>; 2]>,
    ids: BTreeMap<(u8, PointerName), u32>,
}

impl NameClasses {
    fn tok(&mut self, side: u8, p: PointerName) -> u32 {
        if let Some(&t) = self.ids.get(&(side, p)) {
            return t;
        }
        let t = self.parent.len() as u32;
        self.parent.push(t);
        let mut a = [None, None];
        a[side as usize] = Some(p);
        self.atoms.push(a);
        self.ids.insert((side, p), t);
        t
    }

    fn find(&self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return true;
        }
        let (aa, ab) = (self.atoms[ra as usize], self.atoms[rb as usize]);
        for s in 0..2 {
            if aa[s].is_some() && ab[s].is_some() && aa[s] != ab[s] {
                return false;
            }
        }
        self.parent[rb as usize] = ra;
        self.atoms[ra as usize] = [aa[0].or(ab[0]), aa[1].or(ab[1])];
        true
    }

    fn slot(&mut self, side: u8, d: Data) -> WSlot {
        match d {
            Data::Empty => WSlot::Empty,
            Data::Int(i) => WSlot::Int(i),
            Data::Ptr(p) => WSlot::Tok(self.tok(side, p)),
        }
    }
}

fn materialize(events: &[WEvent], uf: &NameClasses) -> Trace {
    let mut canon: HashMap<u32, PointerName> = HashMap::new();
    let mut next = 0u64;
    events
        .iter()
        .map(|ev| {
            let payload = ev.slots.map(|s| match s {
                WSlot::Empty => Data::Empty,
                WSlot::Int(i) => Data::Int(i),
                WSlot::Tok(t) => {
                    let root = uf.find(t);
                    let p = *canon.entry(root).or_insert_with(|| {
                        let p = PointerName(atom(CANON_NODE_TAG, next));
                        next += 1;
                        p
                    });
                    Data::Ptr(p)
                }
            });
            TraceEvent {
                pol: ev.pol,
                msg: Message {
                    port: ev.port,
                    payload,
                },
            }
        })
        .collect()
}

/// Enumerates full synchronised interleavings of one trace from each side:
/// events at linked ports must meet an opposite-polarity partner with a
/// unifiable payload and are recorded once under the first side's port
/// name, all other events interleave freely.
#[allow(clippy::too_many_arguments)]
fn interactions(
    a: &Trace,
    b: &Trace,
    hidden_a: &BTreeSet<PortName>,
    hidden_b: &BTreeSet<PortName>,
    pi: &Renaming<PortName>,
    work: &mut usize,
    cap: usize,
    out: &mut Vec<Trace>,
) -> bool {
    #[derive(Clone)]
    struct St {
        i: usize,
        j: usize,
        uf: NameClasses,
        events: Vec<WEvent>,
    }
    let mut stack = vec![St {
        i: 0,
        j: 0,
        uf: NameClasses::default(),
        events: Vec::new(),
    }];
    while let Some(st) = stack.pop() {
        *work += 1;
        if *work > cap {
            return false;
        }
        if st.i == a.len() && st.j == b.len() {
            out.push(materialize(&st.events, &st.uf));
            continue;
        }
        if st.i < a.len() && !hidden_a.contains(&a[st.i].msg.port) {
            let mut next = st.clone();
            let ev = &a[st.i];
            let slots = ev.msg.payload.map(|d| next.uf.slot(0, d));
            next.events.push(WEvent {
                pol: ev.pol,
                port: ev.msg.port,
                slots,
            });
            next.i += 1;
            stack.push(next);
        }
        if st.j < b.len() && !hidden_b.contains(&b[st.j].msg.port) {
            let mut next = st.clone();
            let ev = &b[st.j];
            let slots = ev.msg.payload.map(|d| next.uf.slot(1, d));
            next.events.push(WEvent {
                pol: ev.pol,
                port: ev.msg.port,
                slots,
            });
            next.j += 1;
            stack.push(next);
        }
        if st.i < a.len() && st.j < b.len() {
            let (ea, eb) = (&a[st.i], &b[st.j]);
            if hidden_a.contains(&ea.msg.port)
                && pi.maps(ea.msg.port) == Some(eb.msg.port)
                && eb.pol == ea.pol.dual()
            {
                let mut next = st.clone();
                let mut ok = true;
                let mut slots = [WSlot::Empty; 3];
                for (slot, (pa, pb)) in slots
                    .iter_mut()
                    .zip(ea.msg.payload.iter().zip(eb.msg.payload.iter()))
                {
                    match (pa, pb) {
                        (Data::Empty, Data::Empty) => *slot = WSlot::Empty,
                        (Data::Int(x), Data::Int(y)) if x == y => *slot = WSlot::Int(*x),
                        (Data::Ptr(x), Data::Ptr(y)) => {
                            let (tx, ty) = (next.uf.tok(0, *x), next.uf.tok(1, *y));
                            if !next.uf.union(tx, ty) {
                                ok = false;
                                break;
                            }
                            *slot = WSlot::Tok(tx);
                        }
                        _ => {
                            ok = false;
                            break;
                        }
                    }
                }
                if ok {
                    next.events.push(WEvent {
                        pol: ea.pol,
                        port: ea.msg.port,
                        slots,
                    });
                    next.i += 1;
                    next.j += 1;
                    stack.push(next);
                }
            }
        }
    }
    true
}

fn compose_sets(
    s1: &BTreeSet<Trace>,
    s2: &BTreeSet<Trace>,
    pi: &Renaming<PortName>,
    cap: usize,
    rethread: bool,
) -> (BTreeSet<Trace>, bool) {
    let hidden_a: BTreeSet<PortName> = pi.support().map(|(x, _)| x).collect();
    let hidden_b: BTreeSet<PortName> = pi.support().map(|(_, y)| y).collect();
    let mut out = BTreeSet::new();
    let mut work = 0usize;
    let mut complete = true;
    for a in s1 {
        for b in s2 {
            let mut full = Vec::new();
            if !interactions(a, b, &hidden_a, &hidden_b, pi, &mut work, cap, &mut full) {
                complete = false;
            }
            for u in full {
                let visible = if rethread {
                    reindex_delete(&u, &hidden_a)
                } else {
                    delete(&u, &hidden_a)
                };
                out.insert(canonical_trace(&visible));
            }
            if !complete {
                return (out, false);
            }
        }
    }
    (out, complete)
}

/// Synchronised composition hiding the linked ports by plain deletion.
pub fn trace_compose(
    s1: &BTreeSet<Trace>,
    s2: &BTreeSet<Trace>,
    pi: &Renaming<PortName>,
    cap: usize,
) -> (BTreeSet<Trace>, bool) {
    compose_sets(s1, s2, pi, cap, false)
}

/// Synchronised composition hiding the linked ports by reindexing deletion,
/// so surviving messages stay justified across the hidden middle.
pub fn game_compose(
    s1: &BTreeSet<Trace>,
    s2: &BTreeSet<Trace>,
    pi: &Renaming<PortName>,
    cap: usize,
) -> (BTreeSet<Trace>, bool) {
    compose_sets(s1, s2, pi, cap, true)
}

/// Checks that every proponent extension inside the first set of a trace
/// known to both sets stays inside the second; returns a counterexample.
pub fn is_pclosed(s1: &BTreeSet<Trace>, s2: &BTreeSet<Trace>) -> Result<(), Trace> {
    let c1: BTreeSet<Trace> = s1.iter().map(canonical_trace).collect();
    let c2: BTreeSet<Trace> = s2.iter().map(canonical_trace).collect();
    for s in &c1 {
        let Some(last) = s.last() else { continue };
        if last.pol != Polarity::P {
            continue;
        }
        let prefix = s[..s.len() - 1].to_vec();
        if c1.contains(&prefix) && c2.contains(&prefix) && !c2.contains(s) {
            return Err(s.clone());
        }
    }
    Ok(())
}

/// Closure under asynchronous reordering: an opponent message may move
/// earlier and a proponent message later, except across the message that
/// mints its justifier. The flag is false when the size cap was reached.
pub fn saturate(s: &BTreeSet<Trace>, cap: usize) -> (BTreeSet<Trace>, bool) {
    let mut out: BTreeSet<Trace> = s.iter().map(canonical_trace).collect();
    let mut queue: VecDeque<Trace> = out.iter().cloned().collect();
    while let Some(t) = queue.pop_front() {
        for i in 0..t.len().saturating_sub(1) {
            let (m1, m2) = (&t[i], &t[i + 1]);
            let movable = m2.pol == Polarity::O || m1.pol == Polarity::P;
            if !movable {
                continue;
            }
            if let (Data::Ptr(n), Data::Ptr(j)) = (fresh_of(m1), justifier_of(m2)) {
                if n == j {
                    continue;
                }
            }
            let mut u = t.clone();
            u.swap(i, i + 1);
            let u = canonical_trace(&u);
            if out.contains(&u) {
                continue;
            }
            if out.len() >= cap {
                return (out, false);
            }
            out.insert(u.clone());
            queue.push_back(u);
        }
    }
    (out, true)
}

/// Equality of traces up to bijective renamings of port names and of
/// pointer names.
pub fn equal_up_to_names(t1: &Trace, t2: &Trace) -> bool {
    if t1.len() != t2.len() {
        return false;
    }
    let mut ports: Renaming<PortName> = Renaming::identity();
    let mut ptrs: Renaming<PointerName> = Renaming::identity();
    for (a, b) in t1.iter().zip(t2) {
        if a.pol != b.pol || !ports.bind(a.msg.port, b.msg.port) {
            return false;
        }
        for k in 0..3 {
            match (a.msg.payload[k], b.msg.payload[k]) {
                (Data::Empty, Data::Empty) => {}
                (Data::Int(x), Data::Int(y)) if x == y => {}
                (Data::Ptr(x), Data::Ptr(y)) => {
                    if !ptrs.bind(x, y) {
                        return false;
                    }
                }
                _ => return false,
            }
        }
    }
    true
}

/// Plays of the copycat strategy between an arena and its renamed copy, up
/// to the length bound. The opponent tries every legal move with answer
/// values drawn from the given alphabet; the proponent mirrors the move on
/// the partner port, linking the fresh names of the two sides.
pub fn cc_traces(
    a: &GameInterface,
    pi: &Renaming<PortName>,
    depth: usize,
    answer_values: &[Data],
    minter: &NameMinter,
) -> Result<BTreeSet<Trace>, GameError> {
    let copy = a.rename(pi);
    let arena = game_arrow(a, &copy)?;
    let mut out: BTreeSet<Trace> = BTreeSet::new();
    out.insert(Vec::new());
    struct St {
        t: Trace,
        link: BTreeMap<PointerName, PointerName>,
    }
    let mut stack = vec![St {
        t: Vec::new(),
        link: BTreeMap::new(),
    }];
    while let Some(st) = stack.pop() {
        if st.t.len() >= depth {
            continue;
        }
        if st.t.len() % 2 == 0 {
            let enabled = enabled_pairs(&arena, &st.t);
            for (port, pol) in arena.base.iter() {
                if pol != Polarity::O {
                    continue;
                }
                let justifiers: Vec<Data> = if arena.initials.contains(&port) {
                    if st.t.is_empty() {
                        vec![Data::Ptr(minter.fresh_pointer())]
                    } else {
                        Vec::new()
                    }
                } else {
                    enabled
                        .iter()
                        .filter(|(p, _)| *p == port)
                        .map(|(_, n)| Data::Ptr(*n))
                        .collect()
                };
                let is_q = arena.questions.contains(&port);
                for j in justifiers {
                    let payloads: Vec<Payload> = if is_q {
                        vec![[j, Data::Ptr(minter.fresh_pointer()), Data::Empty]]
                    } else {
                        answer_values.iter().map(|v| [j, Data::Empty, *v]).collect()
                    };
                    for payload in payloads {
                        let mut t2 = st.t.clone();
                        t2.push(TraceEvent::input(Message { port, payload }));
                        if check_legal(&arena, &t2).is_legal() {
                            out.insert(t2.clone());
                            stack.push(St {
                                t: t2,
                                link: st.link.clone(),
                            });
                        }
                    }
                }
            }
        } else {
            let o = *st.t.last().expect("odd positions follow a move");
            let Some(mirror) = pi
                .maps(o.msg.port)
                .or_else(|| pi.maps_back(o.msg.port))
            else {
                continue;
            };
            let justifier = if arena.initials.contains(&o.msg.port) {
                fresh_of(&o)
            } else {
                match justifier_of(&o) {
                    Data::Ptr(p) => match st.link.get(&p) {
                        Some(l) => Data::Ptr(*l),
                        None => continue,
                    },
                    _ => continue,
                }
            };
            let fresh = if arena.questions.contains(&mirror) {
                Data::Ptr(minter.fresh_pointer())
            } else {
                Data::Empty
            };
            let mut link = st.link.clone();
            if let (Data::Ptr(no), Data::Ptr(np)) = (fresh_of(&o), fresh) {
                link.insert(no, np);
                link.insert(np, no);
            }
            let mut t2 = st.t.clone();
            t2.push(TraceEvent::output(Message {
                port: mirror,
                payload: [justifier, fresh, value_of(&o)],
            }));
            debug_assert!(check_legal(&arena, &t2).is_legal());
            out.insert(t2.clone());
            stack.push(St { t: t2, link });
        }
    }
    Ok(out)
}

/// Outcome of checking a net against a strategy.
#[derive(Clone, Debug, Default)]
pub struct ImplementsReport {
    /// A strategy trace the net provably cannot replay.
    pub missing: Option<Trace>,
    /// A reachable output extension that leaves the strategy.
    pub unexpected: Option<Trace>,
    /// False when an exploration budget was hit, leaving verdicts partial.
    pub complete: bool,
}

impl ImplementsReport {
    pub fn holds(&self) -> bool {
        self.missing.is_none() && self.unexpected.is_none()
    }
}

/// Checks that the net can replay every strategy trace up to the length
/// bound, and that after any replay every output the net can emit stays
/// inside the strategy.
pub fn implements_check(
    net: &Net,
    strategy: &BTreeSet<Trace>,
    depth: usize,
    minter: &NameMinter,
    budget: &ExploreBudget,
) -> ImplementsReport {
    let mut spec: BTreeSet<Trace> = BTreeSet::new();
    for s in strategy {
        let c = canonical_trace(s);
        for k in 0..=c.len().min(depth) {
            spec.insert(c[..k].to_vec());
        }
    }
    let mut report = ImplementsReport {
        complete: true,
        ..ImplementsReport::default()
    };
    for s in &spec {
        let (ends, drove_all) = drive(net, s, minter, budget);
        report.complete &= drove_all;
        if ends.is_empty() {
            if drove_all {
                report.missing = Some(s.clone());
                return report;
            }
            continue;
        }
        if s.len() >= depth {
            continue;
        }
        for end in &ends {
            let rev: BTreeMap<PointerName, PointerName> =
                end.unifier.iter().map(|(a, b)| (*b, *a)).collect();
            let (outs, closed_all) = observable_outputs(net, s, &end.cfg, minter, budget);
            report.complete &= closed_all;
            for (m, _) in outs {
                let payload = m.payload.map(|d| match d {
                    Data::Ptr(p) => Data::Ptr(rev.get(&p).copied().unwrap_or(p)),
                    other => other,
                });
                let mut ext = s.clone();
                ext.push(TraceEvent::output(Message {
                    port: m.port,
                    payload,
                }));
                let ext = canonical_trace(&ext);
                if !spec.contains(&ext) {
                    report.unexpected = Some(ext);
                    return report;
                }
            }
        }
    }
    report
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceParseError {
    #[error("line {0}: expected polarity, port and three payload fields")]
    Arity(usize),
    #[error("line {0}: polarity must be O or P")]
    Pol(usize),
    #[error("line {0}: malformed atom")]
    Atom(usize),
    #[error("line {0}: malformed payload field")]
    Value(usize),
}

/// Renders an arena as one document: ports with polarity in construction
/// order, then the question, initial and enabling structure.
pub fn arena_to_json(g: &GameInterface) -> serde_json::Value {
    use serde_json::json;
    let ports: Vec<_> = g
        .order
        .iter()
        .map(|p| {
            let pol = g.base.polarity(*p).map(|l| l.to_string());
            json!([atom_hex(p.0), pol])
        })
        .collect();
    let hexes = |s: &BTreeSet<PortName>| -> Vec<String> { s.iter().map(|p| atom_hex(p.0)).collect() };
    json!({
        "ports": ports,
        "questions": hexes(&g.questions),
        "initials": hexes(&g.initials),
        "enabling": g.enabling.iter()
            .map(|(a, b)| json!([atom_hex(a.0), atom_hex(b.0)]))
            .collect::<Vec<_>>(),
    })
}

/// Parses an arena rendered by [`arena_to_json`].
pub fn arena_from_json(v: &serde_json::Value) -> Result<GameInterface, CodecError> {
    let err = |msg: String| CodecError(msg);
    let port = |v: &serde_json::Value| -> Result<PortName, CodecError> {
        v.as_str()
            .and_then(|s| parse_atom_hex(s).ok())
            .map(PortName)
            .ok_or_else(|| err(format!("bad port atom {v}")))
    };
    let rows = v
        .get("ports")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| err("arena without a port list".to_string()))?;
    let mut base = Interface::empty();
    let mut order = Vec::new();
    for row in rows {
        let pair = row.as_array().filter(|a| a.len() == 2);
        let pair = pair.ok_or_else(|| err(format!("bad port row {row}")))?;
        let p = port(&pair[0])?;
        let pol = match pair[1].as_str() {
            Some("O") => Polarity::O,
            Some("P") => Polarity::P,
            _ => return Err(err(format!("bad polarity {}", pair[1]))),
        };
        base.insert(p, pol);
        order.push(p);
    }
    let set = |key: &str| -> Result<BTreeSet<PortName>, CodecError> {
        v.get(key)
            .and_then(serde_json::Value::as_array)
            .ok_or_else(|| err(format!("arena without a {key} list")))?
            .iter()
            .map(port)
            .collect()
    };
    let enabling = v
        .get("enabling")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| err("arena without an enabling list".to_string()))?
        .iter()
        .map(|row| {
            let pair = row.as_array().filter(|a| a.len() == 2);
            let pair = pair.ok_or_else(|| err(format!("bad enabling row {row}")))?;
            Ok((port(&pair[0])?, port(&pair[1])?))
        })
        .collect::<Result<BTreeSet<_>, CodecError>>()?;
    Ok(GameInterface {
        base,
        questions: set("questions")?,
        initials: set("initials")?,
        enabling,
        order,
    })
}

/// One line per message: polarity, port, then the three payload slots.
/// Ports and pointer names print as sixteen hex digits, the empty payload
/// as an underscore, integers in decimal.
pub fn format_trace(t: &Trace) -> String {
    let mut s = String::new();
    for ev in t {
        s.push_str(&ev.to_string());
        s.push('\n');
    }
    s
}

fn parse_data_token(tok: &str) -> Option<Data> {
    if tok == "_" {
        return Some(Data::Empty);
    }
    if tok.len() == 16 && tok.chars().all(|c| c.is_ascii_hexdigit()) {
        return parse_atom_hex(tok).ok().map(|a| Data::Ptr(PointerName(a)));
    }
    tok.parse::<i64>().ok().map(Data::Int)
}

/// Parses the line format produced by [`format_trace`]. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_trace(src: &str) -> Result<Trace, TraceParseError> {
    let mut out = Vec::new();
    for (idx, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ln = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(TraceParseError::Arity(ln));
        }
        let pol = match fields[0] {
            "O" => Polarity::O,
            "P" => Polarity::P,
            _ => return Err(TraceParseError::Pol(ln)),
        };
        let port = PortName(parse_atom_hex(fields[1]).map_err(|_| TraceParseError::Atom(ln))?);
        let mut payload = [Data::Empty; 3];
        for (k, tok) in fields[2..].iter().enumerate() {
            payload[k] = parse_data_token(tok).ok_or(TraceParseError::Value(ln))?;
        }
        out.push(TraceEvent {
            pol,
            msg: Message { port, payload },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hram::{Code, Engine, Instr, R0, R1, R2};
    use crate::net::singleton;
    use proptest::prelude::*;

    fn ptr(tag: u16, c: u64) -> PointerName {
        PointerName(atom(tag, c))
    }

    fn ev(pol: Polarity, port: PortName, payload: [Data; 3]) -> TraceEvent {
        TraceEvent {
            pol,
            msg: Message { port, payload },
        }
    }

    /// Arena `(com -> com) -> com` with ports named after their role:
    /// `ral`/`dal` the inner argument, `rar`/`dar` the argument's result,
    /// `rb`/`db` the overall result.
    struct Nested {
        arena: GameInterface,
        ral: PortName,
        dal: PortName,
        rar: PortName,
        dar: PortName,
        rb: PortName,
        db: PortName,
    }

    fn nested_arena(minter: &NameMinter) -> Nested {
        let (ral, dal) = (minter.fresh_port(), minter.fresh_port());
        let (rar, dar) = (minter.fresh_port(), minter.fresh_port());
        let (rb, db) = (minter.fresh_port(), minter.fresh_port());
        let inner = game_arrow(
            &GameInterface::ground(ral, dal),
            &GameInterface::ground(rar, dar),
        )
        .unwrap();
        let arena = game_arrow(&inner, &GameInterface::ground(rb, db)).unwrap();
        Nested {
            arena,
            ral,
            dal,
            rar,
            dar,
            rb,
            db,
        }
    }

    #[test]
    fn ground_and_arrow_structure() {
        let m = NameMinter::new(1);
        let n = nested_arena(&m);
        assert!(validate_game(&n.arena).is_ok());
        assert_eq!(n.arena.initials, BTreeSet::from([n.rb]));
        assert_eq!(n.arena.base.polarity(n.ral), Some(Polarity::O));
        assert_eq!(n.arena.base.polarity(n.rar), Some(Polarity::P));
        assert_eq!(n.arena.base.polarity(n.dar), Some(Polarity::O));
        assert_eq!(n.arena.base.polarity(n.db), Some(Polarity::P));
        assert!(n.arena.enabling.contains(&(n.rb, n.rar)));
        assert!(n.arena.enabling.contains(&(n.rar, n.ral)));
        assert!(n.arena.enabling.contains(&(n.ral, n.dal)));
        assert!(!n.arena.enabling.contains(&(n.rb, n.ral)));
    }

    #[test]
    fn tensor_rejects_shared_ports() {
        let m = NameMinter::new(1);
        let g = GameInterface::ground(m.fresh_port(), m.fresh_port());
        assert_eq!(game_tensor(&g, &g), Err(GameError::Clash));
    }

    #[test]
    fn fresh_copy_has_same_shape() {
        let m = NameMinter::new(1);
        let n = nested_arena(&m);
        let (copy, pi) = game_fresh_copy(&n.arena, &m);
        assert!(validate_game(&copy).is_ok());
        let again = same_shape_game(&n.arena, &copy).unwrap();
        for (x, y) in pi.support() {
            assert_eq!(again.maps(x), Some(y));
        }
        assert!(same_shape_game(&n.arena, &GameInterface::empty()).is_none());
    }

    #[test]
    fn pointer_partition_examples() {
        let m = NameMinter::new(1);
        let q = m.fresh_port();
        let (p0, p1, p2) = (ptr(9, 0), ptr(9, 1), ptr(9, 2));
        let one = vec![ev(
            Polarity::O,
            q,
            [Data::Ptr(p0), Data::Ptr(p1), Data::Empty],
        )];
        assert_eq!(coabstracted(&one), BTreeSet::from([p1]));
        assert_eq!(free_pointers(&one), BTreeSet::from([p0]));
        let two = vec![
            ev(Polarity::O, q, [Data::Ptr(p0), Data::Ptr(p1), Data::Empty]),
            ev(Polarity::P, q, [Data::Ptr(p1), Data::Ptr(p2), Data::Empty]),
        ];
        assert_eq!(coabstracted(&two), BTreeSet::from([p1, p2]));
        assert_eq!(free_pointers(&two), BTreeSet::from([p0]));
    }

    fn legal_nested_play(n: &Nested) -> Trace {
        let p: Vec<PointerName> = (0..4).map(|c| ptr(9, c)).collect();
        vec![
            ev(
                Polarity::O,
                n.rb,
                [Data::Ptr(p[0]), Data::Ptr(p[1]), Data::Empty],
            ),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[1]), Data::Ptr(p[2]), Data::Empty],
            ),
            ev(
                Polarity::O,
                n.ral,
                [Data::Ptr(p[2]), Data::Ptr(p[3]), Data::Empty],
            ),
            ev(Polarity::P, n.dal, [Data::Ptr(p[3]), Data::Empty, Data::Empty]),
            ev(Polarity::O, n.dar, [Data::Ptr(p[2]), Data::Empty, Data::Empty]),
            ev(Polarity::P, n.db, [Data::Ptr(p[1]), Data::Empty, Data::Empty]),
        ]
    }

    #[test]
    fn nested_play_is_legal_and_questions_resolve() {
        let m = NameMinter::new(1);
        let n = nested_arena(&m);
        let t = legal_nested_play(&n);
        let report = check_legal(&n.arena, &t);
        assert!(report.is_legal(), "{report:?}");
        let open = pending_questions(&n.arena, &t[..3].to_vec());
        assert_eq!(
            open,
            vec![(n.rb, ptr(9, 1)), (n.rar, ptr(9, 2)), (n.ral, ptr(9, 3))]
        );
        assert!(pending_questions(&n.arena, &t).is_empty());
    }

    #[test]
    fn each_mutant_fails_exactly_one_condition() {
        let m = NameMinter::new(1);
        let n = nested_arena(&m);
        let p: Vec<PointerName> = (0..8).map(|c| ptr(9, c)).collect();
        let rb = |j: usize, f: usize| {
            ev(
                Polarity::O,
                n.rb,
                [Data::Ptr(p[j]), Data::Ptr(p[f]), Data::Empty],
            )
        };
        let unique = vec![
            rb(0, 1),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[1]), Data::Ptr(p[1]), Data::Empty],
            ),
        ];
        let labelled = vec![
            rb(0, 1),
            ev(Polarity::P, n.rar, [Data::Ptr(p[1]), Data::Empty, Data::Empty]),
        ];
        let justified = vec![
            rb(0, 1),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[2]), Data::Ptr(p[3]), Data::Empty],
            ),
        ];
        let opened = vec![
            rb(0, 1),
            ev(Polarity::P, n.db, [Data::Ptr(p[1]), Data::Empty, Data::Empty]),
            rb(2, 3),
        ];
        let scoped = vec![
            rb(0, 1),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[1]), Data::Ptr(p[2]), Data::Empty],
            ),
            ev(Polarity::O, n.dar, [Data::Ptr(p[2]), Data::Empty, Data::Empty]),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[1]), Data::Ptr(p[3]), Data::Empty],
            ),
            ev(Polarity::O, n.dar, [Data::Ptr(p[2]), Data::Empty, Data::Empty]),
        ];
        let nested = vec![
            rb(0, 1),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[1]), Data::Ptr(p[2]), Data::Empty],
            ),
            ev(
                Polarity::O,
                n.ral,
                [Data::Ptr(p[2]), Data::Ptr(p[3]), Data::Empty],
            ),
            ev(Polarity::P, n.db, [Data::Ptr(p[1]), Data::Empty, Data::Empty]),
        ];
        let alternating = vec![
            rb(0, 1),
            ev(
                Polarity::P,
                n.rar,
                [Data::Ptr(p[1]), Data::Ptr(p[2]), Data::Empty],
            ),
            ev(
                Polarity::O,
                n.ral,
                [Data::Ptr(p[2]), Data::Ptr(p[3]), Data::Empty],
            ),
            ev(
                Polarity::O,
                n.ral,
                [Data::Ptr(p[2]), Data::Ptr(p[4]), Data::Empty],
            ),
        ];
        let cases = [
            (unique, Condition::UniquePointers),
            (labelled, Condition::CorrectlyLabelled),
            (justified, Condition::Justified),
            (opened, Condition::WellOpened),
            (scoped, Condition::StrictlyScoped),
            (nested, Condition::StrictlyNested),
            (alternating, Condition::Alternating),
        ];
        for (t, cond) in cases {
            let report = check_legal(&n.arena, &t);
            assert!(report.fails_exactly(cond), "{cond:?}: {report:?}");
        }
        let stray = vec![ev(
            Polarity::O,
            m.fresh_port(),
            [Data::Ptr(p[0]), Data::Ptr(p[1]), Data::Empty],
        )];
        assert_eq!(check_legal(&n.arena, &stray).unknown_port, Some(0));
    }

    #[test]
    fn reindex_rethreads_where_delete_dangles() {
        let m = NameMinter::new(1);
        let (qa, qh, qc) = (m.fresh_port(), m.fresh_port(), m.fresh_port());
        let (p0, p1, p2, p3) = (ptr(9, 0), ptr(9, 1), ptr(9, 2), ptr(9, 3));
        let t = vec![
            ev(Polarity::O, qa, [Data::Ptr(p0), Data::Ptr(p1), Data::Empty]),
            ev(Polarity::P, qh, [Data::Ptr(p1), Data::Ptr(p2), Data::Empty]),
            ev(Polarity::O, qc, [Data::Ptr(p2), Data::Ptr(p3), Data::Empty]),
        ];
        let hidden = BTreeSet::from([qh]);
        let plain = delete(&t, &hidden);
        assert_eq!(justifier_of(&plain[1]), Data::Ptr(p2));
        let rethreaded = reindex_delete(&t, &hidden);
        assert_eq!(rethreaded.len(), 2);
        assert_eq!(justifier_of(&rethreaded[1]), Data::Ptr(p1));
        assert_eq!(fresh_of(&rethreaded[1]), Data::Ptr(p3));
        assert_eq!(reindex_delete(&t, &BTreeSet::new()), t);
    }

    #[test]
    fn restriction_keeps_one_thread() {
        let m = NameMinter::new(1);
        let q = m.fresh_port();
        let (a0, a1, b0, b1) = (ptr(9, 0), ptr(9, 1), ptr(8, 0), ptr(8, 1));
        let t = vec![
            ev(Polarity::O, q, [Data::Ptr(a0), Data::Ptr(a1), Data::Empty]),
            ev(Polarity::O, q, [Data::Ptr(b0), Data::Ptr(b1), Data::Empty]),
            ev(Polarity::P, q, [Data::Ptr(b1), Data::Empty, Data::Empty]),
            ev(Polarity::P, q, [Data::Ptr(a1), Data::Empty, Data::Empty]),
        ];
        let kept = hereditary_restrict(&t, &BTreeSet::from([a0]));
        assert_eq!(kept, vec![t[0], t[3]]);
    }

    #[test]
    fn interleave_keeps_alphabets_apart() {
        let m = NameMinter::new(1);
        let (qa, qb) = (m.fresh_port(), m.fresh_port());
        let a = ev(
            Polarity::O,
            qa,
            [Data::Ptr(ptr(9, 0)), Data::Ptr(ptr(9, 1)), Data::Empty],
        );
        let b = ev(
            Polarity::O,
            qb,
            [Data::Ptr(ptr(8, 5)), Data::Ptr(ptr(8, 6)), Data::Empty],
        );
        let s1 = BTreeSet::from([vec![], vec![a]]);
        let s2 = BTreeSet::from([vec![], vec![b]]);
        let (mix, complete) = interleave(&s1, &s2, 10_000);
        assert!(complete);
        assert_eq!(mix.len(), 5);
        let both: Vec<&Trace> = mix.iter().filter(|t| t.len() == 2).collect();
        assert_eq!(both.len(), 2);
        for t in both {
            let names = coabstracted(t).len() + free_pointers(t).len();
            assert_eq!(names, 4, "sides must not share atoms: {t:?}");
        }
    }

    #[test]
    fn saturation_moves_opponents_earlier_only() {
        let m = NameMinter::new(1);
        let (x, y) = (m.fresh_port(), m.fresh_port());
        let pe = ev(Polarity::P, x, [Data::Ptr(ptr(9, 0)), Data::Empty, Data::Empty]);
        let oe = ev(Polarity::O, y, [Data::Ptr(ptr(9, 1)), Data::Empty, Data::Empty]);
        let (sat, complete) = saturate(&BTreeSet::from([vec![pe, oe]]), 100);
        assert!(complete);
        assert_eq!(sat.len(), 2);
        let (sat, _) = saturate(&BTreeSet::from([vec![oe, pe]]), 100);
        assert_eq!(sat.len(), 1);
        let q = ev(
            Polarity::P,
            x,
            [Data::Ptr(ptr(9, 0)), Data::Ptr(ptr(9, 1)), Data::Empty],
        );
        let dep = ev(Polarity::O, y, [Data::Ptr(ptr(9, 1)), Data::Empty, Data::Empty]);
        let (sat, _) = saturate(&BTreeSet::from([vec![q, dep]]), 100);
        assert_eq!(sat.len(), 1, "a message may not cross its own justifier");
    }

    #[test]
    fn composition_rethreads_across_the_hidden_middle() {
        let m = NameMinter::new(1);
        let (qa, qb, qb2, qc) = (
            m.fresh_port(),
            m.fresh_port(),
            m.fresh_port(),
            m.fresh_port(),
        );
        let f = vec![
            ev(
                Polarity::O,
                qb,
                [Data::Ptr(ptr(9, 0)), Data::Ptr(ptr(9, 1)), Data::Empty],
            ),
            ev(
                Polarity::P,
                qa,
                [Data::Ptr(ptr(9, 1)), Data::Ptr(ptr(9, 2)), Data::Empty],
            ),
        ];
        let g = vec![
            ev(
                Polarity::O,
                qc,
                [Data::Ptr(ptr(8, 0)), Data::Ptr(ptr(8, 1)), Data::Empty],
            ),
            ev(
                Polarity::P,
                qb2,
                [Data::Ptr(ptr(8, 1)), Data::Ptr(ptr(8, 2)), Data::Empty],
            ),
        ];
        let s1: BTreeSet<Trace> = [vec![], f[..1].to_vec(), f.clone()].into();
        let s2: BTreeSet<Trace> = [vec![], g[..1].to_vec(), g.clone()].into();
        let pi = Renaming::from_pairs([(qb, qb2)]).unwrap();
        let (linked, complete) = game_compose(&s1, &s2, &pi, 100_000);
        assert!(complete);
        let c = |k: u64| Data::Ptr(ptr(0xFFFD, k));
        let expect = vec![
            ev(Polarity::O, qc, [c(0), c(1), Data::Empty]),
            ev(Polarity::P, qa, [c(1), c(2), Data::Empty]),
        ];
        assert!(linked.contains(&expect), "{linked:?}");
        let (plain, _) = trace_compose(&s1, &s2, &pi, 100_000);
        let dangling = vec![
            ev(Polarity::O, qc, [c(0), c(1), Data::Empty]),
            ev(Polarity::P, qa, [c(2), c(3), Data::Empty]),
        ];
        assert!(plain.contains(&dangling), "{plain:?}");
        assert!(!plain.contains(&expect));
    }

    #[test]
    fn pclosure_finds_missing_proponent_extension() {
        let m = NameMinter::new(1);
        let q = m.fresh_port();
        let o = ev(Polarity::O, q, [Data::Ptr(ptr(9, 0)), Data::Ptr(ptr(9, 1)), Data::Empty]);
        let p = ev(Polarity::P, q, [Data::Ptr(ptr(9, 1)), Data::Ptr(ptr(9, 2)), Data::Empty]);
        let s1: BTreeSet<Trace> = [vec![], vec![o], vec![o, p]].into();
        let s2: BTreeSet<Trace> = [vec![], vec![o], vec![o, p]].into();
        assert!(is_pclosed(&s1, &s2).is_ok());
        let shallow: BTreeSet<Trace> = [vec![], vec![o]].into();
        assert_eq!(is_pclosed(&s1, &shallow).unwrap_err().len(), 2);
    }

    #[test]
    fn name_blind_equality() {
        let m = NameMinter::new(1);
        let (x, y) = (m.fresh_port(), m.fresh_port());
        let t1 = vec![ev(Polarity::O, x, [Data::Ptr(ptr(9, 0)), Data::Int(3), Data::Empty])];
        let t2 = vec![ev(Polarity::O, y, [Data::Ptr(ptr(4, 7)), Data::Int(3), Data::Empty])];
        assert!(equal_up_to_names(&t1, &t2));
        let t3 = vec![ev(Polarity::O, y, [Data::Ptr(ptr(4, 7)), Data::Int(4), Data::Empty])];
        assert!(!equal_up_to_names(&t1, &t3));
        let clash = vec![
            t1[0],
            ev(Polarity::P, x, [Data::Ptr(ptr(9, 0)), Data::Empty, Data::Empty]),
        ];
        let split = vec![
            t2[0],
            ev(Polarity::P, y, [Data::Ptr(ptr(4, 8)), Data::Empty, Data::Empty]),
        ];
        assert!(!equal_up_to_names(&clash, &split));
    }

    #[test]
    fn copycat_oracle_mirrors_a_ground_arena() {
        let m = NameMinter::new(1);
        let g = GameInterface::ground(m.fresh_port(), m.fresh_port());
        let (copy, pi) = game_fresh_copy(&g, &m);
        let plays = cc_traces(&g, &pi, 4, &[Data::Empty], &m).unwrap();
        assert_eq!(plays.len(), 5);
        let canon: BTreeSet<Trace> = plays.iter().map(canonical_trace).collect();
        let c = |k: u64| Data::Ptr(ptr(0xFFFD, k));
        let q2 = copy.order[0];
        let (q1, a1) = (g.order[0], g.order[1]);
        let a2 = copy.order[1];
        let full = vec![
            ev(Polarity::O, q2, [c(0), c(1), Data::Empty]),
            ev(Polarity::P, q1, [c(1), c(2), Data::Empty]),
            ev(Polarity::O, a1, [c(2), Data::Empty, Data::Empty]),
            ev(Polarity::P, a2, [c(1), Data::Empty, Data::Empty]),
        ];
        assert!(canon.contains(&full), "{canon:?}");
        let arena = game_arrow(&g, &copy).unwrap();
        for t in &plays {
            assert!(check_legal(&arena, t).is_legal());
        }
    }

    fn lit_engine(minter: &NameMinter, value: i64) -> Engine {
        let q = minter.fresh_port();
        let a = minter.fresh_port();
        Engine {
            interface: Interface::from_pairs([(q, Polarity::O), (a, Polarity::P)]),
            port_map: [(
                q,
                Code::seq(
                    [
                        Instr::Flip { a: R0, b: R1 },
                        Instr::Set { dst: R1, lit: None },
                        Instr::Set {
                            dst: R2,
                            lit: Some(value),
                        },
                    ],
                    Code::Spark(a),
                ),
            )]
            .into_iter()
            .collect(),
        }
    }

    #[test]
    fn literal_net_implements_its_answer_strategy() {
        let minter = NameMinter::new(3);
        let (net, renaming) = singleton(&lit_engine(&minter, 7), &minter);
        let ports = net.external.side(Polarity::O);
        let q = ports[0];
        let a = renaming.apply(net.engines[0].interface.side(Polarity::P)[0]);
        let (j, n) = (minter.fresh_pointer(), minter.fresh_pointer());
        let ask = ev(Polarity::O, q, [Data::Ptr(j), Data::Ptr(n), Data::Empty]);
        let reply = ev(Polarity::P, a, [Data::Ptr(n), Data::Empty, Data::Int(7)]);
        let good: BTreeSet<Trace> = [vec![ask, reply]].into();
        let report = implements_check(&net, &good, 2, &minter, &ExploreBudget::default());
        assert!(report.holds() && report.complete, "{report:?}");
        let overfull: BTreeSet<Trace> = [
            vec![ask, reply],
            vec![
                ask,
                ev(Polarity::P, a, [Data::Ptr(n), Data::Empty, Data::Int(8)]),
            ],
        ]
        .into();
        let report = implements_check(&net, &overfull, 2, &minter, &ExploreBudget::default());
        assert!(report.missing.is_some(), "{report:?}");
        let silent: BTreeSet<Trace> = [vec![ask]].into();
        let report = implements_check(&net, &silent, 2, &minter, &ExploreBudget::default());
        assert!(report.unexpected.is_some());
    }

    #[test]
    fn trace_lines_roundtrip() {
        let m = NameMinter::new(1);
        let q = m.fresh_port();
        let t = vec![
            ev(Polarity::O, q, [Data::Ptr(ptr(9, 0)), Data::Ptr(ptr(9, 1)), Data::Empty]),
            ev(Polarity::P, q, [Data::Ptr(ptr(9, 1)), Data::Empty, Data::Int(-12)]),
        ];
        let text = format_trace(&t);
        assert_eq!(parse_trace(&text).unwrap(), t);
        let commented = format!("# header\n\n{text}");
        assert_eq!(parse_trace(&commented).unwrap(), t);
        assert_eq!(parse_trace("O zz 1 2"), Err(TraceParseError::Arity(1)));
        assert_eq!(
            parse_trace("Q 0000000000000001 _ _ _"),
            Err(TraceParseError::Pol(1))
        );
    }

    proptest! {
        #[test]
        fn reindex_by_nothing_is_identity(t in arb_trace()) {
            prop_assert_eq!(reindex_delete(&t, &BTreeSet::new()), t);
        }

        #[test]
        fn canonicalisation_preserves_name_blind_equality(t in arb_trace()) {
            prop_assert!(equal_up_to_names(&t, &canonical_trace(&t)));
        }
    }

    fn arb_data() -> impl Strategy<Value = Data> {
        prop_oneof![
            Just(Data::Empty),
            (0..5i64).prop_map(Data::Int),
            (0..6u64).prop_map(|c| Data::Ptr(ptr(7, c))),
        ]
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        proptest::collection::vec(
            (any::<bool>(), 0..4u64, arb_data(), arb_data(), arb_data()).prop_map(
                |(o, port, d0, d1, d2)| {
                    ev(
                        if o { Polarity::O } else { Polarity::P },
                        PortName(atom(2, port)),
                        [d0, d1, d2],
                    )
                },
            ),
            0..8,
        )
    }
}
