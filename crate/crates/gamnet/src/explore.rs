//! Bounded exploration of net behaviour: silent closure with canonical
//! deduplication, trace-set denotations under a configurable environment,
//! and driving a net along a prescribed trace with name unification.

use crate::hram::{Data, Message, Payload, StepLabel};
use crate::net::{initial_net, net_inject, net_step, Net, NetConfig, Trace, TraceEvent};
use crate::nominal::{atom, NameMinter, PointerName, Polarity, PortName};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

/// Node tag used for the renumbered pointer atoms of canonical traces.
pub const CANON_NODE_TAG: u16 = 0xFFFD;

/// Caps on exploration effort. Exceeding a cap marks the result incomplete
/// instead of failing.
#[derive(Clone, Debug)]
pub struct ExploreBudget {
    /// Configurations visited inside one silent closure.
    pub max_silent: usize,
    /// Total configurations visited by one exploration.
    pub max_states: usize,
}

impl Default for ExploreBudget {
    fn default() -> ExploreBudget {
        ExploreBudget {
            max_silent: 20_000,
            max_states: 500_000,
        }
    }
}

/// Supplies the candidate environment messages to try after a given trace.
pub trait InputGenerator {
    fn inputs(&self, net: &Net, trace: &Trace, minter: &NameMinter) -> Vec<(PortName, Payload)>;
}

/// Generic environment: plays every external input port with justifiers
/// drawn from recently seen pointers (or none), an optionally fresh second
/// slot, and a small value alphabet.
#[derive(Clone, Debug)]
pub struct CappedInputs {
    pub justifier_cap: usize,
    pub offer_fresh_justifier: bool,
    pub data_values: Vec<Data>,
    pub offer_fresh: bool,
    pub offer_empty_fresh: bool,
}

impl Default for CappedInputs {
    fn default() -> CappedInputs {
        CappedInputs {
            justifier_cap: 3,
            offer_fresh_justifier: true,
            data_values: vec![Data::Empty, Data::Int(0)],
            offer_fresh: true,
            offer_empty_fresh: true,
        }
    }
}

impl InputGenerator for CappedInputs {
    fn inputs(&self, net: &Net, trace: &Trace, minter: &NameMinter) -> Vec<(PortName, Payload)> {
        let mut known: Vec<PointerName> = Vec::new();
        for ev in trace.iter().rev() {
            for slot in ev.msg.payload {
                if let Data::Ptr(p) = slot {
                    if !known.contains(&p) {
                        known.push(p);
                    }
                }
            }
        }
        known.truncate(self.justifier_cap);
        let mut justifiers = vec![Data::Empty];
        justifiers.extend(known.iter().map(|p| Data::Ptr(*p)));
        if self.offer_fresh_justifier {
            justifiers.push(Data::Ptr(minter.fresh_pointer()));
        }
        let mut seconds = Vec::new();
        if self.offer_fresh {
            seconds.push(Data::Ptr(minter.fresh_pointer()));
        }
        if self.offer_empty_fresh {
            seconds.push(Data::Empty);
        }
        let mut out = Vec::new();
        for port in net.external.side(Polarity::O) {
            for &j in &justifiers {
                for &s in &seconds {
                    for &d in &self.data_values {
                        out.push((port, [j, s, d]));
                    }
                }
            }
        }
        out
    }
}

#[derive(Default)]
struct Canon {
    idx: HashMap<u64, usize>,
}

impl Canon {
    fn touch(&mut self, a: u64) -> usize {
        let n = self.idx.len();
        *self.idx.entry(a).or_insert(n)
    }

    fn render(&mut self, d: Data, out: &mut String) {
        match d {
            Data::Empty => out.push('_'),
            Data::Int(i) => {
                let _ = write!(out, "i{i}");
            }
            Data::Ptr(p) => {
                let n = self.touch(p.raw());
                let _ = write!(out, "p{n}");
            }
        }
    }

    fn try_render(&self, d: Data, out: &mut String) {
        match d {
            Data::Empty => out.push('_'),
            Data::Int(i) => {
                let _ = write!(out, "i{i}");
            }
            Data::Ptr(p) => match self.idx.get(&p.raw()) {
                Some(n) => {
                    let _ = write!(out, "p{n}");
                }
                None => {
                    let _ = write!(out, "u{:016x}", p.raw());
                }
            },
        }
    }
}

/// A stable key identifying a (trace, configuration) pair up to renaming of
/// pointer atoms. Port atoms are part of the net and kept verbatim.
pub fn state_key(trace: &Trace, cfg: &NetConfig) -> String {
    let mut c = Canon::default();
    let mut out = String::new();
    for ev in trace {
        let _ = write!(out, "{}{:x}(", ev.pol, ev.msg.port.raw());
        for slot in ev.msg.payload {
            c.render(slot, &mut out);
            out.push(',');
        }
        out.push(')');
    }
    out.push('|');
    let mut rows: Vec<(String, &Message)> = cfg
        .pending
        .iter()
        .map(|m| {
            let mut k = format!("{:x}(", m.port.raw());
            for slot in m.payload {
                c.try_render(slot, &mut k);
                k.push(',');
            }
            (k, m)
        })
        .collect();
    rows.sort();
    for (_, m) in rows {
        let _ = write!(out, "{:x}(", m.port.raw());
        for slot in m.payload {
            c.render(slot, &mut out);
            out.push(',');
        }
        out.push(')');
    }
    for ecfg in &cfg.engines {
        out.push('|');
        let mut rows: Vec<(String, usize)> = ecfg
            .threads
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut k = format!("{:?}", t.code);
                for r in t.regs {
                    c.try_render(r, &mut k);
                    k.push(',');
                }
                (k, i)
            })
            .collect();
        rows.sort();
        for (_, i) in rows {
            let t = &ecfg.threads[i];
            let _ = write!(out, "{:?}[", t.code);
            for r in t.regs {
                c.render(r, &mut out);
                out.push(',');
            }
            out.push(']');
        }
        out.push(';');
        let mut cells: Vec<(String, PointerName)> = ecfg
            .heap
            .iter()
            .map(|(p, (d1, d2))| {
                let mut k = String::new();
                c.try_render(Data::Ptr(*p), &mut k);
                k.push('=');
                c.try_render(*d1, &mut k);
                k.push(',');
                c.try_render(*d2, &mut k);
                (k, *p)
            })
            .collect();
        cells.sort();
        for (_, p) in cells {
            let (d1, d2) = ecfg.heap[&p];
            c.render(Data::Ptr(p), &mut out);
            out.push('=');
            c.render(d1, &mut out);
            out.push(',');
            c.render(d2, &mut out);
            out.push(';');
        }
        let mut kinds: Vec<String> = ecfg.faults.iter().map(|f| format!("{:?}", f.kind)).collect();
        kinds.sort();
        let _ = write!(out, "!{}", kinds.join(","));
    }
    out
}

/// Renumbers a trace's pointer atoms by first occurrence, preserving ports
/// and values. Two traces are equal up to pointer renaming exactly when
/// their canonical forms are equal.
pub fn canonical_trace(t: &Trace) -> Trace {
    let mut map: HashMap<PointerName, PointerName> = HashMap::new();
    let mut out = Vec::with_capacity(t.len());
    for ev in t {
        let payload = ev.msg.payload.map(|d| match d {
            Data::Ptr(p) => {
                let n = map.len() as u64;
                Data::Ptr(*map.entry(p).or_insert(PointerName(atom(CANON_NODE_TAG, n))))
            }
            other => other,
        });
        out.push(TraceEvent {
            pol: ev.pol,
            msg: Message {
                port: ev.msg.port,
                payload,
            },
        });
    }
    out
}

/// All configurations reachable from `start` by silent steps alone,
/// deduplicated up to pointer renaming relative to `trace`. The flag is
/// false when the closure was truncated by the budget.
pub fn silent_reach(
    net: &Net,
    trace: &Trace,
    start: &NetConfig,
    minter: &NameMinter,
    budget: &ExploreBudget,
) -> (Vec<NetConfig>, bool) {
    let mut seen: HashSet<String> = HashSet::new();
    let mut queue: VecDeque<NetConfig> = VecDeque::new();
    let mut out = Vec::new();
    let mut complete = true;
    seen.insert(state_key(trace, start));
    queue.push_back(start.clone());
    while let Some(cfg) = queue.pop_front() {
        out.push(cfg.clone());
        if out.len() >= budget.max_silent {
            complete = false;
            break;
        }
        for (label, succ) in net_step(net, &cfg, minter) {
            if label == StepLabel::Silent && seen.insert(state_key(trace, &succ)) {
                queue.push_back(succ);
            }
        }
    }
    (out, complete)
}

/// Result of a bounded exploration: the canonical observable traces and
/// whether every branch was explored to the requested depth.
#[derive(Clone, Debug)]
pub struct Exploration {
    pub traces: BTreeSet<Trace>,
    pub complete: bool,
}

impl Exploration {
    pub fn contains(&self, t: &Trace) -> bool {
        self.traces.contains(&canonical_trace(t))
    }
}

/// Explores all observable traces of length at most `k`, with environment
/// messages drawn from `env`. The result is prefix-closed and canonical.
pub fn denotation_upto(
    net: &Net,
    k: usize,
    env: &dyn InputGenerator,
    minter: &NameMinter,
    budget: &ExploreBudget,
) -> Exploration {
    let mut all: BTreeSet<Trace> = BTreeSet::new();
    all.insert(Vec::new());
    let mut complete = true;
    let init = initial_net(net);
    let mut frontier: HashMap<String, (Trace, NetConfig)> = HashMap::new();
    frontier.insert(state_key(&Vec::new(), &init), (Vec::new(), init));
    let mut states = 0usize;
    for _ in 0..k {
        let mut next: HashMap<String, (Trace, NetConfig)> = HashMap::new();
        'frontier: for (trace, cfg) in frontier.values() {
            let (closed, fin) = silent_reach(net, trace, cfg, minter, budget);
            complete &= fin;
            for c in &closed {
                states += 1;
                if states > budget.max_states {
                    complete = false;
                    break 'frontier;
                }
                for (label, succ) in net_step(net, c, minter) {
                    if let StepLabel::Output(m) = label {
                        let mut t2 = trace.clone();
                        t2.push(TraceEvent::output(m));
                        all.insert(canonical_trace(&t2));
                        next.entry(state_key(&t2, &succ)).or_insert((t2, succ));
                    }
                }
                for (port, payload) in env.inputs(net, trace, minter) {
                    if let Ok(succ) = net_inject(net, c, port, payload) {
                        let mut t2 = trace.clone();
                        t2.push(TraceEvent::input(Message { port, payload }));
                        all.insert(canonical_trace(&t2));
                        next.entry(state_key(&t2, &succ)).or_insert((t2, succ));
                    }
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    Exploration {
        traces: all,
        complete,
    }
}

/// A configuration reached by replaying a target trace, together with the
/// unifier from target pointer atoms to the atoms the net actually minted.
#[derive(Clone, Debug)]
pub struct DriveEnd {
    pub cfg: NetConfig,
    pub unifier: BTreeMap<PointerName, PointerName>,
}

/// Replays `target` against the net: inputs are injected with the net-side
/// images of their atoms, outputs must be matched by actual emissions up to
/// an injective renaming of pointer atoms extended on the fly. Returns every
/// distinct end state; empty when the net cannot produce the trace.
pub fn drive(
    net: &Net,
    target: &Trace,
    minter: &NameMinter,
    budget: &ExploreBudget,
) -> (Vec<DriveEnd>, bool) {
    #[derive(Clone)]
    struct St {
        pos: usize,
        cfg: NetConfig,
        fwd: BTreeMap<PointerName, PointerName>,
        image: BTreeSet<PointerName>,
    }
    fn key(st: &St, target: &Trace) -> String {
        let mut s = format!("{}:", st.pos);
        for (a, b) in &st.fwd {
            let _ = write!(s, "{a}>{b},");
        }
        s.push('|');
        s + &state_key(&target[..st.pos].to_vec(), &st.cfg)
    }
    let mut ends = Vec::new();
    let mut end_keys = HashSet::new();
    let mut complete = true;
    let mut seen = HashSet::new();
    let mut queue = VecDeque::new();
    let start = St {
        pos: 0,
        cfg: initial_net(net),
        fwd: BTreeMap::new(),
        image: BTreeSet::new(),
    };
    seen.insert(key(&start, target));
    queue.push_back(start);
    let mut visited = 0usize;
    while let Some(st) = queue.pop_front() {
        visited += 1;
        if visited > budget.max_states {
            complete = false;
            break;
        }
        if st.pos == target.len() {
            let k = state_key(target, &st.cfg);
            if end_keys.insert(k) {
                ends.push(DriveEnd {
                    cfg: st.cfg,
                    unifier: st.fwd,
                });
            }
            continue;
        }
        let ev = &target[st.pos];
        match ev.pol {
            Polarity::O => {
                let mut st2 = st.clone();
                let mut payload = [Data::Empty; 3];
                for (i, slot) in ev.msg.payload.iter().enumerate() {
                    payload[i] = match slot {
                        Data::Ptr(p) => {
                            let img = match st2.fwd.get(p) {
                                Some(&x) => x,
                                None => {
                                    let x = minter.fresh_pointer();
                                    st2.fwd.insert(*p, x);
                                    st2.image.insert(x);
                                    x
                                }
                            };
                            Data::Ptr(img)
                        }
                        other => *other,
                    };
                }
                if let Ok(cfg2) = net_inject(net, &st2.cfg, ev.msg.port, payload) {
                    st2.cfg = cfg2;
                    st2.pos += 1;
                    if seen.insert(key(&st2, target)) {
                        queue.push_back(st2);
                    }
                }
            }
            Polarity::P => {
                for (label, succ) in net_step(net, &st.cfg, minter) {
                    match label {
                        StepLabel::Silent => {
                            let st2 = St {
                                cfg: succ,
                                ..st.clone()
                            };
                            if seen.insert(key(&st2, target)) {
                                queue.push_back(st2);
                            }
                        }
                        StepLabel::Output(m) => {
                            if m.port != ev.msg.port {
                                continue;
                            }
                            let mut st2 = St {
                                cfg: succ,
                                ..st.clone()
                            };
                            let mut ok = true;
                            for (i, slot) in ev.msg.payload.iter().enumerate() {
                                match (slot, m.payload[i]) {
                                    (Data::Empty, Data::Empty) => {}
                                    (Data::Int(a), Data::Int(b)) if *a == b => {}
                                    (Data::Ptr(p), Data::Ptr(x)) => match st2.fwd.get(p) {
                                        Some(&y) if y == x => {}
                                        Some(_) => {
                                            ok = false;
                                            break;
                                        }
                                        None => {
                                            if st2.image.contains(&x) {
                                                ok = false;
                                                break;
                                            }
                                            st2.fwd.insert(*p, x);
                                            st2.image.insert(x);
                                        }
                                    },
                                    _ => {
                                        ok = false;
                                        break;
                                    }
                                }
                            }
                            if ok {
                                st2.pos += 1;
                                if seen.insert(key(&st2, target)) {
                                    queue.push_back(st2);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (ends, complete)
}

/// Every output the net can emit after the given configuration, paired with
/// the configuration left behind. Outputs reachable through silent steps
/// are included.
pub fn observable_outputs(
    net: &Net,
    trace: &Trace,
    cfg: &NetConfig,
    minter: &NameMinter,
    budget: &ExploreBudget,
) -> (Vec<(Message, NetConfig)>, bool) {
    let (closed, complete) = silent_reach(net, trace, cfg, minter, budget);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for c in &closed {
        for (label, succ) in net_step(net, c, minter) {
            if let StepLabel::Output(m) = label {
                let mut t2 = trace.clone();
                t2.push(TraceEvent::output(m));
                if seen.insert(state_key(&t2, &succ)) {
                    out.push((m, succ));
                }
            }
        }
    }
    (out, complete)
}
