//! Networks of engines: a connectivity bijection over port names, the
//! net-level transition rules, and the wiring algebra (identity nets,
//! splicing composition, tensor, sinks, projections, engine fusion, and
//! structural equivalence).

use crate::hram::{
    engine_from_json, engine_receive, engine_step, engine_to_json, initial_engine,
    interface_from_json, interface_to_json, validate_engine, Code, CodecError, Engine,
    EngineConfig, EngineError, Message, Payload, StepLabel,
};
use crate::nominal::{atom_hex, parse_atom_hex, Interface, NameMinter, Polarity, PortName, Renaming};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// A net: engines, a wiring over all port names, and the external interface.
///
/// The wiring maps every emitting port (engine outputs and external inputs)
/// to exactly one receiving port (engine inputs and external outputs).
/// `placements` names the logical node hosting each engine; `None` means the
/// root node.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Net {
    pub engines: Vec<Engine>,
    pub placements: Vec<Option<String>>,
    pub chi: BTreeMap<PortName, PortName>,
    pub external: Interface,
}

/// Run-time state of a net: one configuration per engine plus the multiset
/// of in-flight messages.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NetConfig {
    pub engines: Vec<EngineConfig>,
    pub pending: Vec<Message>,
}

impl NetConfig {
    /// No runnable work: every engine idle and nothing in flight.
    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.engines.iter().all(|e| e.threads.is_empty())
    }

    pub fn fault_count(&self) -> usize {
        self.engines.iter().map(|e| e.faults.len()).sum()
    }
}

/// One observable event: an input to the net or an output from it.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TraceEvent {
    pub pol: Polarity,
    pub msg: Message,
}

impl TraceEvent {
    pub fn input(msg: Message) -> TraceEvent {
        TraceEvent {
            pol: Polarity::O,
            msg,
        }
    }

    pub fn output(msg: Message) -> TraceEvent {
        TraceEvent {
            pol: Polarity::P,
            msg,
        }
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.pol, self.msg)
    }
}

/// A finite sequence of observable events.
pub type Trace = Vec<TraceEvent>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("engine {0}: {1:?}")]
    Engine(usize, Vec<EngineError>),
    #[error("placements and engines differ in length")]
    PlacementArity,
    #[error("port name {0} used by two components")]
    NameClash(PortName),
    #[error("wiring misses emitting port {0}")]
    ChiMissing(PortName),
    #[error("wiring covers {0} which is not an emitting port")]
    ChiExtra(PortName),
    #[error("wiring sends two ports to {0}")]
    ChiNotInjective(PortName),
    #[error("wiring target {0} is not a receiving port")]
    ChiBadTarget(PortName),
    #[error("receiving port {0} is not wired")]
    ChiNotSurjective(PortName),
    #[error("interfaces do not match: {0}")]
    ShapeMismatch(String),
    #[error("wiring splice loops through hidden port {0}")]
    ChiCycle(PortName),
    #[error("expected exactly two engines")]
    NotTwoEngines,
    #[error("fused engines have different placements")]
    PlacementMismatch,
    #[error("{0} is not an external input port")]
    NotAnInput(PortName),
}

fn engine_outputs(net: &Net) -> impl Iterator<Item = PortName> + '_ {
    net.engines
        .iter()
        .flat_map(|e| e.interface.side(Polarity::P))
}

fn engine_inputs(net: &Net) -> impl Iterator<Item = PortName> + '_ {
    net.engines
        .iter()
        .flat_map(|e| e.interface.side(Polarity::O))
}

/// Checks name disjointness, engine validity, and that the wiring is a
/// bijection from emitting ports onto receiving ports.
pub fn validate_net(net: &Net) -> Result<(), Vec<NetError>> {
    let mut errs = Vec::new();
    if net.placements.len() != net.engines.len() {
        errs.push(NetError::PlacementArity);
    }
    let mut seen: BTreeSet<PortName> = BTreeSet::new();
    for support in net
        .engines
        .iter()
        .map(|e| e.interface.support())
        .chain([net.external.support()])
    {
        for p in support {
            if !seen.insert(p) {
                errs.push(NetError::NameClash(p));
            }
        }
    }
    for (i, e) in net.engines.iter().enumerate() {
        if let Err(es) = validate_engine(e) {
            errs.push(NetError::Engine(i, es));
        }
    }
    let dom: BTreeSet<PortName> = net
        .external
        .side(Polarity::O)
        .into_iter()
        .chain(engine_outputs(net))
        .collect();
    let cod: BTreeSet<PortName> = net
        .external
        .side(Polarity::P)
        .into_iter()
        .chain(engine_inputs(net))
        .collect();
    for p in &dom {
        if !net.chi.contains_key(p) {
            errs.push(NetError::ChiMissing(*p));
        }
    }
    let mut hit: BTreeSet<PortName> = BTreeSet::new();
    for (src, dst) in &net.chi {
        if !dom.contains(src) {
            errs.push(NetError::ChiExtra(*src));
        }
        if !cod.contains(dst) {
            errs.push(NetError::ChiBadTarget(*dst));
        }
        if !hit.insert(*dst) {
            errs.push(NetError::ChiNotInjective(*dst));
        }
    }
    for p in &cod {
        if !hit.contains(p) {
            errs.push(NetError::ChiNotSurjective(*p));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// Wraps one engine as a net whose external interface is a fresh copy of
/// the engine's own, wired straight through. Returns the renaming from
/// engine ports to external ports.
pub fn singleton(e: &Engine, minter: &NameMinter) -> (Net, Renaming<PortName>) {
    let (external, pi) = minter.fresh_copy(&e.interface);
    let mut chi = BTreeMap::new();
    for (p, pol) in e.interface.iter() {
        match pol {
            Polarity::P => {
                chi.insert(p, pi.apply(p));
            }
            Polarity::O => {
                chi.insert(pi.apply(p), p);
            }
        }
    }
    (
        Net {
            engines: vec![e.clone()],
            placements: vec![None],
            chi,
            external,
        },
        pi,
    )
}

/// All engines idle, nothing in flight.
pub fn initial_net(net: &Net) -> NetConfig {
    NetConfig {
        engines: net.engines.iter().map(|_| initial_engine()).collect(),
        pending: Vec::new(),
    }
}

/// Routes an environment message arriving at an external input port into
/// the net's in-flight multiset.
pub fn net_inject(
    net: &Net,
    cfg: &NetConfig,
    port: PortName,
    payload: Payload,
) -> Result<NetConfig, NetError> {
    if !net.external.has(Polarity::O, port) {
        return Err(NetError::NotAnInput(port));
    }
    let dest = *net.chi.get(&port).ok_or(NetError::ChiMissing(port))?;
    let mut next = cfg.clone();
    next.pending.push(Message {
        port: dest,
        payload,
    });
    Ok(next)
}

/// All one-step successors: engine steps (outputs join the in-flight set),
/// delivery of in-flight messages to engine inputs, and emission of
/// in-flight messages sitting at external output ports.
pub fn net_step(net: &Net, cfg: &NetConfig, minter: &NameMinter) -> Vec<(StepLabel, NetConfig)> {
    let mut out = Vec::new();
    for (i, e) in net.engines.iter().enumerate() {
        for (label, ecfg) in engine_step(e, &net.chi, &cfg.engines[i], minter) {
            let mut next = cfg.clone();
            next.engines[i] = ecfg;
            match label {
                StepLabel::Silent => out.push((StepLabel::Silent, next)),
                StepLabel::Output(m) => {
                    next.pending.push(m);
                    out.push((StepLabel::Silent, next));
                }
            }
        }
    }
    for (k, m) in cfg.pending.iter().enumerate() {
        if net.external.has(Polarity::P, m.port) {
            let mut next = cfg.clone();
            next.pending.remove(k);
            out.push((StepLabel::Output(*m), next));
            continue;
        }
        for (i, e) in net.engines.iter().enumerate() {
            if e.interface.has(Polarity::O, m.port) {
                if let Some(ecfg) = engine_receive(e, &cfg.engines[i], m) {
                    let mut next = cfg.clone();
                    next.pending.remove(k);
                    next.engines[i] = ecfg;
                    out.push((StepLabel::Silent, next));
                }
                break;
            }
        }
    }
    out
}

/// The engine-free net: unit for the tensor.
pub fn empty_net() -> Net {
    Net {
        engines: Vec::new(),
        placements: Vec::new(),
        chi: BTreeMap::new(),
        external: Interface::empty(),
    }
}

/// Pure wiring from an interface to a fresh copy of itself: every input on
/// one copy is wired to the matching output on the other. Returns the copy
/// renaming.
pub fn identity_net(a: &Interface, minter: &NameMinter) -> (Net, Renaming<PortName>) {
    let (copy, pi) = minter.fresh_copy(a);
    let mut chi = BTreeMap::new();
    let mut external = Interface::empty();
    for (p, pol) in a.iter() {
        external.insert(p, pol.dual());
        match pol {
            Polarity::P => {
                chi.insert(p, pi.apply(p));
            }
            Polarity::O => {
                chi.insert(pi.apply(p), p);
            }
        }
    }
    for (p, pol) in copy.iter() {
        external.insert(p, pol);
    }
    (
        Net {
            engines: Vec::new(),
            placements: Vec::new(),
            chi,
            external,
        },
        pi,
    )
}

fn net_support(net: &Net) -> BTreeSet<PortName> {
    let mut s = net.external.support();
    for e in &net.engines {
        s.extend(e.interface.support());
    }
    s
}

/// Plugs two nets together along the ports matched by `pi`, hiding them.
///
/// Each pair must join an external port of `f` to an external port of `g`
/// of opposite polarity. The spliced wiring follows chains through the
/// hidden ports until they land on a surviving port.
pub fn compose_nets(f: &Net, g: &Net, pi: &Renaming<PortName>) -> Result<Net, NetError> {
    let fs = net_support(f);
    let gs = net_support(g);
    if let Some(p) = fs.intersection(&gs).next() {
        return Err(NetError::NameClash(*p));
    }
    for (b, b2) in pi.support() {
        let lb = f
            .external
            .polarity(b)
            .ok_or(NetError::ShapeMismatch(format!("{b} not external in left net")))?;
        let lb2 = g
            .external
            .polarity(b2)
            .ok_or(NetError::ShapeMismatch(format!("{b2} not external in right net")))?;
        if lb2 != lb.dual() {
            return Err(NetError::ShapeMismatch(format!(
                "hidden ports {b} and {b2} have equal polarity"
            )));
        }
    }
    let hidden_f: BTreeSet<PortName> = pi.support().map(|(b, _)| b).collect();
    let hidden_g: BTreeSet<PortName> = pi.support().map(|(_, b2)| b2).collect();
    let mut external = Interface::empty();
    for (p, pol) in f.external.iter() {
        if !hidden_f.contains(&p) {
            external.insert(p, pol);
        }
    }
    for (p, pol) in g.external.iter() {
        if !hidden_g.contains(&p) {
            external.insert(p, pol);
        }
    }

    #[derive(Clone, Copy, PartialEq, Eq)]
    enum Side {
        F,
        G,
    }
    let follow = |mut side: Side, mut x: PortName| -> Result<PortName, NetError> {
        let bound = 2 * pi.len() + 2;
        for _ in 0..bound {
            let y = match side {
                Side::F => f.chi.get(&x),
                Side::G => g.chi.get(&x),
            }
            .copied()
            .ok_or(NetError::ChiMissing(x))?;
            match side {
                Side::F => match pi.maps(y) {
                    Some(z) => {
                        x = z;
                        side = Side::G;
                    }
                    None => return Ok(y),
                },
                Side::G => match pi.maps_back(y) {
                    Some(z) => {
                        x = z;
                        side = Side::F;
                    }
                    None => return Ok(y),
                },
            }
        }
        Err(NetError::ChiCycle(x))
    };

    let mut chi = BTreeMap::new();
    for (side, net) in [(Side::F, f), (Side::G, g)] {
        for p in engine_outputs(net) {
            chi.insert(p, follow(side, p)?);
        }
        for p in net.external.side(Polarity::O) {
            if !match side {
                Side::F => hidden_f.contains(&p),
                Side::G => hidden_g.contains(&p),
            } {
                chi.insert(p, follow(side, p)?);
            }
        }
    }

    Ok(Net {
        engines: f.engines.iter().chain(&g.engines).cloned().collect(),
        placements: f.placements.iter().chain(&g.placements).cloned().collect(),
        chi,
        external,
    })
}

/// Disjoint union of two nets.
pub fn tensor_nets(f: &Net, g: &Net) -> Result<Net, NetError> {
    let fs = net_support(f);
    let gs = net_support(g);
    if let Some(p) = fs.intersection(&gs).next() {
        return Err(NetError::NameClash(*p));
    }
    let external = f
        .external
        .tensor(&g.external)
        .map_err(|_| NetError::NameClash(PortName(0)))?;
    let mut chi = f.chi.clone();
    chi.extend(g.chi.iter().map(|(a, b)| (*a, *b)));
    Ok(Net {
        engines: f.engines.iter().chain(&g.engines).cloned().collect(),
        placements: f.placements.iter().chain(&g.placements).cloned().collect(),
        chi,
        external,
    })
}

/// Re-brackets a net's interface around the given component. Interfaces are
/// flat port sets, so this only verifies the decomposition; the wiring is
/// untouched.
pub fn curry_net(f: &Net, moved: &Interface) -> Result<Net, NetError> {
    for (p, pol) in moved.iter() {
        if f.external.polarity(p) != Some(pol.dual()) {
            return Err(NetError::ShapeMismatch(format!(
                "{p} does not occur dualized in the external interface"
            )));
        }
    }
    Ok(f.clone())
}

/// Inverse re-bracketing; see [`curry_net`].
pub fn uncurry_net(f: &Net, moved: &Interface) -> Result<Net, NetError> {
    curry_net(f, moved)
}

/// A net absorbing every input of `a` and emitting nothing: its external
/// interface is the dual of `a`, its single engine answers each input by
/// halting.
pub fn sink(a: &Interface, minter: &NameMinter) -> Net {
    let external = a.dual();
    let (inner, rho) = minter.fresh_copy(&external);
    let mut chi = BTreeMap::new();
    let mut port_map = BTreeMap::new();
    for (p, pol) in external.iter() {
        match pol {
            Polarity::O => {
                chi.insert(p, rho.apply(p));
                port_map.insert(rho.apply(p), Code::End);
            }
            Polarity::P => {
                chi.insert(rho.apply(p), p);
            }
        }
    }
    Net {
        engines: vec![Engine {
            interface: inner,
            port_map,
        }],
        placements: vec![None],
        chi,
        external,
    }
}

/// Identity on the chosen component tensored with sinks on the rest: the
/// resulting net forwards component `i` and absorbs every other input.
pub fn projection(i: usize, parts: &[Interface], minter: &NameMinter) -> Result<Net, NetError> {
    let mut acc = empty_net();
    for (j, a) in parts.iter().enumerate() {
        let piece = if j == i {
            identity_net(a, minter).0
        } else {
            sink(a, minter)
        };
        acc = tensor_nets(&acc, &piece)?;
    }
    Ok(acc)
}

/// Replaces the engines at the given indices by their union. Wiring and
/// external interface are unchanged, so messages between the fused engines
/// become jumps.
pub fn fuse_engines(net: &Net, group: &[usize]) -> Result<Net, NetError> {
    if group.is_empty() {
        return Ok(net.clone());
    }
    let placement = net.placements[group[0]].clone();
    let mut interface = Interface::empty();
    let mut port_map = BTreeMap::new();
    for &i in group {
        if net.placements[i] != placement {
            return Err(NetError::PlacementMismatch);
        }
        interface = interface
            .tensor(&net.engines[i].interface)
            .map_err(|_| NetError::NameClash(PortName(0)))?;
        port_map.extend(net.engines[i].port_map.clone());
    }
    let fused = Engine {
        interface,
        port_map,
    };
    let keep: Vec<usize> = (0..net.engines.len())
        .filter(|i| !group.contains(i))
        .collect();
    let mut engines = vec![fused];
    let mut placements = vec![placement];
    for i in keep {
        engines.push(net.engines[i].clone());
        placements.push(net.placements[i].clone());
    }
    Ok(Net {
        engines,
        placements,
        chi: net.chi.clone(),
        external: net.external.clone(),
    })
}

/// Fuses the only two engines of a net into one.
pub fn combine_engines(net: &Net) -> Result<Net, NetError> {
    if net.engines.len() != 2 {
        return Err(NetError::NotTwoEngines);
    }
    fuse_engines(net, &[0, 1])
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum PortKind {
    Ext(Polarity),
    Eng(usize, Polarity),
}

fn port_kinds(net: &Net) -> BTreeMap<PortName, PortKind> {
    let mut m = BTreeMap::new();
    for (p, pol) in net.external.iter() {
        m.insert(p, PortKind::Ext(pol));
    }
    for (i, e) in net.engines.iter().enumerate() {
        for (p, pol) in e.interface.iter() {
            m.insert(p, PortKind::Eng(i, pol));
        }
    }
    m
}

fn code_pairs(a: &Code, b: &Code, out: &mut Vec<(PortName, PortName)>) -> bool {
    match (a, b) {
        (Code::Seq(i1, k1), Code::Seq(i2, k2)) => i1 == i2 && code_pairs(k1, k2, out),
        (Code::IfZero(r1, a1, b1), Code::IfZero(r2, a2, b2)) => {
            r1 == r2 && code_pairs(a1, a2, out) && code_pairs(b1, b2, out)
        }
        (Code::Spark(p), Code::Spark(q)) => {
            out.push((*p, *q));
            true
        }
        #[cfg(feature = "par")]
        (Code::Fork(p, k1), Code::Fork(q, k2)) => {
            out.push((*p, *q));
            code_pairs(k1, k2, out)
        }
        (Code::End, Code::End) => true,
        _ => false,
    }
}

#[derive(Clone, Default)]
struct IsoState {
    fwd: BTreeMap<PortName, PortName>,
    bwd: BTreeMap<PortName, PortName>,
    eng: BTreeMap<usize, usize>,
    eng_rev: BTreeMap<usize, usize>,
}

struct IsoSearch<'a> {
    s1: &'a Net,
    s2: &'a Net,
    kinds1: BTreeMap<PortName, PortKind>,
    kinds2: BTreeMap<PortName, PortKind>,
    chi1_rev: BTreeMap<PortName, PortName>,
    chi2_rev: BTreeMap<PortName, PortName>,
    ports1: Vec<PortName>,
}

impl IsoSearch<'_> {
    /// Binds `x ↦ y` and everything it forces (wiring neighbours, code
    /// spark targets); returns false on conflict.
    fn bind(&self, st: &mut IsoState, x: PortName, y: PortName) -> bool {
        let mut work = vec![(x, y)];
        while let Some((x, y)) = work.pop() {
            if let Some(&y0) = st.fwd.get(&x) {
                if y0 != y {
                    return false;
                }
                continue;
            }
            if st.bwd.contains_key(&y) {
                return false;
            }
            let (k1, k2) = match (self.kinds1.get(&x), self.kinds2.get(&y)) {
                (Some(a), Some(b)) => (*a, *b),
                _ => return false,
            };
            match (k1, k2) {
                (PortKind::Ext(l1), PortKind::Ext(l2)) => {
                    if l1 != l2 {
                        return false;
                    }
                }
                (PortKind::Eng(i, l1), PortKind::Eng(j, l2)) => {
                    if l1 != l2 {
                        return false;
                    }
                    match (st.eng.get(&i), st.eng_rev.get(&j)) {
                        (Some(&j0), _) if j0 != j => return false,
                        (_, Some(&i0)) if i0 != i => return false,
                        (None, None) => {
                            let e1 = &self.s1.engines[i];
                            let e2 = &self.s2.engines[j];
                            if e1.interface.side(Polarity::O).len()
                                != e2.interface.side(Polarity::O).len()
                                || e1.interface.side(Polarity::P).len()
                                    != e2.interface.side(Polarity::P).len()
                            {
                                return false;
                            }
                            st.eng.insert(i, j);
                            st.eng_rev.insert(j, i);
                        }
                        _ => {}
                    }
                    match (e1_port_code(self.s1, i, x), e1_port_code(self.s2, j, y)) {
                        (Some(c1), Some(c2)) => {
                            let mut pairs = Vec::new();
                            if !code_pairs(c1, c2, &mut pairs) {
                                return false;
                            }
                            work.extend(pairs);
                        }
                        (None, None) => {}
                        _ => return false,
                    }
                }
                _ => return false,
            }
            st.fwd.insert(x, y);
            st.bwd.insert(y, x);
            match (self.s1.chi.get(&x), self.s2.chi.get(&y)) {
                (Some(&a), Some(&b)) => work.push((a, b)),
                (None, None) => {}
                _ => return false,
            }
            match (self.chi1_rev.get(&x), self.chi2_rev.get(&y)) {
                (Some(&a), Some(&b)) => work.push((a, b)),
                (None, None) => {}
                _ => return false,
            }
        }
        true
    }

    fn search(&self, st: IsoState) -> Option<IsoState> {
        let next = self.ports1.iter().find(|p| !st.fwd.contains_key(p));
        let Some(&x) = next else {
            return Some(st);
        };
        for &y in self.kinds2.keys() {
            if st.bwd.contains_key(&y) {
                continue;
            }
            let mut trial = st.clone();
            if self.bind(&mut trial, x, y) {
                if let Some(done) = self.search(trial) {
                    return Some(done);
                }
            }
        }
        None
    }
}

fn e1_port_code(net: &Net, engine: usize, port: PortName) -> Option<&Code> {
    net.engines[engine].port_map.get(&port)
}

/// Searches for a renaming of all port names turning one net into the
/// other: engines match up to the renaming (including their code), the
/// external interfaces correspond, and the wirings commute.
pub fn structurally_equivalent(s1: &Net, s2: &Net) -> Option<Renaming<PortName>> {
    if s1.engines.len() != s2.engines.len()
        || s1.chi.len() != s2.chi.len()
        || s1.external.side(Polarity::O).len() != s2.external.side(Polarity::O).len()
        || s1.external.side(Polarity::P).len() != s2.external.side(Polarity::P).len()
    {
        return None;
    }
    let kinds1 = port_kinds(s1);
    let kinds2 = port_kinds(s2);
    if kinds1.len() != kinds2.len() {
        return None;
    }
    let search = IsoSearch {
        s1,
        s2,
        chi1_rev: s1.chi.iter().map(|(a, b)| (*b, *a)).collect(),
        chi2_rev: s2.chi.iter().map(|(a, b)| (*b, *a)).collect(),
        ports1: kinds1.keys().copied().collect(),
        kinds1,
        kinds2,
    };
    let st = search.search(IsoState::default())?;
    for (x, y) in &st.fwd {
        if let Some(a) = s1.chi.get(x) {
            if s2.chi.get(y) != Some(&st.fwd[a]) {
                return None;
            }
        }
    }
    Renaming::from_pairs(st.fwd).ok()
}

/// Renders a net as one document: engines (each with its placement), the
/// wiring as a name-to-name table, and the external interface.
pub fn net_to_json(net: &Net) -> Value {
    let engines: Vec<Value> = net
        .engines
        .iter()
        .zip(&net.placements)
        .map(|(e, pl)| {
            let mut obj = engine_to_json(e);
            obj["placement"] = json!(pl);
            obj
        })
        .collect();
    let chi: serde_json::Map<String, Value> = net
        .chi
        .iter()
        .map(|(a, b)| (atom_hex(a.0), Value::String(atom_hex(b.0))))
        .collect();
    json!({
        "engines": engines,
        "chi": chi,
        "external": interface_to_json(&net.external),
    })
}

/// Parses a net rendered by [`net_to_json`].
pub fn net_from_json(v: &Value) -> Result<Net, CodecError> {
    let rows = v
        .get("engines")
        .and_then(Value::as_array)
        .ok_or_else(|| CodecError("net without an engine list".to_string()))?;
    let mut engines = Vec::new();
    let mut placements = Vec::new();
    for row in rows {
        engines.push(engine_from_json(row)?);
        placements.push(match row.get("placement") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => return Err(CodecError(format!("bad placement {v}"))),
        });
    }
    let chi_rows = v
        .get("chi")
        .and_then(Value::as_object)
        .ok_or_else(|| CodecError("net without a wiring table".to_string()))?;
    let mut chi = BTreeMap::new();
    for (a, b) in chi_rows {
        let from = parse_atom_hex(a)
            .map(PortName)
            .map_err(|e| CodecError(e.to_string()))?;
        let to = b
            .as_str()
            .and_then(|s| parse_atom_hex(s).ok())
            .map(PortName)
            .ok_or_else(|| CodecError(format!("bad wiring target {b}")))?;
        chi.insert(from, to);
    }
    let external = interface_from_json(
        v.get("external")
            .ok_or_else(|| CodecError("net without an external interface".to_string()))?,
    )?;
    Ok(Net {
        engines,
        placements,
        chi,
        external,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hram::{Data, Instr, R0, R1};
    use crate::nominal::NameMinter;

    fn m() -> NameMinter {
        NameMinter::new(7)
    }

    fn relay_engine(minter: &NameMinter) -> Engine {
        let q = minter.fresh_port();
        let a = minter.fresh_port();
        Engine {
            interface: Interface::from_pairs([(q, Polarity::O), (a, Polarity::P)]),
            port_map: [(q, Code::Spark(a))].into_iter().collect(),
        }
    }

    #[test]
    fn singleton_wires_both_directions() {
        let minter = m();
        let e = relay_engine(&minter);
        let q = e.interface.side(Polarity::O)[0];
        let a = e.interface.side(Polarity::P)[0];
        let (net, pi) = singleton(&e, &minter);
        assert!(validate_net(&net).is_ok());
        assert_eq!(net.external.polarity(pi.apply(q)), Some(Polarity::O));
        assert_eq!(net.external.polarity(pi.apply(a)), Some(Polarity::P));
        assert_eq!(net.chi[&a], pi.apply(a));
        assert_eq!(net.chi[&pi.apply(q)], q);
    }

    #[test]
    fn validate_rejects_duplicate_wiring_targets_and_name_clashes() {
        let minter = m();
        let e = relay_engine(&minter);
        let (mut net, _) = singleton(&e, &minter);
        let q = e.interface.side(Polarity::O)[0];
        let a = e.interface.side(Polarity::P)[0];
        let ext_q = *net.chi.get(&a).unwrap();
        net.chi.insert(ext_q, q);
        let errs = validate_net(&net).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| matches!(e, NetError::ChiNotInjective(_))));

        let (mut net2, _) = singleton(&e, &minter);
        net2.external.insert(q, Polarity::O);
        let errs = validate_net(&net2).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, NetError::NameClash(_))));
    }

    #[test]
    fn relay_chain_moves_one_message_through_two_engines() {
        let minter = m();
        let e1 = relay_engine(&minter);
        let e2 = relay_engine(&minter);
        let q1 = e1.interface.side(Polarity::O)[0];
        let a1 = e1.interface.side(Polarity::P)[0];
        let q2 = e2.interface.side(Polarity::O)[0];
        let a2 = e2.interface.side(Polarity::P)[0];
        let x = minter.fresh_port();
        let y = minter.fresh_port();
        let net = Net {
            engines: vec![e1, e2],
            placements: vec![None, None],
            chi: [(x, q1), (a1, q2), (a2, y)].into_iter().collect(),
            external: Interface::from_pairs([(x, Polarity::O), (y, Polarity::P)]),
        };
        assert!(validate_net(&net).is_ok());

        let payload = [Data::Int(5), Data::Empty, Data::Empty];
        let mut cfg = net_inject(&net, &initial_net(&net), x, payload).unwrap();
        assert_eq!(cfg.pending, vec![Message { port: q1, payload }]);
        let mut outputs = Vec::new();
        for _ in 0..8 {
            let succ = net_step(&net, &cfg, &minter);
            if succ.is_empty() {
                break;
            }
            assert_eq!(succ.len(), 1);
            let (label, next) = succ.into_iter().next().unwrap();
            let delta = next.pending.len() as i64 - cfg.pending.len() as i64;
            assert!(delta.abs() <= 1);
            if let StepLabel::Output(msg) = label {
                outputs.push(msg);
            }
            cfg = next;
        }
        assert_eq!(outputs, vec![Message { port: y, payload }]);
        assert!(cfg.is_quiescent());
    }

    #[test]
    fn identity_net_echoes_inputs_through_the_wiring() {
        let minter = m();
        let a = Interface::from_pairs([
            (minter.fresh_port(), Polarity::O),
            (minter.fresh_port(), Polarity::P),
        ]);
        let (net, pi) = identity_net(&a, &minter);
        assert!(validate_net(&net).is_ok());
        assert!(net.engines.is_empty());
        let q = a.side(Polarity::O)[0];
        let p = a.side(Polarity::P)[0];
        let payload = [Data::Int(1), Data::Empty, Data::Empty];
        let cfg = net_inject(&net, &initial_net(&net), pi.apply(q), payload).unwrap();
        let succ = net_step(&net, &cfg, &minter);
        assert_eq!(succ.len(), 1);
        assert_eq!(
            succ[0].0,
            StepLabel::Output(Message { port: q, payload })
        );
        let cfg2 = net_inject(&net, &initial_net(&net), p, payload).unwrap();
        let succ2 = net_step(&net, &cfg2, &minter);
        assert_eq!(
            succ2[0].0,
            StepLabel::Output(Message {
                port: pi.apply(p),
                payload
            })
        );
    }

    #[test]
    fn compose_splices_wire_chains() {
        let minter = m();
        let a = Interface::from_pairs([
            (minter.fresh_port(), Polarity::O),
            (minter.fresh_port(), Polarity::P),
        ]);
        let (id1, pi1) = identity_net(&a, &minter);
        let a2 = Interface::from_pairs(
            [
                (minter.fresh_port(), Polarity::O),
                (minter.fresh_port(), Polarity::P),
            ],
        );
        let (id2, _) = identity_net(&a2, &minter);
        let mut link = Renaming::identity();
        for (p, pol) in a.iter() {
            let img = pi1.apply(p);
            let partner = a2.side(pol)[0];
            assert!(link.bind(img, partner));
        }
        let net = compose_nets(&id1, &id2, &link).unwrap();
        assert!(validate_net(&net).is_ok());
        assert!(net.engines.is_empty());
        let (id_fresh, _) = identity_net(
            &Interface::from_pairs([
                (minter.fresh_port(), Polarity::O),
                (minter.fresh_port(), Polarity::P),
            ]),
            &minter,
        );
        assert!(structurally_equivalent(&net, &id_fresh).is_some());
    }

    #[test]
    fn compose_rejects_equal_polarity_links() {
        let minter = m();
        let a = Interface::from_pairs([(minter.fresh_port(), Polarity::O)]);
        let (id1, pi1) = identity_net(&a, &minter);
        let b = Interface::from_pairs([(minter.fresh_port(), Polarity::O)]);
        let (id2, pi2) = identity_net(&b, &minter);
        let q = a.side(Polarity::O)[0];
        let r = b.side(Polarity::O)[0];
        let mut link = Renaming::identity();
        assert!(link.bind(pi1.apply(q), pi2.apply(r)));
        let err = compose_nets(&id1, &id2, &link);
        assert!(matches!(err, Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn tensor_counts_engines_and_rejects_overlap() {
        let minter = m();
        let e1 = relay_engine(&minter);
        let e2 = relay_engine(&minter);
        let (n1, _) = singleton(&e1, &minter);
        let (n2, _) = singleton(&e2, &minter);
        let t = tensor_nets(&n1, &n2).unwrap();
        assert_eq!(t.engines.len(), 2);
        assert!(validate_net(&t).is_ok());
        assert!(matches!(tensor_nets(&n1, &n1), Err(NetError::NameClash(_))));
        let u = tensor_nets(&t, &empty_net()).unwrap();
        assert_eq!(u, t);
    }

    #[test]
    fn sink_absorbs_inputs_without_output() {
        let minter = m();
        let a = Interface::from_pairs([
            (minter.fresh_port(), Polarity::P),
            (minter.fresh_port(), Polarity::O),
        ]);
        let net = sink(&a, &minter);
        assert!(validate_net(&net).is_ok());
        let inp = net.external.side(Polarity::O)[0];
        let cfg = net_inject(
            &net,
            &initial_net(&net),
            inp,
            [Data::Empty, Data::Empty, Data::Empty],
        )
        .unwrap();
        let succ = net_step(&net, &cfg, &minter);
        assert_eq!(succ.len(), 1);
        let (label, cfg2) = succ.into_iter().next().unwrap();
        assert_eq!(label, StepLabel::Silent);
        let succ2 = net_step(&net, &cfg2, &minter);
        assert_eq!(succ2.len(), 1);
        assert_eq!(succ2[0].0, StepLabel::Silent);
        assert!(succ2[0].1.is_quiescent());
    }

    #[test]
    fn projection_validates() {
        let minter = m();
        let a1 = Interface::from_pairs([
            (minter.fresh_port(), Polarity::O),
            (minter.fresh_port(), Polarity::P),
        ]);
        let a2 = Interface::from_pairs([
            (minter.fresh_port(), Polarity::O),
            (minter.fresh_port(), Polarity::P),
        ]);
        let net = projection(0, &[a1.clone(), a2.clone()], &minter).unwrap();
        assert!(validate_net(&net).is_ok());
        assert_eq!(net.engines.len(), 1);
    }

    #[test]
    fn fusing_two_engines_turns_their_messages_into_jumps() {
        let minter = m();
        let e1 = relay_engine(&minter);
        let e2 = relay_engine(&minter);
        let q1 = e1.interface.side(Polarity::O)[0];
        let a1 = e1.interface.side(Polarity::P)[0];
        let q2 = e2.interface.side(Polarity::O)[0];
        let a2 = e2.interface.side(Polarity::P)[0];
        let x = minter.fresh_port();
        let y = minter.fresh_port();
        let net = Net {
            engines: vec![e1, e2],
            placements: vec![None, None],
            chi: [(x, q1), (a1, q2), (a2, y)].into_iter().collect(),
            external: Interface::from_pairs([(x, Polarity::O), (y, Polarity::P)]),
        };
        let fused = combine_engines(&net).unwrap();
        assert_eq!(fused.engines.len(), 1);
        assert_eq!(fused.chi, net.chi);
        assert_eq!(fused.external, net.external);
        assert!(validate_net(&fused).is_ok());

        let payload = [Data::Int(9), Data::Empty, Data::Empty];
        let mut cfg = net_inject(&fused, &initial_net(&fused), x, payload).unwrap();
        let mut outputs = Vec::new();
        for _ in 0..8 {
            let succ = net_step(&fused, &cfg, &minter);
            if succ.is_empty() {
                break;
            }
            let (label, next) = succ.into_iter().next().unwrap();
            if let StepLabel::Output(msg) = label {
                outputs.push(msg);
            }
            cfg = next;
        }
        assert_eq!(outputs, vec![Message { port: y, payload }]);
    }

    #[test]
    fn combine_requires_exactly_two_engines() {
        let minter = m();
        let e = relay_engine(&minter);
        let (n, _) = singleton(&e, &minter);
        assert_eq!(combine_engines(&n), Err(NetError::NotTwoEngines));
    }

    #[test]
    fn curry_roundtrip_is_identity() {
        let minter = m();
        let e = relay_engine(&minter);
        let (net, _) = singleton(&e, &minter);
        let part = Interface::from_pairs(
            net.external
                .iter()
                .map(|(p, pol)| (p, pol.dual()))
                .take(1),
        );
        let curried = curry_net(&net, &part).unwrap();
        let back = uncurry_net(&curried, &part).unwrap();
        assert_eq!(back, net);
        assert!(structurally_equivalent(&back, &net).is_some());
    }

    #[test]
    fn structural_equivalence_finds_renamings_and_rejects_size_mismatch() {
        let minter = m();
        let e = Engine {
            interface: {
                let q = minter.fresh_port();
                let a = minter.fresh_port();
                Interface::from_pairs([(q, Polarity::O), (a, Polarity::P)])
            },
            port_map: BTreeMap::new(),
        };
        let q = e.interface.side(Polarity::O)[0];
        let a = e.interface.side(Polarity::P)[0];
        let mut e = e;
        e.port_map
            .insert(q, Code::seq([Instr::Flip { a: R0, b: R1 }], Code::Spark(a)));
        let (n1, _) = singleton(&e, &minter);
        let iso = structurally_equivalent(&n1, &n1).unwrap();
        assert!(iso.support().all(|(x, y)| x == y));

        let (e2_interface, rho) = minter.fresh_copy(&e.interface);
        let e2 = Engine {
            interface: e2_interface,
            port_map: e
                .port_map
                .iter()
                .map(|(p, c)| {
                    (
                        rho.apply(*p),
                        crate::hram::rename_code(c, &|t| rho.apply(t)),
                    )
                })
                .collect(),
        };
        let (n2, _) = singleton(&e2, &minter);
        assert!(structurally_equivalent(&n1, &n2).is_some());

        let (n3, _) = singleton(&e2, &minter);
        let pair = tensor_nets(&n2, &n1);
        if let Ok(pair) = pair {
            assert!(structurally_equivalent(&n3, &pair).is_none());
        }
    }

    #[test]
    fn net_documents_roundtrip() {
        let minter = m();
        let a = Interface::from_pairs([
            (minter.fresh_port(), Polarity::O),
            (minter.fresh_port(), Polarity::P),
        ]);
        let (id, _) = identity_net(&a, &minter);
        let e = relay_engine(&minter);
        let (single, _) = singleton(&e, &minter);
        let mut net = tensor_nets(&id, &single).unwrap();
        net.placements[0] = Some("B".to_string());
        let doc = net_to_json(&net);
        assert_eq!(net_from_json(&doc).unwrap(), net);
        assert!(net_from_json(&serde_json::json!({})).is_err());
    }
}
