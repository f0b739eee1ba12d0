//! Running nets to an answer.
//!
//! A run injects one initial question, then repeatedly picks a runnable step
//! (an engine thread or a pending delivery) under a [`SchedulerPolicy`] until
//! an external output answers the question's fresh name, the net goes
//! quiescent, or a [`RunBudget`] runs out. [`run_local`] keeps every engine
//! in one process; [`run_distributed`] hosts each engine on the node named by
//! its placement, carrying cross-node messages as fixed-size frames over
//! stream sockets, with the root node injecting the question and collecting
//! the answer and the heap audits.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::explore::state_key;
use crate::hram::{engine_receive, engine_step_one, CodecError, Data, Message, StepLabel};
use crate::net::{
    fuse_engines, initial_net, net_from_json, net_inject, net_step, net_to_json, Net, NetConfig,
    Trace, TraceEvent,
};
use crate::nominal::{NameMinter, PointerName, Polarity, PortName};

/// How the next runnable step is chosen.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SchedulerPolicy {
    /// Pseudorandom choices from a fixed seed; runs are bit-reproducible.
    Seeded(u64),
    /// Rotates through the runnable choices in order.
    RoundRobin,
    /// Tries every interleaving up to a total step bound and returns the
    /// first answer found; single-threaded, meant for tests.
    Exhaustive(usize),
}

/// Step allowances for one run; the default is generous for terminating
/// programs and finite for divergent ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct RunBudget {
    /// Internal steps: instruction bursts and local deliveries.
    pub silent: u64,
    /// Externally observable outputs.
    pub observable: u64,
}

impl Default for RunBudget {
    fn default() -> RunBudget {
        RunBudget {
            silent: 1_000_000,
            observable: 10_000,
        }
    }
}

/// Heap cells still allocated after a run, per engine; terminating
/// sequential programs leave every heap empty.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct HeapAudit {
    pub residual: BTreeMap<usize, usize>,
}

impl HeapAudit {
    pub fn is_clean(&self) -> bool {
        self.residual.is_empty()
    }
}

impl fmt::Display for HeapAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.residual.is_empty() {
            return f.write_str("heaps: empty");
        }
        f.write_str("heaps:")?;
        for (i, (engine, cells)) in self.residual.iter().enumerate() {
            let sep = if i == 0 { " " } else { ", " };
            write!(f, "{sep}engine {engine}={cells}")?;
        }
        Ok(())
    }
}

/// Reports the heap cells still allocated in a configuration.
pub fn heap_audit(cfg: &NetConfig) -> HeapAudit {
    let residual = cfg
        .engines
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.heap.is_empty())
        .map(|(i, e)| (i, e.heap.len()))
        .collect();
    HeapAudit { residual }
}

/// Everything a run produces. For distributed runs `cfg` holds only the
/// engines hosted on the root node; remote heaps are summarized in `audit`.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub answer: Option<Message>,
    pub trace: Trace,
    pub audit: HeapAudit,
    /// A budget ran out before the net answered or went quiescent.
    pub exhausted: bool,
    pub faults: usize,
    pub cfg: NetConfig,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RunError {
    #[error("question port {0} is not an external input")]
    NotAnInput(PortName),
    #[error("the question's second slot must carry the fresh pointer to answer")]
    BadQuestion,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Choice {
    Thread(usize, usize),
    Deliver(usize),
}

enum Applied {
    Silent,
    Observed(Message),
    Dropped,
}

/// Steps the engines of one node inside a possibly larger net. Messages
/// bound for local engines (and, on the node hosting the external interface,
/// for external outputs) stay in the configuration's pending set; everything
/// else is handed to the caller's `emit`.
struct Stepper<'a> {
    net: &'a Net,
    local: Vec<usize>,
    owner: BTreeMap<PortName, usize>,
    host_external: bool,
}

impl<'a> Stepper<'a> {
    fn new(net: &'a Net, local: Vec<usize>, host_external: bool) -> Stepper<'a> {
        let mut owner = BTreeMap::new();
        for (i, e) in net.engines.iter().enumerate() {
            for p in e.interface.side(Polarity::O) {
                owner.insert(p, i);
            }
        }
        Stepper {
            net,
            local,
            owner,
            host_external,
        }
    }

    fn choices(&self, cfg: &NetConfig) -> Vec<Choice> {
        let mut out = Vec::new();
        for &i in &self.local {
            for j in 0..cfg.engines[i].threads.len() {
                out.push(Choice::Thread(i, j));
            }
        }
        for k in 0..cfg.pending.len() {
            out.push(Choice::Deliver(k));
        }
        out
    }

    fn keeps(&self, port: PortName) -> bool {
        match self.owner.get(&port) {
            Some(i) => self.local.contains(i),
            None => self.host_external && self.net.external.has(Polarity::P, port),
        }
    }

    fn apply(
        &self,
        cfg: &mut NetConfig,
        c: Choice,
        minter: &NameMinter,
        emit: &mut dyn FnMut(Message),
    ) -> Applied {
        match c {
            Choice::Thread(i, j) => {
                let (label, ecfg) =
                    engine_step_one(&self.net.engines[i], &self.net.chi, &cfg.engines[i], j, minter)
                        .expect("the chosen thread exists");
                cfg.engines[i] = ecfg;
                if let StepLabel::Output(m) = label {
                    if self.keeps(m.port) {
                        cfg.pending.push(m);
                    } else {
                        emit(m);
                    }
                }
                Applied::Silent
            }
            Choice::Deliver(k) => {
                let m = cfg.pending[k];
                if self.net.external.has(Polarity::P, m.port) {
                    cfg.pending.remove(k);
                    return Applied::Observed(m);
                }
                let Some(&i) = self.owner.get(&m.port) else {
                    cfg.pending.remove(k);
                    debug_assert!(false, "pending message at unowned port {}", m.port);
                    return Applied::Dropped;
                };
                match engine_receive(&self.net.engines[i], &cfg.engines[i], &m) {
                    Some(ecfg) => {
                        cfg.pending.remove(k);
                        cfg.engines[i] = ecfg;
                        Applied::Silent
                    }
                    None => {
                        cfg.pending.remove(k);
                        debug_assert!(false, "no handler for delivered message at {}", m.port);
                        Applied::Dropped
                    }
                }
            }
        }
    }
}

/// Runs a net in this process, driving it from `question` until an external
/// output answers the question's fresh name, the net quiesces, or the budget
/// runs out.
pub fn run_local(
    net: &Net,
    question: Message,
    policy: SchedulerPolicy,
    budget: RunBudget,
    minter: &NameMinter,
) -> Result<RunOutcome, RunError> {
    if !net.external.has(Polarity::O, question.port) {
        return Err(RunError::NotAnInput(question.port));
    }
    let Data::Ptr(initial) = question.payload[1] else {
        return Err(RunError::BadQuestion);
    };
    if let SchedulerPolicy::Exhaustive(bound) = policy {
        return Ok(run_exhaustive(net, question, bound, initial, minter));
    }
    let stepper = Stepper::new(net, (0..net.engines.len()).collect(), true);
    let mut cfg = net_inject(net, &initial_net(net), question.port, question.payload)
        .expect("the question port is an external input");
    let mut trace = vec![TraceEvent::input(question)];
    let mut rng = ChaCha20Rng::seed_from_u64(match policy {
        SchedulerPolicy::Seeded(s) => s,
        _ => 0,
    });
    let mut rotation = 0usize;
    let mut silent = 0u64;
    let mut observed = 0u64;
    let mut answer = None;
    let mut exhausted = false;
    loop {
        let choices = stepper.choices(&cfg);
        if choices.is_empty() {
            break;
        }
        if silent >= budget.silent || observed >= budget.observable {
            exhausted = true;
            break;
        }
        let pick = match policy {
            SchedulerPolicy::Seeded(_) => rng.gen_range(0..choices.len()),
            SchedulerPolicy::RoundRobin => {
                rotation = rotation.wrapping_add(1);
                (rotation - 1) % choices.len()
            }
            SchedulerPolicy::Exhaustive(_) => unreachable!("handled above"),
        };
        let mut outbox = Vec::new();
        let applied = stepper.apply(&mut cfg, choices[pick], minter, &mut |m| outbox.push(m));
        debug_assert!(outbox.is_empty(), "a local run keeps every message");
        match applied {
            Applied::Silent | Applied::Dropped => silent += 1,
            Applied::Observed(m) => {
                observed += 1;
                trace.push(TraceEvent::output(m));
                if m.payload[0] == Data::Ptr(initial) {
                    answer = Some(m);
                    break;
                }
            }
        }
    }
    Ok(RunOutcome {
        answer,
        trace,
        audit: heap_audit(&cfg),
        exhausted,
        faults: cfg.fault_count(),
        cfg,
    })
}

fn run_exhaustive(
    net: &Net,
    question: Message,
    bound: usize,
    initial: PointerName,
    minter: &NameMinter,
) -> RunOutcome {
    let cfg0 = net_inject(net, &initial_net(net), question.port, question.payload)
        .expect("the question port is an external input");
    let trace0 = vec![TraceEvent::input(question)];
    let mut stack = vec![(cfg0.clone(), trace0.clone(), 0usize)];
    let mut seen = BTreeSet::new();
    let mut resting = cfg0;
    let mut rested = false;
    let mut exhausted = false;
    while let Some((cfg, trace, depth)) = stack.pop() {
        if !seen.insert(state_key(&trace, &cfg)) {
            continue;
        }
        if depth >= bound {
            exhausted = true;
            continue;
        }
        let successors = net_step(net, &cfg, minter);
        if successors.is_empty() {
            if !rested {
                resting = cfg;
                rested = true;
            }
            continue;
        }
        for (label, next) in successors.into_iter().rev() {
            let mut grown = trace.clone();
            if let StepLabel::Output(m) = label {
                grown.push(TraceEvent::output(m));
                if m.payload[0] == Data::Ptr(initial) {
                    return RunOutcome {
                        answer: Some(m),
                        trace: grown,
                        audit: heap_audit(&next),
                        exhausted: false,
                        faults: next.fault_count(),
                        cfg: next,
                    };
                }
            }
            stack.push((next, grown, depth + 1));
        }
    }
    RunOutcome {
        answer: None,
        trace: trace0,
        audit: heap_audit(&resting),
        exhausted,
        faults: resting.fault_count(),
        cfg: resting,
    }
}

/// Length word value of every frame: the byte count of the body that
/// follows it.
pub const FRAME_BODY_LEN: u32 = 37;
/// Total bytes of one frame on the wire, length word included.
pub const FRAME_WIRE_LEN: usize = 4 + FRAME_BODY_LEN as usize;

const KIND_MESSAGE: u8 = 0;
const KIND_HELLO: u8 = 1;
const KIND_IDLE: u8 = 2;
const KIND_SHUTDOWN: u8 = 3;
const KIND_AUDIT: u8 = 4;
const KIND_AUDIT_DONE: u8 = 5;
const KIND_BUDGET: u8 = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame is {0} bytes, expected {FRAME_WIRE_LEN}")]
    Size(usize),
    #[error("frame length word is {0}, expected {FRAME_BODY_LEN}")]
    Length(u32),
    #[error("unknown frame kind {0}")]
    Kind(u8),
    #[error("unknown payload tag {0}")]
    Tag(u8),
    #[error("empty payload slot carries nonzero bits")]
    DirtyEmpty,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct RawFrame {
    kind: u8,
    dest: u64,
    slots: [(u8, u64); 3],
}

fn encode_raw(f: &RawFrame) -> [u8; FRAME_WIRE_LEN] {
    let mut out = [0u8; FRAME_WIRE_LEN];
    out[0..4].copy_from_slice(&FRAME_BODY_LEN.to_be_bytes());
    out[4] = f.kind;
    out[6..14].copy_from_slice(&f.dest.to_be_bytes());
    for (k, &(tag, bits)) in f.slots.iter().enumerate() {
        let at = 14 + 9 * k;
        out[at] = tag;
        out[at + 1..at + 9].copy_from_slice(&bits.to_be_bytes());
    }
    out
}

fn decode_raw(bytes: &[u8]) -> Result<RawFrame, FrameError> {
    if bytes.len() != FRAME_WIRE_LEN {
        return Err(FrameError::Size(bytes.len()));
    }
    let len = u32::from_be_bytes(bytes[0..4].try_into().expect("four bytes"));
    if len != FRAME_BODY_LEN {
        return Err(FrameError::Length(len));
    }
    let kind = bytes[4];
    let dest = u64::from_be_bytes(bytes[6..14].try_into().expect("eight bytes"));
    let mut slots = [(0u8, 0u64); 3];
    for (k, slot) in slots.iter_mut().enumerate() {
        let at = 14 + 9 * k;
        let tag = bytes[at];
        if tag > 2 {
            return Err(FrameError::Tag(tag));
        }
        let bits = u64::from_be_bytes(bytes[at + 1..at + 9].try_into().expect("eight bytes"));
        *slot = (tag, bits);
    }
    Ok(RawFrame { kind, dest, slots })
}

fn data_to_wire(d: Data) -> (u8, u64) {
    match d {
        Data::Empty => (0, 0),
        Data::Ptr(p) => (1, p.raw()),
        Data::Int(i) => (2, i as u64),
    }
}

fn data_from_wire(tag: u8, bits: u64) -> Result<Data, FrameError> {
    match tag {
        0 if bits == 0 => Ok(Data::Empty),
        0 => Err(FrameError::DirtyEmpty),
        1 => Ok(Data::Ptr(PointerName(bits))),
        2 => Ok(Data::Int(bits as i64)),
        t => Err(FrameError::Tag(t)),
    }
}

fn message_of_raw(raw: &RawFrame) -> Result<Message, FrameError> {
    let mut payload = [Data::Empty; 3];
    for (slot, &(tag, bits)) in payload.iter_mut().zip(raw.slots.iter()) {
        *slot = data_from_wire(tag, bits)?;
    }
    Ok(Message {
        port: PortName(raw.dest),
        payload,
    })
}

/// Serializes a message as one wire frame.
pub fn encode_frame(m: &Message) -> [u8; FRAME_WIRE_LEN] {
    encode_raw(&RawFrame {
        kind: KIND_MESSAGE,
        dest: m.port.raw(),
        slots: m.payload.map(data_to_wire),
    })
}

/// Parses one wire frame back into a message.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, FrameError> {
    let raw = decode_raw(bytes)?;
    if raw.kind != KIND_MESSAGE {
        return Err(FrameError::Kind(raw.kind));
    }
    message_of_raw(&raw)
}

/// Names the nodes of a distributed run: each node's listen address, which
/// node is the root, and the largest frame length word a node will accept.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NodeConfig {
    pub nodes: BTreeMap<String, String>,
    pub root: String,
    pub frame_limit: u32,
}

/// Reads a `{"nodes": {name: "host:port"}, "root": name}` document; an
/// optional `"frame_limit"` must be at least the frame body length.
pub fn node_config_from_json(v: &Value) -> Result<NodeConfig, CodecError> {
    let obj = v
        .as_object()
        .ok_or_else(|| CodecError("expected a configuration object".into()))?;
    let mut nodes = BTreeMap::new();
    let entries = obj
        .get("nodes")
        .and_then(Value::as_object)
        .ok_or_else(|| CodecError("`nodes` must map node names to addresses".into()))?;
    for (name, addr) in entries {
        let addr = addr
            .as_str()
            .ok_or_else(|| CodecError(format!("node {name} needs a \"host:port\" string")))?;
        nodes.insert(name.clone(), addr.to_string());
    }
    if nodes.is_empty() {
        return Err(CodecError("at least one node is required".into()));
    }
    let root = obj
        .get("root")
        .and_then(Value::as_str)
        .ok_or_else(|| CodecError("`root` must name a node".into()))?
        .to_string();
    if !nodes.contains_key(&root) {
        return Err(CodecError(format!("root {root} is not among the nodes")));
    }
    let frame_limit = match obj.get("frame_limit") {
        None => FRAME_BODY_LEN,
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| CodecError("`frame_limit` must be an unsigned integer".into()))?,
    };
    if frame_limit < FRAME_BODY_LEN {
        return Err(CodecError(format!(
            "frame_limit {frame_limit} is below the frame body length {FRAME_BODY_LEN}"
        )));
    }
    Ok(NodeConfig {
        nodes,
        root,
        frame_limit,
    })
}

#[derive(Debug, Error)]
pub enum DistError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("connecting to node {0}: {1}")]
    Connect(String, io::Error),
    #[error("node {0}: connection lost: {1}")]
    ConnectionLost(String, io::Error),
    #[error("node {0}: protocol error: {1}")]
    Protocol(String, String),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Options for a distributed run.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct DistOptions {
    pub seed: u64,
    pub budget: RunBudget,
    /// Fuse each node's engines so co-located sparks jump instead of
    /// sending messages.
    pub jump: bool,
}

fn placement_gaps(net: &Net, cfg: &NodeConfig) -> Result<(), DistError> {
    for placement in net.placements.iter().flatten() {
        if !cfg.nodes.contains_key(placement) {
            return Err(DistError::Config(format!(
                "placement {placement} names no configured node"
            )));
        }
    }
    Ok(())
}

/// Pointer-minting tag of a node: its position in name order, counted
/// from one.
fn node_tag(cfg: &NodeConfig, name: &str) -> u16 {
    let at = cfg.nodes.keys().position(|n| n == name);
    1 + at.expect("the node is configured") as u16
}

/// The same net with every unplaced engine assigned to `root`.
fn normalized(net: &Net, root: &str) -> Net {
    let mut out = net.clone();
    for placement in &mut out.placements {
        placement.get_or_insert_with(|| root.to_string());
    }
    out
}

fn local_indices(net: &Net, name: &str) -> Vec<usize> {
    net.placements
        .iter()
        .enumerate()
        .filter(|(_, placement)| placement.as_deref() == Some(name))
        .map(|(i, _)| i)
        .collect()
}

/// A node's stepping view: its own engines fused when jump mode is on.
fn node_view(net: &Net, name: &str, jump: bool) -> (Net, Vec<usize>) {
    if jump {
        let fused = fuse_engines(net, &local_indices(net, name))
            .expect("co-located engines share a placement");
        let local = local_indices(&fused, name);
        (fused, local)
    } else {
        (net.clone(), local_indices(net, name))
    }
}

fn would_block(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
    )
}

fn write_blob(stream: &mut TcpStream, v: &Value) -> io::Result<()> {
    let bytes = serde_json::to_vec(v).expect("documents serialize");
    stream.write_all(&(bytes.len() as u32).to_be_bytes())?;
    stream.write_all(&bytes)
}

fn read_blob(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut word = [0u8; 4];
    stream.read_exact(&mut word)?;
    let len = u32::from_be_bytes(word) as usize;
    if len > 1 << 26 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "setup document too large",
        ));
    }
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

enum PollError {
    Io(io::Error),
    Frame(FrameError),
}

/// Reassembles fixed-size frames from a stream read with a timeout.
#[derive(Default)]
struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    fn poll(&mut self, stream: &mut TcpStream) -> Result<Option<RawFrame>, PollError> {
        loop {
            if self.buf.len() >= FRAME_WIRE_LEN {
                let frame = decode_raw(&self.buf[..FRAME_WIRE_LEN]).map_err(PollError::Frame)?;
                self.buf.drain(..FRAME_WIRE_LEN);
                return Ok(Some(frame));
            }
            let mut chunk = [0u8; 256];
            match stream.read(&mut chunk) {
                Ok(0) => {
                    return Err(PollError::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "peer closed the connection",
                    )))
                }
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if would_block(&e) => return Ok(None),
                Err(e) => return Err(PollError::Io(e)),
            }
        }
    }
}

fn send_raw(stream: &mut TcpStream, f: &RawFrame) -> io::Result<()> {
    stream.write_all(&encode_raw(f))
}

fn control(kind: u8, dest: u64, a: u64, b: u64) -> RawFrame {
    RawFrame {
        kind,
        dest,
        slots: [(2, a), (2, b), (0, 0)],
    }
}

const POLL_INTERVAL: Duration = Duration::from_millis(5);
const SETUP_DEADLINE: Duration = Duration::from_secs(10);
const BURST: usize = 4096;

/// Serves one node of a distributed run: binds its configured address,
/// accepts the root's connection, and participates until shut down.
pub fn serve_node(name: &str, cfg: &NodeConfig) -> Result<(), DistError> {
    let addr = cfg
        .nodes
        .get(name)
        .ok_or_else(|| DistError::Config(format!("node {name} is not in the configuration")))?;
    let listener = TcpListener::bind(addr)
        .map_err(|e| DistError::Config(format!("binding {addr}: {e}")))?;
    serve_on(listener, name)
}

/// Serves one node on an already-bound listener.
pub fn serve_on(listener: TcpListener, name: &str) -> Result<(), DistError> {
    let (stream, _) = listener
        .accept()
        .map_err(|e| DistError::ConnectionLost(name.to_string(), e))?;
    worker_session(name, stream)
}

fn worker_session(name: &str, mut stream: TcpStream) -> Result<(), DistError> {
    let lost = |e: io::Error| DistError::ConnectionLost("root".to_string(), e);
    let garbled = |msg: String| DistError::Protocol("root".to_string(), msg);
    let blob = read_blob(&mut stream).map_err(lost)?;
    let setup: Value =
        serde_json::from_slice(&blob).map_err(|e| garbled(format!("setup document: {e}")))?;
    let expected = setup["node"].as_str().unwrap_or_default();
    if expected != name {
        return Err(garbled(format!("setup addressed to {expected}, serving {name}")));
    }
    let net = net_from_json(&setup["net"]).map_err(|e| garbled(e.to_string()))?;
    let tag = setup["tag"]
        .as_u64()
        .and_then(|t| u16::try_from(t).ok())
        .ok_or_else(|| garbled("setup lacks a node tag".into()))?;
    let seed = setup["seed"].as_u64().unwrap_or(0);
    let silent_budget = setup["silent_budget"].as_u64().unwrap_or(u64::MAX);
    let jump = setup["jump"].as_bool().unwrap_or(false);
    let (view, local) = node_view(&net, name, jump);
    let stepper = Stepper::new(&view, local.clone(), false);
    let minter = NameMinter::new(tag);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ ((tag as u64) << 48));
    let mut cfg = initial_net(&view);
    let mut reader = FrameReader::default();
    stream
        .set_read_timeout(Some(POLL_INTERVAL))
        .map_err(lost)?;
    send_raw(&mut stream, &control(KIND_HELLO, 0, tag as u64, 0)).map_err(lost)?;
    let mut received = 0u64;
    let mut sent = 0u64;
    let mut silent = 0u64;
    let mut announced = false;
    let mut halted = false;
    loop {
        loop {
            match reader.poll(&mut stream) {
                Ok(Some(raw)) => match raw.kind {
                    KIND_MESSAGE => {
                        let m = message_of_raw(&raw).map_err(|e| garbled(e.to_string()))?;
                        cfg.pending.push(m);
                        received += 1;
                        announced = false;
                    }
                    KIND_SHUTDOWN => {
                        send_audits(&mut stream, &cfg, &local).map_err(lost)?;
                        return Ok(());
                    }
                    k => return Err(garbled(format!("unexpected frame kind {k}"))),
                },
                Ok(None) => break,
                Err(PollError::Io(e)) => return Err(lost(e)),
                Err(PollError::Frame(e)) => return Err(garbled(e.to_string())),
            }
        }
        if !halted {
            for _ in 0..BURST {
                let choices = stepper.choices(&cfg);
                if choices.is_empty() {
                    break;
                }
                let pick = rng.gen_range(0..choices.len());
                let mut outbox = Vec::new();
                stepper.apply(&mut cfg, choices[pick], &minter, &mut |m| outbox.push(m));
                for m in outbox {
                    stream.write_all(&encode_frame(&m)).map_err(lost)?;
                    sent += 1;
                }
                silent += 1;
                if silent > silent_budget {
                    send_raw(&mut stream, &control(KIND_BUDGET, 0, silent, 0)).map_err(lost)?;
                    halted = true;
                    break;
                }
            }
        }
        if !halted && !announced && stepper.choices(&cfg).is_empty() {
            send_raw(&mut stream, &control(KIND_IDLE, 0, received, sent)).map_err(lost)?;
            announced = true;
        }
    }
}

fn send_audits(stream: &mut TcpStream, cfg: &NetConfig, local: &[usize]) -> io::Result<()> {
    let mut rows = 0u64;
    for &i in local {
        let cells = cfg.engines[i].heap.len() as u64;
        let faults = cfg.engines[i].faults.len() as u64;
        if cells > 0 || faults > 0 {
            send_raw(stream, &control(KIND_AUDIT, i as u64, cells, faults))?;
            rows += 1;
        }
    }
    send_raw(stream, &control(KIND_AUDIT_DONE, 0, rows, 0))
}

struct Peer {
    name: String,
    stream: TcpStream,
    reader: FrameReader,
    forwarded: u64,
    received: u64,
    idle: Option<(u64, u64)>,
}

impl Peer {
    fn await_kind(&mut self, kind: u8, deadline: Instant) -> Result<RawFrame, DistError> {
        loop {
            match self.reader.poll(&mut self.stream) {
                Ok(Some(raw)) if raw.kind == kind => return Ok(raw),
                Ok(Some(raw)) => {
                    return Err(DistError::Protocol(
                        self.name.clone(),
                        format!("expected frame kind {kind}, got {}", raw.kind),
                    ))
                }
                Ok(None) => {
                    if Instant::now() > deadline {
                        return Err(DistError::ConnectionLost(
                            self.name.clone(),
                            io::Error::new(io::ErrorKind::TimedOut, "no reply"),
                        ));
                    }
                }
                Err(PollError::Io(e)) => {
                    return Err(DistError::ConnectionLost(self.name.clone(), e))
                }
                Err(PollError::Frame(e)) => {
                    return Err(DistError::Protocol(self.name.clone(), e.to_string()))
                }
            }
        }
    }
}

/// Runs a placed net across the configured nodes. This process hosts the
/// root node's engines, injects the question, routes cross-node frames, and
/// gathers the answer and heap audits; every other configured node must
/// already be serving.
pub fn run_distributed(
    net: &Net,
    question: Message,
    cfg: &NodeConfig,
    opts: &DistOptions,
) -> Result<RunOutcome, DistError> {
    let net = normalized(net, &cfg.root);
    placement_gaps(&net, cfg)?;
    if !net.external.has(Polarity::O, question.port) {
        return Err(RunError::NotAnInput(question.port).into());
    }
    let Data::Ptr(initial) = question.payload[1] else {
        return Err(RunError::BadQuestion.into());
    };

    let mut port_node: BTreeMap<PortName, String> = BTreeMap::new();
    for (i, e) in net.engines.iter().enumerate() {
        let home = net.placements[i].clone().expect("normalized placement");
        for p in e.interface.side(Polarity::O) {
            port_node.insert(p, home.clone());
        }
    }

    let mut peers: BTreeMap<String, Peer> = BTreeMap::new();
    for (name, addr) in cfg.nodes.iter().filter(|(n, _)| **n != cfg.root) {
        let stream = TcpStream::connect(addr)
            .map_err(|e| DistError::Connect(name.clone(), e))?;
        peers.insert(
            name.clone(),
            Peer {
                name: name.clone(),
                stream,
                reader: FrameReader::default(),
                forwarded: 0,
                received: 0,
                idle: None,
            },
        );
    }
    for peer in peers.values_mut() {
        let setup = json!({
            "net": net_to_json(&net),
            "node": peer.name,
            "tag": node_tag(cfg, &peer.name),
            "seed": opts.seed,
            "silent_budget": opts.budget.silent,
            "jump": opts.jump,
        });
        write_blob(&mut peer.stream, &setup)
            .map_err(|e| DistError::ConnectionLost(peer.name.clone(), e))?;
        peer.stream
            .set_read_timeout(Some(POLL_INTERVAL))
            .map_err(|e| DistError::ConnectionLost(peer.name.clone(), e))?;
    }
    let hello_by = Instant::now() + SETUP_DEADLINE;
    for peer in peers.values_mut() {
        peer.await_kind(KIND_HELLO, hello_by)?;
    }

    let (view, local) = node_view(&net, &cfg.root, opts.jump);
    let stepper = Stepper::new(&view, local, true);
    let minter = NameMinter::new(node_tag(cfg, &cfg.root));
    let mut rng =
        ChaCha20Rng::seed_from_u64(opts.seed ^ ((node_tag(cfg, &cfg.root) as u64) << 48));
    let mut cfgv = net_inject(&view, &initial_net(&view), question.port, question.payload)
        .expect("the question port is an external input");
    let mut trace = vec![TraceEvent::input(question)];
    let mut silent = 0u64;
    let mut observed = 0u64;
    let mut answer = None;
    let mut exhausted = false;
    let mut failure = None;

    'run: loop {
        let names: Vec<String> = peers.keys().cloned().collect();
        for name in &names {
            loop {
                let peer = peers.get_mut(name).expect("known peer");
                let raw = match peer.reader.poll(&mut peer.stream) {
                    Ok(Some(raw)) => raw,
                    Ok(None) => break,
                    Err(PollError::Io(e)) => {
                        failure = Some(DistError::ConnectionLost(name.clone(), e));
                        break 'run;
                    }
                    Err(PollError::Frame(e)) => {
                        failure = Some(DistError::Protocol(name.clone(), e.to_string()));
                        break 'run;
                    }
                };
                match raw.kind {
                    KIND_MESSAGE => {
                        peer.received += 1;
                        let m = match message_of_raw(&raw) {
                            Ok(m) => m,
                            Err(e) => {
                                failure = Some(DistError::Protocol(name.clone(), e.to_string()));
                                break 'run;
                            }
                        };
                        match port_node.get(&m.port) {
                            Some(home) if *home != cfg.root => {
                                let target = peers.get_mut(home).expect("placement checked");
                                if let Err(e) = target.stream.write_all(&encode_frame(&m)) {
                                    failure =
                                        Some(DistError::ConnectionLost(home.clone(), e));
                                    break 'run;
                                }
                                target.forwarded += 1;
                            }
                            _ => cfgv.pending.push(m),
                        }
                    }
                    KIND_IDLE => peer.idle = Some((raw.slots[0].1, raw.slots[1].1)),
                    KIND_BUDGET => {
                        exhausted = true;
                        break 'run;
                    }
                    k => {
                        failure = Some(DistError::Protocol(
                            name.clone(),
                            format!("unexpected frame kind {k}"),
                        ));
                        break 'run;
                    }
                }
            }
        }

        for _ in 0..BURST {
            let choices = stepper.choices(&cfgv);
            if choices.is_empty() {
                break;
            }
            if silent >= opts.budget.silent || observed >= opts.budget.observable {
                exhausted = true;
                break 'run;
            }
            let pick = rng.gen_range(0..choices.len());
            let mut outbox = Vec::new();
            let applied = stepper.apply(&mut cfgv, choices[pick], &minter, &mut |m| {
                outbox.push(m)
            });
            for m in outbox {
                let home = port_node
                    .get(&m.port)
                    .expect("emitted messages target placed engines");
                let target = peers.get_mut(home).expect("placement checked");
                if let Err(e) = target.stream.write_all(&encode_frame(&m)) {
                    failure = Some(DistError::ConnectionLost(home.clone(), e));
                    break 'run;
                }
                target.forwarded += 1;
            }
            match applied {
                Applied::Silent | Applied::Dropped => silent += 1,
                Applied::Observed(m) => {
                    observed += 1;
                    trace.push(TraceEvent::output(m));
                    if m.payload[0] == Data::Ptr(initial) {
                        answer = Some(m);
                        break 'run;
                    }
                }
            }
        }

        if stepper.choices(&cfgv).is_empty() {
            let settled = peers
                .values()
                .all(|p| p.idle == Some((p.forwarded, p.received)));
            if settled {
                break 'run;
            }
        }
    }

    let mut audit = heap_audit(&cfgv);
    let mut faults = cfgv.fault_count();
    let mut next_key = view.engines.len();
    for peer in peers.values_mut() {
        if send_raw(&mut peer.stream, &control(KIND_SHUTDOWN, 0, 0, 0)).is_err() {
            continue;
        }
        let deadline = Instant::now() + SETUP_DEADLINE;
        loop {
            match peer.reader.poll(&mut peer.stream) {
                Ok(Some(raw)) => match raw.kind {
                    KIND_AUDIT => {
                        let (cells, broke) = (raw.slots[0].1, raw.slots[1].1);
                        if cells > 0 {
                            audit.residual.insert(next_key, cells as usize);
                            next_key += 1;
                        }
                        faults += broke as usize;
                    }
                    KIND_AUDIT_DONE => break,
                    KIND_MESSAGE | KIND_IDLE | KIND_BUDGET => {}
                    k => {
                        failure.get_or_insert(DistError::Protocol(
                            peer.name.clone(),
                            format!("unexpected frame kind {k} during shutdown"),
                        ));
                        break;
                    }
                },
                Ok(None) => {
                    if Instant::now() > deadline {
                        failure.get_or_insert(DistError::ConnectionLost(
                            peer.name.clone(),
                            io::Error::new(io::ErrorKind::TimedOut, "no audit"),
                        ));
                        break;
                    }
                }
                Err(PollError::Io(e)) => {
                    failure.get_or_insert(DistError::ConnectionLost(peer.name.clone(), e));
                    break;
                }
                Err(PollError::Frame(e)) => {
                    failure.get_or_insert(DistError::Protocol(peer.name.clone(), e.to_string()));
                    break;
                }
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(RunOutcome {
        answer,
        trace,
        audit,
        exhausted,
        faults,
        cfg: cfgv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combinators::GamNet;
    use crate::hram::Data;
    use crate::ica::{compile, parse, CompilationUnit};
    use crate::nominal::ENV_NODE_TAG;
    use std::thread;

    fn program(src: &str) -> GamNet {
        let m = NameMinter::new(1);
        compile(&CompilationUnit::closed(parse(src).unwrap()), &m).unwrap()
    }

    fn placed_program(src: &str, root: &str) -> GamNet {
        let m = NameMinter::new(1);
        let u = CompilationUnit {
            term: parse(src).unwrap(),
            ctx: Vec::new(),
            root: root.to_string(),
        };
        compile(&u, &m).unwrap()
    }

    fn question_for(g: &GamNet, m: &NameMinter) -> Message {
        Message {
            port: g.target.order[0],
            payload: [
                Data::Ptr(m.fresh_pointer()),
                Data::Ptr(m.fresh_pointer()),
                Data::Empty,
            ],
        }
    }

    fn run(src: &str, policy: SchedulerPolicy) -> RunOutcome {
        let g = program(src);
        let env = NameMinter::new(ENV_NODE_TAG);
        let q = question_for(&g, &env);
        run_local(&g.net, q, policy, RunBudget::default(), &env).unwrap()
    }

    fn answer_value(outcome: &RunOutcome) -> Data {
        outcome.answer.expect("the run answered").payload[2]
    }

    #[test]
    fn addition_answers_under_every_policy() {
        for policy in [
            SchedulerPolicy::Seeded(7),
            SchedulerPolicy::RoundRobin,
            SchedulerPolicy::Exhaustive(4_000),
        ] {
            let outcome = run("1 + 2", policy);
            assert_eq!(answer_value(&outcome), Data::Int(3));
            assert!(outcome.audit.is_clean(), "{}", outcome.audit);
            assert_eq!(outcome.faults, 0);
            assert!(!outcome.exhausted);
        }
    }

    #[test]
    fn divergence_exhausts_the_budget() {
        let g = program("fix (λx:exp.x)");
        let env = NameMinter::new(ENV_NODE_TAG);
        let q = question_for(&g, &env);
        let budget = RunBudget {
            silent: 5_000,
            observable: 10,
        };
        let outcome = run_local(&g.net, q, SchedulerPolicy::Seeded(3), budget, &env).unwrap();
        assert_eq!(outcome.answer, None);
        assert!(outcome.exhausted);
    }

    #[test]
    fn equal_seeds_give_equal_traces() {
        let a = run("new x. x := 8; !x + 1", SchedulerPolicy::Seeded(42));
        let b = run("new x. x := 8; !x + 1", SchedulerPolicy::Seeded(42));
        assert_eq!(a.trace, b.trace);
        assert_eq!(answer_value(&a), Data::Int(9));
        for seed in [1, 2, 3, 4, 5] {
            let c = run("new x. x := 8; !x + 1", SchedulerPolicy::Seeded(seed));
            assert_eq!(answer_value(&c), Data::Int(9));
            assert!(c.audit.is_clean());
        }
    }

    #[test]
    fn rejects_bad_questions() {
        let g = program("1 + 2");
        let env = NameMinter::new(ENV_NODE_TAG);
        let stray = Message {
            port: PortName(crate::nominal::atom(0x7777, 1)),
            payload: [Data::Empty; 3],
        };
        assert_eq!(
            run_local(
                &g.net,
                stray,
                SchedulerPolicy::RoundRobin,
                RunBudget::default(),
                &env
            )
            .unwrap_err(),
            RunError::NotAnInput(stray.port)
        );
        let hollow = Message {
            port: g.target.order[0],
            payload: [Data::Ptr(env.fresh_pointer()), Data::Empty, Data::Empty],
        };
        assert_eq!(
            run_local(
                &g.net,
                hollow,
                SchedulerPolicy::RoundRobin,
                RunBudget::default(),
                &env
            )
            .unwrap_err(),
            RunError::BadQuestion
        );
    }

    #[test]
    fn frames_roundtrip() {
        let samples = [
            Message {
                port: PortName(crate::nominal::atom(3, 9)),
                payload: [Data::Empty, Data::Empty, Data::Empty],
            },
            Message {
                port: PortName(u64::MAX),
                payload: [
                    Data::Ptr(PointerName(crate::nominal::atom(2, 77))),
                    Data::Ptr(PointerName(0)),
                    Data::Int(-5),
                ],
            },
            Message {
                port: PortName(0),
                payload: [Data::Int(i64::MIN), Data::Int(i64::MAX), Data::Int(0)],
            },
        ];
        for m in samples {
            let wire = encode_frame(&m);
            assert_eq!(wire.len(), FRAME_WIRE_LEN);
            assert_eq!(u32::from_be_bytes(wire[0..4].try_into().unwrap()), 37);
            assert_eq!(decode_frame(&wire).unwrap(), m);
        }
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let good = encode_frame(&Message {
            port: PortName(5),
            payload: [Data::Int(1), Data::Empty, Data::Empty],
        });
        assert_eq!(decode_frame(&good[..40]).unwrap_err(), FrameError::Size(40));
        let mut bad_len = good;
        bad_len[3] = 36;
        assert_eq!(decode_frame(&bad_len).unwrap_err(), FrameError::Length(36));
        let mut bad_kind = good;
        bad_kind[4] = 9;
        assert_eq!(decode_frame(&bad_kind).unwrap_err(), FrameError::Kind(9));
        let mut bad_tag = good;
        bad_tag[14] = 3;
        assert_eq!(decode_frame(&bad_tag).unwrap_err(), FrameError::Tag(3));
        let mut dirty = good;
        dirty[23] = 0;
        dirty[31] = 1;
        assert_eq!(decode_frame(&dirty).unwrap_err(), FrameError::DirtyEmpty);
    }

    #[test]
    fn node_configs_parse_and_validate() {
        let v = json!({"nodes": {"A": "127.0.0.1:7001", "B": "127.0.0.1:7002"}, "root": "A"});
        let cfg = node_config_from_json(&v).unwrap();
        assert_eq!(cfg.root, "A");
        assert_eq!(cfg.nodes.len(), 2);
        assert_eq!(cfg.frame_limit, FRAME_BODY_LEN);
        assert_eq!(node_tag(&cfg, "A"), 1);
        assert_eq!(node_tag(&cfg, "B"), 2);
        let missing_root = json!({"nodes": {"A": "x:1"}, "root": "Z"});
        assert!(node_config_from_json(&missing_root).is_err());
        let tight = json!({"nodes": {"A": "x:1"}, "root": "A", "frame_limit": 8});
        assert!(node_config_from_json(&tight).is_err());
    }

    #[test]
    fn heap_audits_report_residual_cells() {
        let outcome = run("1 + 2", SchedulerPolicy::Seeded(0));
        let mut cfg = outcome.cfg;
        let m = NameMinter::new(9);
        cfg.engines[0]
            .heap
            .insert(m.fresh_pointer(), (Data::Empty, Data::Empty));
        let audit = heap_audit(&cfg);
        assert!(!audit.is_clean());
        assert_eq!(audit.to_string(), "heaps: engine 0=1");
    }

    fn loopback_config(names: &[&str], root: &str) -> (NodeConfig, Vec<(String, TcpListener)>) {
        let mut nodes = BTreeMap::new();
        let mut listeners = Vec::new();
        for name in names {
            if *name == root {
                nodes.insert(root.to_string(), "127.0.0.1:0".to_string());
                continue;
            }
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            nodes.insert(name.to_string(), l.local_addr().unwrap().to_string());
            listeners.push((name.to_string(), l));
        }
        (
            NodeConfig {
                nodes,
                root: root.to_string(),
                frame_limit: FRAME_BODY_LEN,
            },
            listeners,
        )
    }

    fn run_placed(src: &str, names: &[&str], jump: bool) -> RunOutcome {
        let g = placed_program(src, names[0]);
        let (cfg, listeners) = loopback_config(names, names[0]);
        let workers: Vec<_> = listeners
            .into_iter()
            .map(|(name, l)| thread::spawn(move || serve_on(l, &name)))
            .collect();
        let env = NameMinter::new(ENV_NODE_TAG);
        let q = question_for(&g, &env);
        let opts = DistOptions {
            seed: 11,
            budget: RunBudget::default(),
            jump,
        };
        let outcome = run_distributed(&g.net, q, &cfg, &opts).unwrap();
        for w in workers {
            w.join().unwrap().unwrap();
        }
        outcome
    }

    #[test]
    fn distributed_placement_matches_local_answers() {
        let src = "{new x. x := {!x + 1}@B + {2}@C; !x}@A";
        let local = run(src, SchedulerPolicy::Seeded(11));
        assert_eq!(answer_value(&local), Data::Int(3));
        let spread = run_placed(src, &["A", "B", "C"], false);
        assert_eq!(answer_value(&spread), Data::Int(3));
        assert!(spread.audit.is_clean(), "{}", spread.audit);
        assert_eq!(spread.faults, 0);
        let jumped = run_placed(src, &["A", "B", "C"], true);
        assert_eq!(answer_value(&jumped), Data::Int(3));
        assert!(jumped.audit.is_clean(), "{}", jumped.audit);
    }

    #[test]
    fn single_node_distribution_matches_run_local() {
        let g = placed_program("{1}@A + {2}@A", "A");
        let (cfg, listeners) = loopback_config(&["A"], "A");
        assert!(listeners.is_empty());
        let env = NameMinter::new(ENV_NODE_TAG);
        let q = question_for(&g, &env);
        let spread = run_distributed(&g.net, q, &cfg, &DistOptions::default()).unwrap();
        assert_eq!(answer_value(&spread), Data::Int(3));
        assert!(spread.audit.is_clean());
        let local = run("{1}@A + {2}@A", SchedulerPolicy::Seeded(0));
        assert_eq!(answer_value(&local), answer_value(&spread));
    }

    #[test]
    fn unresolvable_placements_are_config_errors() {
        let g = placed_program("{1}@A + {2}@Elsewhere", "A");
        let (cfg, _listeners) = loopback_config(&["A"], "A");
        let env = NameMinter::new(ENV_NODE_TAG);
        let q = question_for(&g, &env);
        let err = run_distributed(&g.net, q, &cfg, &DistOptions::default()).unwrap_err();
        assert!(matches!(err, DistError::Config(_)), "{err}");
    }
}
