//! The heap-and-register abstract machine: instructions, engines, threads
//! and the single-step transition relation.
//!
//! An engine owns a polarized interface and a code fragment for every input
//! port. Each live thread has a fixed file of four data registers; messages
//! carry the first three. The heap is shared by all threads of one engine
//! and maps pointer names to pairs of data values.

use crate::nominal::{atom_hex, parse_atom_hex, Interface, NameMinter, Polarity, PointerName, PortName};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Registers per thread.
pub const REG_COUNT: usize = 4;
/// Registers copied into a message payload.
pub const MSG_REGS: usize = 3;

/// A register index, or the null index whose reads give [`Data::Empty`] and
/// whose writes are discarded.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Reg {
    R(u8),
    Null,
}

pub const R0: Reg = Reg::R(0);
pub const R1: Reg = Reg::R(1);
pub const R2: Reg = Reg::R(2);
pub const R3: Reg = Reg::R(3);

/// A single data value: empty, a heap pointer, or an integer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub enum Data {
    #[default]
    Empty,
    Ptr(PointerName),
    Int(i64),
}

impl fmt::Display for Data {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Data::Empty => f.write_str("_"),
            Data::Ptr(p) => write!(f, "{p}"),
            Data::Int(i) => write!(f, "{i}"),
        }
    }
}

/// Integer operation for the [`Instr::Arith`] extension.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    pub fn eval(self, l: i64, r: i64) -> i64 {
        match self {
            ArithOp::Add => l.wrapping_add(r),
            ArithOp::Sub => l.wrapping_sub(r),
            ArithOp::Mul => l.wrapping_mul(r),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Sub => "sub",
            ArithOp::Mul => "mul",
        }
    }
}

/// Straight-line instructions.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Instr {
    /// `dst ← new fst,snd`: allocate a fresh cell holding the two register
    /// values and store its pointer in `dst`.
    New { dst: Reg, fst: Reg, snd: Reg },
    /// `dst1,dst2 ← get src`: load the cell addressed by `src`; `dst1` is
    /// written first, so on `dst1 == dst2` the second component wins.
    Get { dst1: Reg, dst2: Reg, src: Reg },
    /// `update cell,val`: overwrite the second component of the addressed
    /// cell with the old value of `val`, loading the old cell pair into
    /// registers `cell` and `val`.
    Update { cell: Reg, val: Reg },
    /// `free cell`: drop the addressed cell and null the register.
    Free { cell: Reg },
    /// `flip a,b`: exchange two registers.
    Flip { a: Reg, b: Reg },
    /// `dst ← set lit`: write a literal integer, or empty for `None`.
    Set { dst: Reg, lit: Option<i64> },
    /// `dst ← arith op lhs,rhs`: integer arithmetic (extension).
    Arith {
        op: ArithOp,
        dst: Reg,
        lhs: Reg,
        rhs: Reg,
    },
}

/// A code fragment: instructions chained onto a terminator.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Code {
    Seq(Instr, Box<Code>),
    /// Branch on a register holding an integer, nulling it either way.
    IfZero(Reg, Box<Code>, Box<Code>),
    /// Emit the first three registers at (the wiring image of) a port and
    /// finish; jumps instead when the image is this engine's own input.
    Spark(PortName),
    /// Like [`Code::Spark`] but the thread continues (extension used by the
    /// parallel-composition engine).
    #[cfg(feature = "par")]
    Fork(PortName, Box<Code>),
    End,
}

impl Code {
    /// Chains instructions in order onto a terminator.
    pub fn seq(instrs: impl IntoIterator<Item = Instr>, tail: Code) -> Code {
        let mut v: Vec<Instr> = instrs.into_iter().collect();
        let mut out = tail;
        while let Some(i) = v.pop() {
            out = Code::Seq(i, Box::new(out));
        }
        out
    }

    /// All port names this fragment can spark.
    pub fn spark_targets(&self) -> Vec<PortName> {
        let mut out = Vec::new();
        fn walk(c: &Code, out: &mut Vec<PortName>) {
            match c {
                Code::Seq(_, k) => walk(k, out),
                Code::IfZero(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Code::Spark(p) => out.push(*p),
                #[cfg(feature = "par")]
                Code::Fork(p, k) => {
                    out.push(*p);
                    walk(k, out);
                }
                Code::End => {}
            }
        }
        walk(self, &mut out);
        out
    }

    fn registers(&self) -> Vec<Reg> {
        let mut out = Vec::new();
        fn instr_regs(i: &Instr, out: &mut Vec<Reg>) {
            match *i {
                Instr::New { dst, fst, snd } => out.extend([dst, fst, snd]),
                Instr::Get { dst1, dst2, src } => out.extend([dst1, dst2, src]),
                Instr::Update { cell, val } => out.extend([cell, val]),
                Instr::Free { cell } => out.push(cell),
                Instr::Flip { a, b } => out.extend([a, b]),
                Instr::Set { dst, .. } => out.push(dst),
                Instr::Arith { dst, lhs, rhs, .. } => out.extend([dst, lhs, rhs]),
            }
        }
        fn walk(c: &Code, out: &mut Vec<Reg>) {
            match c {
                Code::Seq(i, k) => {
                    instr_regs(i, out);
                    walk(k, out);
                }
                Code::IfZero(r, a, b) => {
                    out.push(*r);
                    walk(a, out);
                    walk(b, out);
                }
                #[cfg(feature = "par")]
                Code::Fork(_, k) => walk(k, out),
                Code::Spark(_) | Code::End => {}
            }
        }
        walk(self, &mut out);
        out
    }
}

/// Rewrites every spark target through a port renaming.
pub fn rename_code(c: &Code, f: &impl Fn(PortName) -> PortName) -> Code {
    match c {
        Code::Seq(i, k) => Code::Seq(i.clone(), Box::new(rename_code(k, f))),
        Code::IfZero(r, a, b) => Code::IfZero(
            *r,
            Box::new(rename_code(a, f)),
            Box::new(rename_code(b, f)),
        ),
        Code::Spark(p) => Code::Spark(f(*p)),
        #[cfg(feature = "par")]
        Code::Fork(p, k) => Code::Fork(f(*p), Box::new(rename_code(k, f))),
        Code::End => Code::End,
    }
}

/// Copycat macro for initial questions: forward, remembering the link from
/// the fresh output pointer back to the input's own pointer.
pub fn cci(tail: Code) -> Code {
    Code::seq(
        [
            Instr::Flip { a: R0, b: R1 },
            Instr::New {
                dst: R1,
                fst: R0,
                snd: R3,
            },
        ],
        tail,
    )
}

/// Copycat macro for non-initial questions: mint the forwarding cell, then
/// dereference the justifier to find the matching pointer on the far side.
pub fn ccq(tail: Code) -> Code {
    Code::seq(
        [
            Instr::New {
                dst: R1,
                fst: R1,
                snd: R3,
            },
            Instr::Get {
                dst1: R0,
                dst2: R3,
                src: R0,
            },
        ],
        tail,
    )
}

/// Copycat macro for answers: dereference and release the question's cell.
pub fn cca(tail: Code) -> Code {
    Code::seq(
        [
            Instr::Flip { a: R0, b: R1 },
            Instr::Get {
                dst1: R0,
                dst2: R3,
                src: R1,
            },
            Instr::Free { cell: R1 },
        ],
        tail,
    )
}

/// Composition-operator macro for initial questions on the shared interface:
/// extend the justifier before forwarding.
pub fn exi(tail: Code) -> Code {
    Code::seq(
        [
            Instr::Get {
                dst1: R0,
                dst2: R3,
                src: R0,
            },
            Instr::New {
                dst: R1,
                fst: R1,
                snd: R0,
            },
        ],
        tail,
    )
}

/// Composition-operator macro for initial questions leaving through an
/// extended pointer: follow the extension stored in the justifier's cell.
pub fn exq(tail: Code) -> Code {
    Code::seq(
        [
            Instr::Get {
                dst1: Reg::Null,
                dst2: R0,
                src: R0,
            },
            Instr::New {
                dst: R1,
                fst: R1,
                snd: R3,
            },
        ],
        tail,
    )
}

/// An engine: an interface plus code for each of its input ports.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Engine {
    pub interface: Interface,
    pub port_map: BTreeMap<PortName, Code>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("port map misses input port {0}")]
    MissingInput(PortName),
    #[error("port map covers {0} which is not an input port")]
    NotAnInput(PortName),
    #[error("code sparks {0} which is not an output port of the engine")]
    BadSparkTarget(PortName),
    #[error("register index {0} out of range")]
    BadRegister(u8),
}

/// Checks that the port map is total on exactly the input ports, that every
/// spark target is one of the engine's own output ports, and that all
/// register indices are in range.
pub fn validate_engine(e: &Engine) -> Result<(), Vec<EngineError>> {
    let mut errs = Vec::new();
    for (port, pol) in e.interface.iter() {
        if pol == Polarity::O && !e.port_map.contains_key(&port) {
            errs.push(EngineError::MissingInput(port));
        }
    }
    for (port, code) in &e.port_map {
        if !e.interface.has(Polarity::O, *port) {
            errs.push(EngineError::NotAnInput(*port));
        }
        for t in code.spark_targets() {
            if !e.interface.has(Polarity::P, t) {
                errs.push(EngineError::BadSparkTarget(t));
            }
        }
        for r in code.registers() {
            if let Reg::R(i) = r {
                if i as usize >= REG_COUNT {
                    errs.push(EngineError::BadRegister(i));
                }
            }
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// Register file of one thread.
pub type Regs = [Data; REG_COUNT];

/// One live thread: remaining code plus registers.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Thread {
    pub code: Code,
    pub regs: Regs,
}

fn reg_read(regs: &Regs, r: Reg) -> Data {
    match r {
        Reg::R(i) => regs[i as usize],
        Reg::Null => Data::Empty,
    }
}

fn reg_write(regs: &mut Regs, r: Reg, d: Data) {
    if let Reg::R(i) = r {
        regs[i as usize] = d;
    }
}

/// Message payload: the first three registers of the sparking thread.
pub type Payload = [Data; MSG_REGS];

/// A message in flight, already routed to its destination port.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Message {
    pub port: PortName,
    pub payload: Payload,
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.port, self.payload[0], self.payload[1], self.payload[2]
        )
    }
}

/// Spreads a payload into a fresh register file, padding with empty.
pub fn regs_from_payload(p: Payload) -> Regs {
    [p[0], p[1], p[2], Data::Empty]
}

/// Truncates a register file to a payload.
pub fn payload_from_regs(r: &Regs) -> Payload {
    [r[0], r[1], r[2]]
}

/// Why a thread died abnormally.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum FaultKind {
    /// Branching on a register that does not hold an integer.
    TypeFault,
    /// Heap access through a register not holding a live pointer.
    DanglingAccess,
    /// Spark through a port the wiring does not cover.
    Unwired,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Fault {
    pub kind: FaultKind,
    pub detail: String,
}

/// Run-time state of one engine.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct EngineConfig {
    pub threads: Vec<Thread>,
    pub heap: BTreeMap<PointerName, (Data, Data)>,
    pub faults: Vec<Fault>,
}

/// The engine starts with no threads and an empty heap.
pub fn initial_engine() -> EngineConfig {
    EngineConfig::default()
}

/// Observable effect of one engine step.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum StepLabel {
    Silent,
    Output(Message),
}

/// Result of stepping a single thread.
enum ThreadStep {
    /// Thread continues with new code and registers; heap already updated.
    Continue(Thread),
    /// Thread finished silently.
    Done,
    /// Thread emitted a message and finished.
    Emit(Message),
    /// Thread faulted.
    Fault(Fault),
    /// Thread continues and spawned another (fork extension).
    #[cfg(feature = "par")]
    Split(Thread, Thread),
    /// Thread continues after emitting (fork extension).
    #[cfg(feature = "par")]
    EmitContinue(Message, Thread),
}

fn step_thread(
    e: &Engine,
    chi: &BTreeMap<PortName, PortName>,
    heap: &mut BTreeMap<PointerName, (Data, Data)>,
    t: &Thread,
    minter: &NameMinter,
) -> ThreadStep {
    let mut regs = t.regs;
    match &t.code {
        Code::Seq(instr, rest) => {
            match *instr {
                Instr::New { dst, fst, snd } => {
                    let cell = (reg_read(&regs, fst), reg_read(&regs, snd));
                    let p = minter.fresh_pointer();
                    debug_assert!(!heap.contains_key(&p), "minted pointer not fresh");
                    heap.insert(p, cell);
                    reg_write(&mut regs, dst, Data::Ptr(p));
                }
                Instr::Get { dst1, dst2, src } => match reg_read(&regs, src) {
                    Data::Ptr(p) => match heap.get(&p) {
                        Some(&(d, d2)) => {
                            reg_write(&mut regs, dst1, d);
                            reg_write(&mut regs, dst2, d2);
                        }
                        None => {
                            return ThreadStep::Fault(Fault {
                                kind: FaultKind::DanglingAccess,
                                detail: format!("get through dangling pointer {p}"),
                            })
                        }
                    },
                    d => {
                        return ThreadStep::Fault(Fault {
                            kind: FaultKind::DanglingAccess,
                            detail: format!("get through non-pointer {d}"),
                        })
                    }
                },
                Instr::Update { cell, val } => match reg_read(&regs, cell) {
                    Data::Ptr(p) => match heap.get(&p).copied() {
                        Some((d, d2)) => {
                            let written = reg_read(&regs, val);
                            heap.insert(p, (d, written));
                            reg_write(&mut regs, cell, d);
                            reg_write(&mut regs, val, d2);
                        }
                        None => {
                            return ThreadStep::Fault(Fault {
                                kind: FaultKind::DanglingAccess,
                                detail: format!("update through dangling pointer {p}"),
                            })
                        }
                    },
                    d => {
                        return ThreadStep::Fault(Fault {
                            kind: FaultKind::DanglingAccess,
                            detail: format!("update through non-pointer {d}"),
                        })
                    }
                },
                Instr::Free { cell } => match reg_read(&regs, cell) {
                    Data::Ptr(p) => {
                        if heap.remove(&p).is_none() {
                            return ThreadStep::Fault(Fault {
                                kind: FaultKind::DanglingAccess,
                                detail: format!("free of dangling pointer {p}"),
                            });
                        }
                        reg_write(&mut regs, cell, Data::Empty);
                    }
                    d => {
                        return ThreadStep::Fault(Fault {
                            kind: FaultKind::DanglingAccess,
                            detail: format!("free of non-pointer {d}"),
                        })
                    }
                },
                Instr::Flip { a, b } => {
                    let da = reg_read(&regs, a);
                    let db = reg_read(&regs, b);
                    reg_write(&mut regs, a, db);
                    reg_write(&mut regs, b, da);
                }
                Instr::Set { dst, lit } => {
                    reg_write(&mut regs, dst, lit.map(Data::Int).unwrap_or(Data::Empty));
                }
                Instr::Arith { op, dst, lhs, rhs } => {
                    match (reg_read(&regs, lhs), reg_read(&regs, rhs)) {
                        (Data::Int(l), Data::Int(r)) => {
                            reg_write(&mut regs, dst, Data::Int(op.eval(l, r)));
                        }
                        (l, r) => {
                            return ThreadStep::Fault(Fault {
                                kind: FaultKind::TypeFault,
                                detail: format!("arith on non-integers {l}, {r}"),
                            })
                        }
                    }
                }
            }
            ThreadStep::Continue(Thread {
                code: (**rest).clone(),
                regs,
            })
        }
        Code::IfZero(r, zero, nonzero) => match reg_read(&regs, *r) {
            Data::Int(v) => {
                reg_write(&mut regs, *r, Data::Empty);
                let code = if v == 0 {
                    (**zero).clone()
                } else {
                    (**nonzero).clone()
                };
                ThreadStep::Continue(Thread { code, regs })
            }
            d => ThreadStep::Fault(Fault {
                kind: FaultKind::TypeFault,
                detail: format!("ifzero on non-integer {d}"),
            }),
        },
        Code::Spark(a) => {
            let Some(&dest) = chi.get(a) else {
                return ThreadStep::Fault(Fault {
                    kind: FaultKind::Unwired,
                    detail: format!("spark through unwired port {a}"),
                });
            };
            let payload = payload_from_regs(&regs);
            if e.interface.has(Polarity::O, dest) {
                let code = e.port_map.get(&dest).expect("validated port map").clone();
                ThreadStep::Continue(Thread {
                    code,
                    regs: regs_from_payload(payload),
                })
            } else {
                ThreadStep::Emit(Message {
                    port: dest,
                    payload,
                })
            }
        }
        #[cfg(feature = "par")]
        Code::Fork(a, rest) => {
            let Some(&dest) = chi.get(a) else {
                return ThreadStep::Fault(Fault {
                    kind: FaultKind::Unwired,
                    detail: format!("fork through unwired port {a}"),
                });
            };
            let payload = payload_from_regs(&regs);
            let cont = Thread {
                code: (**rest).clone(),
                regs,
            };
            if e.interface.has(Polarity::O, dest) {
                let code = e.port_map.get(&dest).expect("validated port map").clone();
                ThreadStep::Split(
                    cont,
                    Thread {
                        code,
                        regs: regs_from_payload(payload),
                    },
                )
            } else {
                ThreadStep::EmitContinue(
                    Message {
                        port: dest,
                        payload,
                    },
                    cont,
                )
            }
        }
        Code::End => ThreadStep::Done,
    }
}

/// Steps one chosen thread of an engine configuration; `None` when the
/// index is out of range.
///
/// `chi` is the wiring of the enclosing net; it decides whether a spark
/// jumps (stays inside this engine) or emits a message.
pub fn engine_step_one(
    e: &Engine,
    chi: &BTreeMap<PortName, PortName>,
    cfg: &EngineConfig,
    i: usize,
    minter: &NameMinter,
) -> Option<(StepLabel, EngineConfig)> {
    if i >= cfg.threads.len() {
        return None;
    }
    let mut next = cfg.clone();
    let t = next.threads.remove(i);
    let step = step_thread(e, chi, &mut next.heap, &t, minter);
    let label = match step {
        ThreadStep::Continue(t2) => {
            next.threads.insert(i, t2);
            StepLabel::Silent
        }
        ThreadStep::Done => StepLabel::Silent,
        ThreadStep::Emit(m) => StepLabel::Output(m),
        ThreadStep::Fault(f) => {
            next.faults.push(f);
            StepLabel::Silent
        }
        #[cfg(feature = "par")]
        ThreadStep::Split(t2, spawned) => {
            next.threads.insert(i, t2);
            next.threads.push(spawned);
            StepLabel::Silent
        }
        #[cfg(feature = "par")]
        ThreadStep::EmitContinue(m, t2) => {
            next.threads.insert(i, t2);
            StepLabel::Output(m)
        }
    };
    Some((label, next))
}

/// All one-step successors of an engine configuration: one per live thread.
pub fn engine_step(
    e: &Engine,
    chi: &BTreeMap<PortName, PortName>,
    cfg: &EngineConfig,
    minter: &NameMinter,
) -> Vec<(StepLabel, EngineConfig)> {
    (0..cfg.threads.len())
        .filter_map(|i| engine_step_one(e, chi, cfg, i, minter))
        .collect()
}

/// Spawns the input thread for a message addressed to one of the engine's
/// input ports.
pub fn engine_receive(e: &Engine, cfg: &EngineConfig, m: &Message) -> Option<EngineConfig> {
    if !e.interface.has(Polarity::O, m.port) {
        return None;
    }
    let code = e.port_map.get(&m.port)?.clone();
    let mut next = cfg.clone();
    next.threads.push(Thread {
        code,
        regs: regs_from_payload(m.payload),
    });
    Some(next)
}

/// A document failed to parse back into a machine value.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed document: {0}")]
pub struct CodecError(pub String);

fn codec_err(msg: impl Into<String>) -> CodecError {
    CodecError(msg.into())
}

fn reg_to_json(r: Reg) -> Value {
    match r {
        Reg::R(i) => json!(i),
        Reg::Null => Value::Null,
    }
}

fn reg_from_json(v: &Value) -> Result<Reg, CodecError> {
    match v {
        Value::Null => Ok(Reg::Null),
        Value::Number(n) => match n.as_u64() {
            Some(i) if i < REG_COUNT as u64 => Ok(Reg::R(i as u8)),
            _ => Err(codec_err(format!("register index {n} out of range"))),
        },
        _ => Err(codec_err(format!("expected a register, found {v}"))),
    }
}

fn port_to_json(p: PortName) -> Value {
    Value::String(atom_hex(p.0))
}

fn port_from_json(v: &Value) -> Result<PortName, CodecError> {
    let s = v
        .as_str()
        .ok_or_else(|| codec_err(format!("expected a port atom, found {v}")))?;
    parse_atom_hex(s)
        .map(PortName)
        .map_err(|e| codec_err(e.to_string()))
}

fn instr_to_json(i: &Instr) -> Value {
    match *i {
        Instr::New { dst, fst, snd } => {
            json!(["new", reg_to_json(dst), reg_to_json(fst), reg_to_json(snd)])
        }
        Instr::Get { dst1, dst2, src } => {
            json!(["get", reg_to_json(dst1), reg_to_json(dst2), reg_to_json(src)])
        }
        Instr::Update { cell, val } => json!(["update", reg_to_json(cell), reg_to_json(val)]),
        Instr::Free { cell } => json!(["free", reg_to_json(cell)]),
        Instr::Flip { a, b } => json!(["flip", reg_to_json(a), reg_to_json(b)]),
        Instr::Set { dst, lit } => json!(["set", reg_to_json(dst), lit]),
        Instr::Arith { op, dst, lhs, rhs } => json!([
            "arith",
            op.mnemonic(),
            reg_to_json(dst),
            reg_to_json(lhs),
            reg_to_json(rhs)
        ]),
    }
}

/// Renders a code fragment as one array of mnemonic steps ending in a
/// terminator; `ifzero` branches nest as sub-arrays.
pub fn code_to_json(c: &Code) -> Value {
    let mut steps = Vec::new();
    let mut cur = c;
    loop {
        match cur {
            Code::Seq(i, k) => {
                steps.push(instr_to_json(i));
                cur = k;
            }
            Code::IfZero(r, a, b) => {
                steps.push(json!([
                    "ifzero",
                    reg_to_json(*r),
                    code_to_json(a),
                    code_to_json(b)
                ]));
                break;
            }
            Code::Spark(p) => {
                steps.push(json!(["spark", port_to_json(*p)]));
                break;
            }
            #[cfg(feature = "par")]
            Code::Fork(p, k) => {
                steps.push(json!(["fork", port_to_json(*p)]));
                cur = k;
            }
            Code::End => {
                steps.push(json!(["end"]));
                break;
            }
        }
    }
    Value::Array(steps)
}

fn step_parts(v: &Value) -> Result<(&str, &[Value]), CodecError> {
    let arr = v
        .as_array()
        .ok_or_else(|| codec_err(format!("expected an instruction array, found {v}")))?;
    let head = arr
        .first()
        .and_then(Value::as_str)
        .ok_or_else(|| codec_err(format!("instruction without a mnemonic: {v}")))?;
    Ok((head, &arr[1..]))
}

fn args_of<const N: usize>(head: &str, rest: &[Value]) -> Result<[Value; N], CodecError> {
    let v: Vec<Value> = rest.to_vec();
    v.try_into()
        .map_err(|_| codec_err(format!("`{head}` takes {N} operands")))
}

fn instr_from_json(head: &str, rest: &[Value]) -> Result<Instr, CodecError> {
    match head {
        "new" => {
            let [d, f, s] = args_of("new", rest)?;
            Ok(Instr::New {
                dst: reg_from_json(&d)?,
                fst: reg_from_json(&f)?,
                snd: reg_from_json(&s)?,
            })
        }
        "get" => {
            let [d1, d2, s] = args_of("get", rest)?;
            Ok(Instr::Get {
                dst1: reg_from_json(&d1)?,
                dst2: reg_from_json(&d2)?,
                src: reg_from_json(&s)?,
            })
        }
        "update" => {
            let [c, v] = args_of("update", rest)?;
            Ok(Instr::Update {
                cell: reg_from_json(&c)?,
                val: reg_from_json(&v)?,
            })
        }
        "free" => {
            let [c] = args_of("free", rest)?;
            Ok(Instr::Free {
                cell: reg_from_json(&c)?,
            })
        }
        "flip" => {
            let [a, b] = args_of("flip", rest)?;
            Ok(Instr::Flip {
                a: reg_from_json(&a)?,
                b: reg_from_json(&b)?,
            })
        }
        "set" => {
            let [d, lit] = args_of("set", rest)?;
            let lit = match &lit {
                Value::Null => None,
                v => Some(
                    v.as_i64()
                        .ok_or_else(|| codec_err(format!("bad literal {v}")))?,
                ),
            };
            Ok(Instr::Set {
                dst: reg_from_json(&d)?,
                lit,
            })
        }
        "arith" => {
            let [op, d, l, r] = args_of("arith", rest)?;
            let op = match op.as_str() {
                Some("add") => ArithOp::Add,
                Some("sub") => ArithOp::Sub,
                Some("mul") => ArithOp::Mul,
                _ => return Err(codec_err(format!("unknown arithmetic op {op}"))),
            };
            Ok(Instr::Arith {
                op,
                dst: reg_from_json(&d)?,
                lhs: reg_from_json(&l)?,
                rhs: reg_from_json(&r)?,
            })
        }
        _ => Err(codec_err(format!("unknown mnemonic `{head}`"))),
    }
}

/// Parses a code array rendered by [`code_to_json`].
pub fn code_from_json(v: &Value) -> Result<Code, CodecError> {
    let steps = v
        .as_array()
        .ok_or_else(|| codec_err(format!("expected a code array, found {v}")))?;
    let (last, init) = steps
        .split_last()
        .ok_or_else(|| codec_err("empty code block".to_string()))?;
    let (head, rest) = step_parts(last)?;
    let mut out = match head {
        "spark" => {
            let [p] = args_of("spark", rest)?;
            Code::Spark(port_from_json(&p)?)
        }
        "end" => {
            if !rest.is_empty() {
                return Err(codec_err("`end` takes no operands".to_string()));
            }
            Code::End
        }
        "ifzero" => {
            let [r, a, b] = args_of("ifzero", rest)?;
            Code::IfZero(
                reg_from_json(&r)?,
                Box::new(code_from_json(&a)?),
                Box::new(code_from_json(&b)?),
            )
        }
        _ => {
            return Err(codec_err(format!(
                "code block must end in a terminator, found `{head}`"
            )))
        }
    };
    for s in init.iter().rev() {
        let (head, rest) = step_parts(s)?;
        out = match head {
            "spark" | "end" | "ifzero" => {
                return Err(codec_err(format!("terminator `{head}` before block end")))
            }
            "fork" => fork_from_json(rest, out)?,
            _ => Code::Seq(instr_from_json(head, rest)?, Box::new(out)),
        };
    }
    Ok(out)
}

#[cfg(feature = "par")]
fn fork_from_json(rest: &[Value], tail: Code) -> Result<Code, CodecError> {
    let [p] = args_of("fork", rest)?;
    Ok(Code::Fork(port_from_json(&p)?, Box::new(tail)))
}

#[cfg(not(feature = "par"))]
fn fork_from_json(_rest: &[Value], _tail: Code) -> Result<Code, CodecError> {
    Err(codec_err("`fork` requires the par feature".to_string()))
}

fn polarity_to_json(l: Polarity) -> Value {
    Value::String(l.to_string())
}

fn polarity_from_json(v: &Value) -> Result<Polarity, CodecError> {
    match v.as_str() {
        Some("O") => Ok(Polarity::O),
        Some("P") => Ok(Polarity::P),
        _ => Err(codec_err(format!("expected a polarity, found {v}"))),
    }
}

/// Renders an interface as a port/polarity list in atom order.
pub fn interface_to_json(a: &Interface) -> Value {
    Value::Array(
        a.iter()
            .map(|(p, l)| json!([port_to_json(p), polarity_to_json(l)]))
            .collect(),
    )
}

/// Parses an interface rendered by [`interface_to_json`].
pub fn interface_from_json(v: &Value) -> Result<Interface, CodecError> {
    let rows = v
        .as_array()
        .ok_or_else(|| codec_err(format!("expected an interface array, found {v}")))?;
    let mut out = Interface::empty();
    for row in rows {
        let [p, l] = args_of::<2>("port row", row.as_array().map_or(&[][..], Vec::as_slice))?;
        out.insert(port_from_json(&p)?, polarity_from_json(&l)?);
    }
    Ok(out)
}

/// Renders an engine as its interface plus the port-to-code map.
pub fn engine_to_json(e: &Engine) -> Value {
    let port_map: serde_json::Map<String, Value> = e
        .port_map
        .iter()
        .map(|(p, c)| (atom_hex(p.0), code_to_json(c)))
        .collect();
    json!({
        "interface": interface_to_json(&e.interface),
        "port_map": port_map,
    })
}

/// Parses an engine rendered by [`engine_to_json`].
pub fn engine_from_json(v: &Value) -> Result<Engine, CodecError> {
    let interface = interface_from_json(
        v.get("interface")
            .ok_or_else(|| codec_err("engine without an interface".to_string()))?,
    )?;
    let rows = v
        .get("port_map")
        .and_then(Value::as_object)
        .ok_or_else(|| codec_err("engine without a port map".to_string()))?;
    let mut port_map = BTreeMap::new();
    for (p, c) in rows {
        let port = parse_atom_hex(p)
            .map(PortName)
            .map_err(|e| codec_err(e.to_string()))?;
        port_map.insert(port, code_from_json(c)?);
    }
    Ok(Engine {
        interface,
        port_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nominal::{NameMinter, PointerName, PortName};

    fn minter() -> NameMinter {
        NameMinter::new(1)
    }

    fn run1(code: Code, regs: Regs, heap: &[(u64, (Data, Data))]) -> (Thread, EngineConfig) {
        let e = Engine {
            interface: Interface::empty(),
            port_map: BTreeMap::new(),
        };
        let cfg = EngineConfig {
            threads: vec![Thread { code, regs }],
            heap: heap
                .iter()
                .map(|(p, c)| (PointerName(*p), *c))
                .collect(),
            faults: vec![],
        };
        let succ = engine_step(&e, &BTreeMap::new(), &cfg, &minter());
        assert_eq!(succ.len(), 1);
        let (label, next) = succ.into_iter().next().unwrap();
        assert_eq!(label, StepLabel::Silent);
        assert_eq!(next.threads.len(), 1);
        (next.threads[0].clone(), next)
    }

    #[test]
    fn new_allocates_fresh_cell() {
        let p = PointerName(77);
        let (t, cfg) = run1(
            Code::seq(
                [Instr::New {
                    dst: R1,
                    fst: R0,
                    snd: R3,
                }],
                Code::End,
            ),
            [Data::Ptr(p), Data::Empty, Data::Empty, Data::Empty],
            &[],
        );
        let q = match t.regs[1] {
            Data::Ptr(q) => q,
            d => panic!("expected pointer, got {d}"),
        };
        assert_eq!(cfg.heap.get(&q), Some(&(Data::Ptr(p), Data::Empty)));
    }

    #[test]
    fn get_loads_both_components_in_order() {
        let p = PointerName(5);
        let (t, _) = run1(
            Code::seq(
                [Instr::Get {
                    dst1: R0,
                    dst2: R3,
                    src: R0,
                }],
                Code::End,
            ),
            [Data::Ptr(p), Data::Empty, Data::Empty, Data::Empty],
            &[(5, (Data::Int(9), Data::Int(8)))],
        );
        assert_eq!(t.regs[0], Data::Int(9));
        assert_eq!(t.regs[3], Data::Int(8));
    }

    #[test]
    fn get_same_destination_keeps_second_component() {
        let p = PointerName(5);
        let (t, _) = run1(
            Code::seq(
                [Instr::Get {
                    dst1: R1,
                    dst2: R1,
                    src: R0,
                }],
                Code::End,
            ),
            [Data::Ptr(p), Data::Empty, Data::Empty, Data::Empty],
            &[(5, (Data::Int(9), Data::Int(8)))],
        );
        assert_eq!(t.regs[1], Data::Int(8));
    }

    #[test]
    fn update_writes_old_register_and_loads_old_pair() {
        let p = PointerName(5);
        let (t, cfg) = run1(
            Code::seq([Instr::Update { cell: R3, val: R2 }], Code::End),
            [Data::Empty, Data::Empty, Data::Int(8), Data::Ptr(p)],
            &[(5, (Data::Int(1), Data::Int(0)))],
        );
        assert_eq!(cfg.heap.get(&p), Some(&(Data::Int(1), Data::Int(8))));
        assert_eq!(t.regs[3], Data::Int(1));
        assert_eq!(t.regs[2], Data::Int(0));
    }

    #[test]
    fn free_removes_cell_and_nulls_register() {
        let p = PointerName(5);
        let (t, cfg) = run1(
            Code::seq([Instr::Free { cell: R1 }], Code::End),
            [Data::Empty, Data::Ptr(p), Data::Empty, Data::Empty],
            &[(5, (Data::Empty, Data::Empty))],
        );
        assert!(cfg.heap.is_empty());
        assert_eq!(t.regs[1], Data::Empty);
    }

    #[test]
    fn flip_swaps_registers() {
        let (t, _) = run1(
            Code::seq([Instr::Flip { a: R0, b: R1 }], Code::End),
            [Data::Int(1), Data::Int(2), Data::Empty, Data::Empty],
            &[],
        );
        assert_eq!(t.regs[0], Data::Int(2));
        assert_eq!(t.regs[1], Data::Int(1));
    }

    #[test]
    fn set_writes_literal_or_empty() {
        let (t, _) = run1(
            Code::seq(
                [
                    Instr::Set {
                        dst: R2,
                        lit: Some(5),
                    },
                    Instr::Set { dst: R0, lit: None },
                ],
                Code::End,
            ),
            [Data::Int(9), Data::Empty, Data::Empty, Data::Empty],
            &[],
        );
        assert_eq!(t.regs[2], Data::Int(5));
        let (t, _) = run1(t.code, t.regs, &[]);
        assert_eq!(t.regs[0], Data::Empty);
    }

    #[test]
    fn null_register_reads_empty_and_discards_writes() {
        let p = PointerName(5);
        let (t, _) = run1(
            Code::seq(
                [Instr::Get {
                    dst1: Reg::Null,
                    dst2: R0,
                    src: R0,
                }],
                Code::End,
            ),
            [Data::Ptr(p), Data::Empty, Data::Empty, Data::Empty],
            &[(5, (Data::Int(1), Data::Int(2)))],
        );
        assert_eq!(t.regs[0], Data::Int(2));
    }

    #[test]
    fn ifzero_branches_and_nulls() {
        let branch = |v: i64| {
            let code = Code::IfZero(
                R3,
                Box::new(Code::seq(
                    [Instr::Set {
                        dst: R0,
                        lit: Some(10),
                    }],
                    Code::End,
                )),
                Box::new(Code::seq(
                    [Instr::Set {
                        dst: R0,
                        lit: Some(20),
                    }],
                    Code::End,
                )),
            );
            run1(
                code,
                [Data::Empty, Data::Empty, Data::Empty, Data::Int(v)],
                &[],
            )
        };
        let (t0, _) = branch(0);
        assert_eq!(t0.regs[3], Data::Empty);
        let (t0, _) = run1(t0.code, t0.regs, &[]);
        assert_eq!(t0.regs[0], Data::Int(10));
        let (t1, _) = branch(3);
        let (t1, _) = run1(t1.code, t1.regs, &[]);
        assert_eq!(t1.regs[0], Data::Int(20));
    }

    #[test]
    fn ifzero_on_non_integer_faults() {
        let e = Engine {
            interface: Interface::empty(),
            port_map: BTreeMap::new(),
        };
        let cfg = EngineConfig {
            threads: vec![Thread {
                code: Code::IfZero(R0, Box::new(Code::End), Box::new(Code::End)),
                regs: [Data::Empty; 4],
            }],
            heap: BTreeMap::new(),
            faults: vec![],
        };
        let succ = engine_step(&e, &BTreeMap::new(), &cfg, &minter());
        let (_, next) = &succ[0];
        assert!(next.threads.is_empty());
        assert_eq!(next.faults.len(), 1);
        assert_eq!(next.faults[0].kind, FaultKind::TypeFault);
    }

    #[test]
    fn heap_access_through_dangling_pointer_faults() {
        let e = Engine {
            interface: Interface::empty(),
            port_map: BTreeMap::new(),
        };
        let cfg = EngineConfig {
            threads: vec![Thread {
                code: Code::seq(
                    [Instr::Get {
                        dst1: R0,
                        dst2: R1,
                        src: R0,
                    }],
                    Code::End,
                ),
                regs: [Data::Ptr(PointerName(99)), Data::Empty, Data::Empty, Data::Empty],
            }],
            heap: BTreeMap::new(),
            faults: vec![],
        };
        let succ = engine_step(&e, &BTreeMap::new(), &cfg, &minter());
        assert_eq!(succ[0].1.faults[0].kind, FaultKind::DanglingAccess);
    }

    #[test]
    fn spark_external_emits_first_three_registers() {
        let a = PortName(1);
        let b = PortName(2);
        let e = Engine {
            interface: Interface::from_pairs([(a, Polarity::P)]),
            port_map: BTreeMap::new(),
        };
        let chi: BTreeMap<_, _> = [(a, b)].into_iter().collect();
        let p = PointerName(7);
        let q = PointerName(8);
        let cfg = EngineConfig {
            threads: vec![Thread {
                code: Code::Spark(a),
                regs: [Data::Ptr(p), Data::Ptr(q), Data::Empty, Data::Int(7)],
            }],
            heap: BTreeMap::new(),
            faults: vec![],
        };
        let succ = engine_step(&e, &chi, &cfg, &minter());
        assert_eq!(succ.len(), 1);
        let (label, next) = &succ[0];
        assert_eq!(
            *label,
            StepLabel::Output(Message {
                port: b,
                payload: [Data::Ptr(p), Data::Ptr(q), Data::Empty],
            })
        );
        assert!(next.threads.is_empty());
    }

    #[test]
    fn spark_wired_to_own_input_jumps_and_clears_fourth_register() {
        let out = PortName(1);
        let inp = PortName(2);
        let e = Engine {
            interface: Interface::from_pairs([(out, Polarity::P), (inp, Polarity::O)]),
            port_map: [(inp, Code::End)].into_iter().collect(),
        };
        let chi: BTreeMap<_, _> = [(out, inp)].into_iter().collect();
        let cfg = EngineConfig {
            threads: vec![Thread {
                code: Code::Spark(out),
                regs: [Data::Int(1), Data::Int(2), Data::Int(3), Data::Int(4)],
            }],
            heap: BTreeMap::new(),
            faults: vec![],
        };
        let succ = engine_step(&e, &chi, &cfg, &minter());
        let (label, next) = &succ[0];
        assert_eq!(*label, StepLabel::Silent);
        assert_eq!(next.threads.len(), 1);
        assert_eq!(next.threads[0].code, Code::End);
        assert_eq!(
            next.threads[0].regs,
            [Data::Int(1), Data::Int(2), Data::Int(3), Data::Empty]
        );
    }

    #[test]
    fn end_removes_thread() {
        let e = Engine {
            interface: Interface::empty(),
            port_map: BTreeMap::new(),
        };
        let cfg = EngineConfig {
            threads: vec![Thread {
                code: Code::End,
                regs: [Data::Empty; 4],
            }],
            heap: BTreeMap::new(),
            faults: vec![],
        };
        let succ = engine_step(&e, &BTreeMap::new(), &cfg, &minter());
        assert!(succ[0].1.threads.is_empty());
        assert!(succ[0].1.faults.is_empty());
    }

    #[test]
    fn receive_spawns_thread_with_padded_registers() {
        let inp = PortName(2);
        let e = Engine {
            interface: Interface::from_pairs([(inp, Polarity::O)]),
            port_map: [(inp, Code::End)].into_iter().collect(),
        };
        let cfg = initial_engine();
        let m = Message {
            port: inp,
            payload: [Data::Int(1), Data::Int(2), Data::Int(3)],
        };
        let next = engine_receive(&e, &cfg, &m).unwrap();
        assert_eq!(
            next.threads[0].regs,
            [Data::Int(1), Data::Int(2), Data::Int(3), Data::Empty]
        );
        assert!(engine_receive(&e, &cfg, &Message { port: PortName(9), payload: m.payload }).is_none());
    }

    #[test]
    fn validate_engine_requires_total_port_map_and_own_spark_targets() {
        let inp = PortName(1);
        let out = PortName(2);
        let mut e = Engine {
            interface: Interface::from_pairs([(inp, Polarity::O), (out, Polarity::P)]),
            port_map: BTreeMap::new(),
        };
        assert_eq!(
            validate_engine(&e),
            Err(vec![EngineError::MissingInput(inp)])
        );
        e.port_map.insert(inp, Code::Spark(PortName(9)));
        assert_eq!(
            validate_engine(&e),
            Err(vec![EngineError::BadSparkTarget(PortName(9))])
        );
        e.port_map.insert(inp, Code::Spark(out));
        assert_eq!(validate_engine(&e), Ok(()));
    }

    #[test]
    fn code_documents_roundtrip() {
        let out = PortName(7);
        let samples = [
            Code::End,
            cci(Code::Spark(out)),
            ccq(Code::Spark(out)),
            cca(Code::Spark(out)),
            exi(Code::Spark(out)),
            exq(Code::Spark(out)),
            Code::seq(
                [
                    Instr::Set { dst: R2, lit: Some(-5) },
                    Instr::Set { dst: R1, lit: None },
                    Instr::Arith { op: ArithOp::Mul, dst: R2, lhs: R3, rhs: R2 },
                    Instr::Update { cell: R0, val: R2 },
                ],
                Code::IfZero(R2, Box::new(Code::Spark(out)), Box::new(Code::End)),
            ),
            Code::Seq(
                Instr::Get { dst1: Reg::Null, dst2: R0, src: R0 },
                Box::new(Code::End),
            ),
        ];
        for c in samples {
            let doc = code_to_json(&c);
            assert_eq!(code_from_json(&doc).unwrap(), c, "{doc}");
        }
    }

    #[test]
    fn malformed_code_documents_are_rejected() {
        for doc in [
            serde_json::json!([]),
            serde_json::json!([["flip", 0, 1]]),
            serde_json::json!([["end"], ["end"]]),
            serde_json::json!([["frob", 0], ["end"]]),
            serde_json::json!([["flip", 0, 7], ["end"]]),
            serde_json::json!([["set", 0, "x"], ["end"]]),
            serde_json::json!([["free", 0, 0], ["end"]]),
            serde_json::json!([["spark", "zz"]]),
        ] {
            assert!(code_from_json(&doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn engine_documents_roundtrip() {
        let (inp, out) = (PortName(1), PortName(2));
        let e = Engine {
            interface: Interface::from_pairs([(inp, Polarity::O), (out, Polarity::P)]),
            port_map: [(inp, cci(Code::Spark(out)))].into_iter().collect(),
        };
        let doc = engine_to_json(&e);
        assert_eq!(engine_from_json(&doc).unwrap(), e);
        assert!(engine_from_json(&serde_json::json!({})).is_err());
    }
}
