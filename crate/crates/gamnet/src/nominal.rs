//! Names, polarities, interfaces and finitely supported renamings.
//!
//! Every port and pointer is an [`Atom`]: a 64-bit value whose top 16 bits
//! identify the minting node and whose low 48 bits are a per-node counter.
//! Ports and pointers live in separate sorts, enforced at the type level by
//! [`PortName`] and [`PointerName`]; the raw atom values may coincide across
//! sorts without ambiguity.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

/// Raw 64-bit name: 16-bit node tag in the high bits, 48-bit counter below.
pub type Atom = u64;

/// Number of counter bits in an atom.
pub const COUNTER_BITS: u32 = 48;
/// Node tag used for names minted by the environment (initial questions).
pub const ENV_NODE_TAG: u16 = 0xFFFF;
/// Node tag used for canonical opponent names during bounded exploration.
pub const OPPONENT_NODE_TAG: u16 = 0xFFFE;

/// Builds an atom from a node tag and counter value.
pub fn atom(node: u16, counter: u64) -> Atom {
    assert!(counter < (1u64 << COUNTER_BITS), "counter exhausted");
    ((node as u64) << COUNTER_BITS) | counter
}

/// Node tag of an atom.
pub fn atom_node(a: Atom) -> u16 {
    (a >> COUNTER_BITS) as u16
}

/// Renders an atom as 16 lowercase hex digits.
pub fn atom_hex(a: Atom) -> String {
    format!("{a:016x}")
}

/// Parses an atom rendered by [`atom_hex`].
pub fn parse_atom_hex(s: &str) -> Result<Atom, NominalError> {
    if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(NominalError::BadAtom(s.to_string()));
    }
    u64::from_str_radix(s, 16).map_err(|_| NominalError::BadAtom(s.to_string()))
}

macro_rules! name_sort {
    ($(#[$doc:meta])* $name:ident, $tag:expr) => {
        $(#[$doc])*
        #[derive(
            Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub Atom);

        impl $name {
            /// Sort tag used when serializing next to atoms of another sort.
            pub const SORT_TAG: u8 = $tag;

            /// Raw atom value.
            pub fn raw(self) -> Atom {
                self.0
            }

            /// Node that minted this name.
            pub fn node(self) -> u16 {
                atom_node(self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), atom_hex(self.0))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&atom_hex(self.0))
            }
        }
    };
}

name_sort!(
    /// Name of a communication port.
    PortName,
    0
);
name_sort!(
    /// Name of a heap cell, exchanged inside message payloads.
    PointerName,
    1
);

/// Ownership side of a port: `O` receives, `P` emits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Polarity {
    O,
    P,
}

impl Polarity {
    pub fn dual(self) -> Polarity {
        match self {
            Polarity::O => Polarity::P,
            Polarity::P => Polarity::O,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::O => "O",
            Polarity::P => "P",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NominalError {
    #[error("interfaces overlap on port {0}")]
    Overlap(PortName),
    #[error("interfaces do not have the same shape")]
    ShapeMismatch,
    #[error("renaming is not injective at {0}")]
    NotInjective(PortName),
    #[error("malformed atom literal {0:?}")]
    BadAtom(String),
}

/// A polarized set of port names.
///
/// Iteration order is the atom order, which keeps every derived operation
/// deterministic.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Interface {
    ports: BTreeMap<PortName, Polarity>,
}

impl Interface {
    pub fn empty() -> Interface {
        Interface::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (PortName, Polarity)>) -> Interface {
        Interface {
            ports: pairs.into_iter().collect(),
        }
    }

    pub fn insert(&mut self, port: PortName, pol: Polarity) {
        self.ports.insert(port, pol);
    }

    pub fn polarity(&self, port: PortName) -> Option<Polarity> {
        self.ports.get(&port).copied()
    }

    pub fn contains(&self, port: PortName) -> bool {
        self.ports.contains_key(&port)
    }

    /// True when the port is present with the given polarity.
    pub fn has(&self, pol: Polarity, port: PortName) -> bool {
        self.polarity(port) == Some(pol)
    }

    pub fn len(&self) -> usize {
        self.ports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ports.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PortName, Polarity)> + '_ {
        self.ports.iter().map(|(p, l)| (*p, *l))
    }

    /// All ports carrying polarity `pol`, in atom order.
    pub fn side(&self, pol: Polarity) -> Vec<PortName> {
        self.ports
            .iter()
            .filter(|(_, l)| **l == pol)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn support(&self) -> BTreeSet<PortName> {
        self.ports.keys().copied().collect()
    }

    /// Disjoint union; fails on any shared port name.
    pub fn tensor(&self, other: &Interface) -> Result<Interface, NominalError> {
        let mut out = self.clone();
        for (p, l) in other.iter() {
            if out.contains(p) {
                return Err(NominalError::Overlap(p));
            }
            out.insert(p, l);
        }
        Ok(out)
    }

    /// Same support, every polarity flipped.
    pub fn dual(&self) -> Interface {
        Interface {
            ports: self.ports.iter().map(|(p, l)| (*p, l.dual())).collect(),
        }
    }

    /// `A ⇒ B`, i.e. `dual(A) ⊗ B`.
    pub fn arrow(&self, other: &Interface) -> Result<Interface, NominalError> {
        self.dual().tensor(other)
    }

    /// Applies a port renaming to every name.
    pub fn rename(&self, perm: &Renaming<PortName>) -> Interface {
        Interface {
            ports: self
                .ports
                .iter()
                .map(|(p, l)| (perm.apply(*p), *l))
                .collect(),
        }
    }
}

/// Polarity-preserving bijection between two interfaces of the same shape.
///
/// The matching is deterministic: the O-side atoms of each interface are
/// paired in atom order, likewise the P-side atoms.
pub fn same_shape(a: &Interface, b: &Interface) -> Result<Renaming<PortName>, NominalError> {
    let mut pairs = Vec::new();
    for pol in [Polarity::O, Polarity::P] {
        let xs = a.side(pol);
        let ys = b.side(pol);
        if xs.len() != ys.len() {
            return Err(NominalError::ShapeMismatch);
        }
        pairs.extend(xs.into_iter().zip(ys));
    }
    Renaming::from_pairs(pairs)
}

/// Finitely supported injective renaming, identity off its support.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Renaming<T: Ord + Copy> {
    fwd: BTreeMap<T, T>,
    bwd: BTreeMap<T, T>,
}

impl<T: Ord + Copy + fmt::Debug> Renaming<T> {
    pub fn identity() -> Renaming<T> {
        Renaming {
            fwd: BTreeMap::new(),
            bwd: BTreeMap::new(),
        }
    }

    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (T, T)>,
    ) -> Result<Renaming<T>, NominalError> {
        let mut out = Renaming::identity();
        for (x, y) in pairs {
            if !out.bind(x, y) {
                return Err(NominalError::ShapeMismatch);
            }
        }
        Ok(out)
    }

    /// Adds one pair, rejecting anything that breaks injectivity or
    /// functionality.
    pub fn bind(&mut self, x: T, y: T) -> bool {
        match (self.fwd.get(&x), self.bwd.get(&y)) {
            (Some(y0), _) if *y0 != y => return false,
            (_, Some(x0)) if *x0 != x => return false,
            (Some(_), Some(_)) => return true,
            _ => {}
        }
        self.fwd.insert(x, y);
        self.bwd.insert(y, x);
        true
    }

    pub fn apply(&self, x: T) -> T {
        self.fwd.get(&x).copied().unwrap_or(x)
    }

    pub fn invert(&self, y: T) -> T {
        self.bwd.get(&y).copied().unwrap_or(y)
    }

    pub fn inverse(&self) -> Renaming<T> {
        Renaming {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }

    pub fn maps(&self, x: T) -> Option<T> {
        self.fwd.get(&x).copied()
    }

    pub fn maps_back(&self, y: T) -> Option<T> {
        self.bwd.get(&y).copied()
    }

    pub fn support(&self) -> impl Iterator<Item = (T, T)> + '_ {
        self.fwd.iter().map(|(x, y)| (*x, *y))
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }
}

/// Thread-safe per-node name minter.
///
/// Cloning shares the counter, so clones never collide.
#[derive(Clone, Debug)]
pub struct NameMinter {
    node: u16,
    counter: Arc<AtomicU64>,
}

impl NameMinter {
    pub fn new(node: u16) -> NameMinter {
        NameMinter {
            node,
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Test-only constructor starting near the exhaustion limit.
    pub fn starting_at(node: u16, counter: u64) -> NameMinter {
        NameMinter {
            node,
            counter: Arc::new(AtomicU64::new(counter)),
        }
    }

    pub fn node(&self) -> u16 {
        self.node
    }

    fn next(&self) -> Atom {
        let c = self.counter.fetch_add(1, Ordering::Relaxed);
        assert!(
            c < (1u64 << COUNTER_BITS),
            "name minter exhausted on node {}",
            self.node
        );
        atom(self.node, c)
    }

    pub fn fresh_port(&self) -> PortName {
        PortName(self.next())
    }

    pub fn fresh_pointer(&self) -> PointerName {
        PointerName(self.next())
    }

    /// Mints a fresh same-shaped copy of an interface together with the
    /// renaming onto it, pairing ports in atom order.
    pub fn fresh_copy(&self, a: &Interface) -> (Interface, Renaming<PortName>) {
        let mut perm = Renaming::identity();
        let mut copy = Interface::empty();
        for (p, l) in a.iter() {
            let q = self.fresh_port();
            assert!(perm.bind(p, q), "fresh names cannot collide");
            copy.insert(q, l);
        }
        (copy, perm)
    }
}
