//! Strategy-level combinators: nets annotated with source and target arenas,
//! closed under composition, tensor, currying, copying, projection and
//! fixpoints. Composition splices a three-part gateway engine between the
//! two nets; everything else is wiring plus a single generated engine.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::game::{
    arena_from_json, arena_to_json, game_arrow, game_fresh_copy, game_tensor, same_shape_game,
    validate_game, GameError, GameInterface,
};
use crate::hram::{cca, cci, ccq, exi, exq, Code, CodecError, Engine, Instr, R3};
use crate::net::{
    compose_nets, empty_net, net_from_json, net_to_json, singleton, sink, tensor_nets,
    validate_net, Net, NetError,
};
use crate::nominal::{Interface, NameMinter, Polarity, PortName, Renaming};

/// A net together with the arenas it mediates between: the net's external
/// interface is the arrow interface from `source` to `target`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GamNet {
    pub net: Net,
    pub source: GameInterface,
    pub target: GameInterface,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GamError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("net fails validation: {0:?}")]
    Wiring(Vec<NetError>),
    #[error("target of the first net and source of the second differ in shape")]
    ShapeMismatch,
    #[error("interfaces do not split as stated")]
    SplitMismatch,
    #[error("external interface disagrees with the declared arenas")]
    ExternalMismatch,
    #[error("component index out of range")]
    BadIndex,
}

/// Checks the arenas, the net, and that the net's external interface is
/// exactly the arrow interface between the declared arenas.
pub fn validate_gamnet(f: &GamNet) -> Result<(), GamError> {
    validate_game(&f.source)?;
    validate_game(&f.target)?;
    validate_net(&f.net).map_err(GamError::Wiring)?;
    let arrow = game_arrow(&f.source, &f.target)?;
    if f.net.external != arrow.base {
        return Err(GamError::ExternalMismatch);
    }
    Ok(())
}

/// Builds the engine that plays copycat between `a` and its image under
/// `pi`. Questions arriving on either side are forwarded to the matching
/// port on the other, with a heap cell recording the link; answers follow
/// the cell back and free it. The handler for the image's initial
/// questions is supplied by the caller: plain forwarding uses [`cci`],
/// the composition gateway substitutes the pointer-extension variants.
pub fn copycat_engine(
    a: &GameInterface,
    pi: &Renaming<PortName>,
    initial: fn(Code) -> Code,
) -> Result<Engine, GamError> {
    let copy = a.rename(pi);
    let arrow = game_arrow(a, &copy)?;
    let mut port_map = BTreeMap::new();
    for p in &a.order {
        match a.base.polarity(*p) {
            Some(Polarity::O) => {
                let back = Code::Spark(*p);
                let code = if a.initials.contains(p) {
                    initial(back)
                } else if a.questions.contains(p) {
                    ccq(back)
                } else {
                    cca(back)
                };
                port_map.insert(pi.apply(*p), code);
            }
            Some(Polarity::P) => {
                let fwd = Code::Spark(pi.apply(*p));
                let code = if a.questions.contains(p) {
                    ccq(fwd)
                } else {
                    cca(fwd)
                };
                port_map.insert(*p, code);
            }
            None => return Err(GamError::Game(GameError::UnknownPort(*p))),
        }
    }
    Ok(Engine {
        interface: arrow.base,
        port_map,
    })
}

/// The identity strategy on the shape of `a`: a single copycat engine
/// relaying between two fresh copies of it.
///
/// Every constructor here mints fresh names for its arenas, so nets built
/// from one minter never collide and can be tensored and composed freely;
/// the input arenas only fix the shape. Components of a returned source or
/// target are recovered positionally with [`split_tensor`].
pub fn gam_identity(a: &GameInterface, minter: &NameMinter) -> Result<GamNet, GamError> {
    let (inner, _) = game_fresh_copy(a, minter);
    let (copy, pi) = game_fresh_copy(&inner, minter);
    let engine = copycat_engine(&inner, &pi, cci)?;
    let (net, sigma) = singleton(&engine, minter);
    Ok(GamNet {
        net,
        source: inner.rename(&sigma),
        target: copy.rename(&sigma),
    })
}

/// The empty strategy from the shape of `a` to the empty arena: every
/// input is absorbed and nothing is ever emitted.
pub fn gam_sink(a: &GameInterface, minter: &NameMinter) -> GamNet {
    let (inner, _) = game_fresh_copy(a, minter);
    GamNet {
        net: sink(&inner.base, minter),
        source: inner,
        target: GameInterface::empty(),
    }
}

/// Splits a tensor arena back into consecutive components matching the
/// given shapes positionally.
pub fn split_tensor(g: &GameInterface, shapes: &[&GameInterface]) -> Option<Vec<GameInterface>> {
    let total: usize = shapes.iter().map(|s| s.order.len()).sum();
    if total != g.order.len() {
        return None;
    }
    let mut out = Vec::new();
    let mut at = 0;
    for s in shapes {
        let slice = &g.order[at..at + s.order.len()];
        let pi = Renaming::from_pairs(s.order.iter().copied().zip(slice.iter().copied())).ok()?;
        let part = s.rename(&pi);
        for p in &part.order {
            if g.base.polarity(*p) != part.base.polarity(*p)
                || g.questions.contains(p) != part.questions.contains(p)
                || g.initials.contains(p) != part.initials.contains(p)
            {
                return None;
            }
        }
        out.push(part);
        at += s.order.len();
    }
    Some(out)
}

/// Runs two strategies side by side on the tensor of their arenas.
pub fn gam_tensor(f: &GamNet, g: &GamNet) -> Result<GamNet, GamError> {
    Ok(GamNet {
        net: tensor_nets(&f.net, &g.net)?,
        source: game_tensor(&f.source, &g.source)?,
        target: game_tensor(&f.target, &g.target)?,
    })
}

fn union_engines(parts: impl IntoIterator<Item = Engine>) -> Result<Engine, GamError> {
    let mut interface = Interface::empty();
    let mut port_map = BTreeMap::new();
    for e in parts {
        interface = interface
            .tensor(&e.interface)
            .map_err(|_| GamError::Game(GameError::Clash))?;
        port_map.extend(e.port_map);
    }
    Ok(Engine {
        interface,
        port_map,
    })
}

fn chained(
    order: &[PortName],
    first: &Renaming<PortName>,
    second: &Renaming<PortName>,
) -> Renaming<PortName> {
    Renaming::from_pairs(order.iter().map(|p| (first.apply(*p), second.apply(*p))))
        .expect("fresh names are distinct")
}

/// Composes two strategies whose middle arenas agree in shape. A gateway
/// engine with three copycat parts is spliced between the nets: the part
/// facing the new source drops the pointer extensions recorded on the way
/// in, the part bridging the hidden middle records them, and the part
/// facing the new target relays plainly. All gateway ports are fresh, so
/// the operands are embedded unchanged.
pub fn gam_compose(f: &GamNet, g: &GamNet, minter: &NameMinter) -> Result<GamNet, GamError> {
    let link = same_shape_game(&f.target, &g.source).ok_or(GamError::ShapeMismatch)?;

    let (a_ext, ext_a) = game_fresh_copy(&f.source, minter);
    let (_, lnk_a) = game_fresh_copy(&f.source, minter);
    let (b_flink, lnk_bf) = game_fresh_copy(&f.target, minter);
    let (_, lnk_bg) = game_fresh_copy(&g.source, minter);
    let (c_link, lnk_c) = game_fresh_copy(&g.target, minter);
    let (c_ext, ext_c) = game_fresh_copy(&g.target, minter);

    let rho_a = chained(&f.source.order, &ext_a, &lnk_a);
    let rho_b = Renaming::from_pairs(
        f.target
            .order
            .iter()
            .map(|p| (lnk_bf.apply(*p), lnk_bg.apply(link.apply(*p)))),
    )
    .expect("fresh names are distinct");
    let rho_c = chained(&g.target.order, &lnk_c, &ext_c);

    let gateway = union_engines([
        copycat_engine(&a_ext, &rho_a, exq)?,
        copycat_engine(&b_flink, &rho_b, exi)?,
        copycat_engine(&c_link, &rho_c, cci)?,
    ])?;
    let (k_net, sigma) = singleton(&gateway, minter);

    let fg = tensor_nets(&f.net, &g.net)?;
    let mut pairs = Vec::new();
    for p in &f.source.order {
        pairs.push((*p, sigma.apply(lnk_a.apply(*p))));
    }
    for p in &f.target.order {
        pairs.push((*p, sigma.apply(lnk_bf.apply(*p))));
    }
    for p in &g.source.order {
        pairs.push((*p, sigma.apply(lnk_bg.apply(*p))));
    }
    for p in &g.target.order {
        pairs.push((*p, sigma.apply(lnk_c.apply(*p))));
    }
    let pi = Renaming::from_pairs(pairs).map_err(|_| GamError::ShapeMismatch)?;
    let net = compose_nets(&fg, &k_net, &pi)?;
    Ok(GamNet {
        net,
        source: a_ext.rename(&sigma),
        target: c_ext.rename(&sigma),
    })
}

/// The evaluation strategy from `(a -> b) (x) a` to `b`: one copycat engine
/// over the function arena, with the copy's argument and result components
/// re-bracketed onto the composite's source and target.
pub fn eval(
    a: &GameInterface,
    b: &GameInterface,
    minter: &NameMinter,
) -> Result<GamNet, GamError> {
    let (ai, _) = game_fresh_copy(a, minter);
    let (bi, _) = game_fresh_copy(b, minter);
    let fun = game_arrow(&ai, &bi)?;
    let (_, pi) = game_fresh_copy(&fun, minter);
    let engine = copycat_engine(&fun, &pi, cci)?;
    let (net, sigma) = singleton(&engine, minter);
    let arg = ai.rename(&pi).rename(&sigma);
    let out = bi.rename(&pi).rename(&sigma);
    Ok(GamNet {
        net,
        source: game_tensor(&fun.rename(&sigma), &arg)?,
        target: out,
    })
}

/// Copycat over `a` against two fresh copies. Questions crossing from a
/// copy stamp the linking cell with that copy's index; traffic crossing
/// back reads the stamp and branches to the matching copy.
fn split_engine(
    a: &GameInterface,
    copies: [(&GameInterface, &Renaming<PortName>); 2],
) -> Result<Engine, GamError> {
    let both = game_tensor(copies[0].0, copies[1].0)?;
    let arrow = game_arrow(a, &both)?;
    let mut port_map = BTreeMap::new();
    for (tag, (_, pi)) in copies.iter().enumerate() {
        for p in &a.order {
            if a.base.polarity(*p) != Some(Polarity::O) {
                continue;
            }
            let back = Code::Spark(*p);
            let stamp = Instr::Set {
                dst: R3,
                lit: Some(tag as i64),
            };
            let code = if a.initials.contains(p) {
                Code::Seq(stamp, Box::new(cci(back)))
            } else if a.questions.contains(p) {
                Code::Seq(stamp, Box::new(ccq(back)))
            } else {
                cca(back)
            };
            port_map.insert(pi.apply(*p), code);
        }
    }
    for p in &a.order {
        if a.base.polarity(*p) != Some(Polarity::P) {
            continue;
        }
        let route = Code::IfZero(
            R3,
            Box::new(Code::Spark(copies[0].1.apply(*p))),
            Box::new(Code::Spark(copies[1].1.apply(*p))),
        );
        let code = if a.questions.contains(p) {
            ccq(route)
        } else {
            cca(route)
        };
        port_map.insert(*p, code);
    }
    Ok(Engine {
        interface: arrow.base,
        port_map,
    })
}

/// The copying strategy from `a` to `a (x) a`.
pub fn diagonal(a: &GameInterface, minter: &NameMinter) -> Result<GamNet, GamError> {
    let (inner, _) = game_fresh_copy(a, minter);
    let (c1, p1) = game_fresh_copy(&inner, minter);
    let (c2, p2) = game_fresh_copy(&inner, minter);
    let engine = split_engine(&inner, [(&c1, &p1), (&c2, &p2)])?;
    let (net, sigma) = singleton(&engine, minter);
    Ok(GamNet {
        net,
        source: inner.rename(&sigma),
        target: game_tensor(&c1, &c2)?.rename(&sigma),
    })
}

/// The fixpoint strategy from `a -> a` to `a`: the copying engine with one
/// copy re-bracketed onto the source arrow, so requests the function makes
/// of its argument are fed back into the function itself.
pub fn fixpoint(a: &GameInterface, minter: &NameMinter) -> Result<GamNet, GamError> {
    let (z, _) = game_fresh_copy(a, minter);
    let (c1, p1) = game_fresh_copy(&z, minter);
    let (c2, p2) = game_fresh_copy(&z, minter);
    let engine = split_engine(&z, [(&c1, &p1), (&c2, &p2)])?;
    let (net, sigma) = singleton(&engine, minter);
    Ok(GamNet {
        net,
        source: game_arrow(&c1, &z)?.rename(&sigma),
        target: c2.rename(&sigma),
    })
}

/// Forwards component `i` of a tensor of arenas and absorbs the others:
/// the identity strategy on the chosen component tensored with sinks.
pub fn game_projection(
    i: usize,
    parts: &[GameInterface],
    minter: &NameMinter,
) -> Result<GamNet, GamError> {
    let mut net = empty_net();
    let mut kept = None;
    let mut source = GameInterface::empty();
    for (j, a) in parts.iter().enumerate() {
        let piece = if j == i {
            let id = gam_identity(a, minter)?;
            kept = Some(id.target);
            source = game_tensor(&source, &id.source)?;
            id.net
        } else {
            let (inner, _) = game_fresh_copy(a, minter);
            source = game_tensor(&source, &inner)?;
            sink(&inner.base, minter)
        };
        net = tensor_nets(&net, &piece)?;
    }
    Ok(GamNet {
        net,
        source,
        target: kept.ok_or(GamError::BadIndex)?,
    })
}

/// Moves the final tensor component of the source into the target arrow.
/// The net is unchanged; only the arena bracketing shifts.
pub fn gam_curry(
    f: &GamNet,
    rest: &GameInterface,
    moved: &GameInterface,
) -> Result<GamNet, GamError> {
    if game_tensor(rest, moved)? != f.source {
        return Err(GamError::SplitMismatch);
    }
    Ok(GamNet {
        net: f.net.clone(),
        source: rest.clone(),
        target: game_arrow(moved, &f.target)?,
    })
}

/// Moves the argument component of the target arrow back onto the source
/// tensor. Inverse to [`gam_curry`]; the net is unchanged.
pub fn gam_uncurry(
    f: &GamNet,
    moved: &GameInterface,
    result: &GameInterface,
) -> Result<GamNet, GamError> {
    if game_arrow(moved, result)? != f.target {
        return Err(GamError::SplitMismatch);
    }
    Ok(GamNet {
        net: f.net.clone(),
        source: game_tensor(&f.source, moved)?,
        target: result.clone(),
    })
}

/// Renders a strategy net as the on-disk compiler output: the net document
/// plus its source and target arenas.
pub fn gamnet_to_json(g: &GamNet) -> serde_json::Value {
    let mut v = net_to_json(&g.net);
    v["source"] = arena_to_json(&g.source);
    v["target"] = arena_to_json(&g.target);
    v
}

/// Parses a document rendered by [`gamnet_to_json`].
pub fn gamnet_from_json(v: &serde_json::Value) -> Result<GamNet, CodecError> {
    let arena = |key: &str| -> Result<GameInterface, CodecError> {
        arena_from_json(
            v.get(key)
                .ok_or_else(|| CodecError(format!("document without a {key} arena")))?,
        )
    };
    Ok(GamNet {
        net: net_from_json(v)?,
        source: arena("source")?,
        target: arena("target")?,
    })
}
