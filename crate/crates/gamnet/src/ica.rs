//! The source language: call-by-name PCF over two ground kinds (integer
//! expressions and commands) extended with assignable variables and
//! placement braces `{M}@node`, compiled structurally onto strategy nets.
//!
//! Every language constant is a single dedicated engine; the remaining
//! syntax is handled uniformly by [`diagonal`] (context sharing),
//! [`gam_tensor`], [`eval`] (application), [`gam_curry`] (abstraction) and
//! [`game_projection`] (variables). An independent big-step interpreter
//! over the sequential fragment serves as the test oracle.

use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::combinators::{
    diagonal, eval, fixpoint, gam_compose, gam_curry, gam_sink, gam_tensor,
    game_projection, split_tensor, GamError, GamNet,
};
use crate::game::{game_arrow, game_tensor, GameInterface};
use crate::hram::{cca, cci, ArithOp, Code, Engine, Instr, Reg, R0, R1, R2, R3};
use crate::net::singleton;
use crate::nominal::NameMinter;

/// Simple types: two ground kinds, arrows and products. Assignable
/// variables are sugar for `exp * (exp -> com)`, a reader paired with a
/// writer.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Type {
    Exp,
    Com,
    Arrow(Box<Type>, Box<Type>),
    Prod(Box<Type>, Box<Type>),
}

impl Type {
    pub fn arrow(a: Type, b: Type) -> Type {
        Type::Arrow(Box::new(a), Box::new(b))
    }

    pub fn prod(a: Type, b: Type) -> Type {
        Type::Prod(Box::new(a), Box::new(b))
    }

    /// The assignable-variable type, `exp * (exp -> com)`.
    pub fn var() -> Type {
        Type::prod(Type::Exp, Type::arrow(Type::Exp, Type::Com))
    }

    pub fn is_ground(&self) -> bool {
        matches!(self, Type::Exp | Type::Com)
    }

    fn show(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        if *self == Type::var() {
            return write!(f, "var");
        }
        match self {
            Type::Exp => write!(f, "exp"),
            Type::Com => write!(f, "com"),
            Type::Arrow(a, b) => {
                if prec > 0 {
                    write!(f, "(")?;
                }
                a.show(f, 1)?;
                write!(f, " -> ")?;
                b.show(f, 0)?;
                if prec > 0 {
                    write!(f, ")")?;
                }
                Ok(())
            }
            Type::Prod(a, b) => {
                if prec > 1 {
                    write!(f, "(")?;
                }
                a.show(f, 2)?;
                write!(f, " * ")?;
                b.show(f, 2)?;
                if prec > 1 {
                    write!(f, ")")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.show(f, 0)
    }
}

/// Abstract syntax. Assignment and dereference name the variable directly;
/// both elaborate to projections from the variable's reader/writer pair.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Term {
    Var(String),
    Lam(String, Type, Box<Term>),
    App(Box<Term>, Box<Term>),
    Fix(Box<Term>),
    Lit(i64),
    Binop(ArithOp, Box<Term>, Box<Term>),
    If(Box<Term>, Box<Term>, Box<Term>),
    Seq(Box<Term>, Box<Term>),
    Assign(String, Box<Term>),
    Deref(String),
    New(String, Box<Term>),
    #[cfg(feature = "par")]
    Par(Box<Term>, Box<Term>),
    At(Box<Term>, String),
}

impl Term {
    fn show(&self, f: &mut fmt::Formatter<'_>, prec: u8) -> fmt::Result {
        let paren = |f: &mut fmt::Formatter<'_>, need: bool, open: bool| {
            if need {
                write!(f, "{}", if open { "(" } else { ")" })
            } else {
                Ok(())
            }
        };
        match self {
            Term::Var(x) => write!(f, "{x}"),
            Term::Lit(n) => write!(f, "{n}"),
            Term::Deref(x) => write!(f, "!{x}"),
            Term::Lam(x, t, b) => {
                paren(f, prec > 0, true)?;
                write!(f, "\\{x}:{t}. ")?;
                b.show(f, 0)?;
                paren(f, prec > 0, false)
            }
            Term::If(c, t, e) => {
                paren(f, prec > 0, true)?;
                write!(f, "if ")?;
                c.show(f, 0)?;
                write!(f, " then ")?;
                t.show(f, 0)?;
                write!(f, " else ")?;
                e.show(f, 0)?;
                paren(f, prec > 0, false)
            }
            Term::New(x, b) => {
                paren(f, prec > 0, true)?;
                write!(f, "new {x}. ")?;
                b.show(f, 0)?;
                paren(f, prec > 0, false)
            }
            #[cfg(feature = "par")]
            Term::Par(a, b) => {
                paren(f, prec > 1, true)?;
                a.show(f, 2)?;
                write!(f, " || ")?;
                b.show(f, 2)?;
                paren(f, prec > 1, false)
            }
            Term::Seq(a, b) => {
                paren(f, prec > 2, true)?;
                a.show(f, 3)?;
                write!(f, "; ")?;
                b.show(f, 2)?;
                paren(f, prec > 2, false)
            }
            Term::Assign(x, v) => {
                paren(f, prec > 3, true)?;
                write!(f, "{x} := ")?;
                v.show(f, 4)?;
                paren(f, prec > 3, false)
            }
            Term::Binop(op, a, b) => {
                let (sym, level) = match op {
                    ArithOp::Add => ("+", 4),
                    ArithOp::Sub => ("-", 4),
                    ArithOp::Mul => ("*", 5),
                };
                paren(f, prec > level, true)?;
                a.show(f, level)?;
                write!(f, " {sym} ")?;
                b.show(f, level + 1)?;
                paren(f, prec > level, false)
            }
            Term::App(a, b) => {
                paren(f, prec > 6, true)?;
                a.show(f, 6)?;
                write!(f, " ")?;
                b.show(f, 7)?;
                paren(f, prec > 6, false)
            }
            Term::Fix(a) => {
                paren(f, prec > 6, true)?;
                write!(f, "fix ")?;
                a.show(f, 7)?;
                paren(f, prec > 6, false)
            }
            Term::At(a, node) => {
                write!(f, "{{")?;
                a.show(f, 0)?;
                write!(f, "}}@{node}")
            }
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.show(f, 0)
    }
}

/// A term together with its typing context and the node receiving every
/// engine not covered by a placement brace.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CompilationUnit {
    pub term: Term,
    pub ctx: Vec<(String, Type)>,
    pub root: String,
}

impl CompilationUnit {
    pub fn closed(term: Term) -> CompilationUnit {
        CompilationUnit {
            term,
            ctx: Vec::new(),
            root: "0".into(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
#[error("syntax error at byte {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

#[derive(Clone, PartialEq, Eq, Debug)]
enum Tok {
    Ident(String),
    Num(i64),
    Lambda,
    Dot,
    Colon,
    Walrus,
    Semi,
    ParBar,
    Plus,
    Minus,
    Star,
    Bang,
    LParen,
    RParen,
    LBrace,
    RBrace,
    At,
    Arrow,
    KwIf,
    KwThen,
    KwElse,
    KwNew,
    KwFix,
    KwExp,
    KwCom,
    KwVar,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tok::Ident(x) => return write!(f, "identifier `{x}`"),
            Tok::Num(n) => return write!(f, "number `{n}`"),
            Tok::Lambda => "`\\`",
            Tok::Dot => "`.`",
            Tok::Colon => "`:`",
            Tok::Walrus => "`:=`",
            Tok::Semi => "`;`",
            Tok::ParBar => "`||`",
            Tok::Plus => "`+`",
            Tok::Minus => "`-`",
            Tok::Star => "`*`",
            Tok::Bang => "`!`",
            Tok::LParen => "`(`",
            Tok::RParen => "`)`",
            Tok::LBrace => "`{`",
            Tok::RBrace => "`}`",
            Tok::At => "`@`",
            Tok::Arrow => "`->`",
            Tok::KwIf => "`if`",
            Tok::KwThen => "`then`",
            Tok::KwElse => "`else`",
            Tok::KwNew => "`new`",
            Tok::KwFix => "`fix`",
            Tok::KwExp => "`exp`",
            Tok::KwCom => "`com`",
            Tok::KwVar => "`var`",
        };
        write!(f, "{s}")
    }
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let mut it = src.char_indices().peekable();
    while let Some(&(i, c)) = it.peek() {
        match c {
            c if c.is_whitespace() => {
                it.next();
            }
            'λ' | '\\' => {
                it.next();
                out.push((i, Tok::Lambda));
            }
            '.' => {
                it.next();
                out.push((i, Tok::Dot));
            }
            ';' => {
                it.next();
                out.push((i, Tok::Semi));
            }
            '+' => {
                it.next();
                out.push((i, Tok::Plus));
            }
            '*' | '×' => {
                it.next();
                out.push((i, Tok::Star));
            }
            '!' => {
                it.next();
                out.push((i, Tok::Bang));
            }
            '(' => {
                it.next();
                out.push((i, Tok::LParen));
            }
            ')' => {
                it.next();
                out.push((i, Tok::RParen));
            }
            '{' => {
                it.next();
                out.push((i, Tok::LBrace));
            }
            '}' => {
                it.next();
                out.push((i, Tok::RBrace));
            }
            '@' => {
                it.next();
                out.push((i, Tok::At));
            }
            '→' => {
                it.next();
                out.push((i, Tok::Arrow));
            }
            ':' => {
                it.next();
                if it.peek().is_some_and(|&(_, c)| c == '=') {
                    it.next();
                    out.push((i, Tok::Walrus));
                } else {
                    out.push((i, Tok::Colon));
                }
            }
            '-' => {
                it.next();
                if it.peek().is_some_and(|&(_, c)| c == '>') {
                    it.next();
                    out.push((i, Tok::Arrow));
                } else {
                    out.push((i, Tok::Minus));
                }
            }
            '|' => {
                it.next();
                if it.peek().is_some_and(|&(_, c)| c == '|') {
                    it.next();
                    out.push((i, Tok::ParBar));
                } else {
                    return Err(ParseError {
                        pos: i,
                        msg: "unexpected character `|`".into(),
                    });
                }
            }
            '0'..='9' => {
                let mut text = String::new();
                while let Some(&(_, d)) = it.peek() {
                    if d.is_ascii_digit() {
                        text.push(d);
                        it.next();
                    } else {
                        break;
                    }
                }
                let n = text.parse::<i64>().map_err(|_| ParseError {
                    pos: i,
                    msg: format!("integer literal `{text}` out of range"),
                })?;
                out.push((i, Tok::Num(n)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut text = String::new();
                while let Some(&(_, d)) = it.peek() {
                    if d.is_alphanumeric() || d == '_' || d == '\'' {
                        text.push(d);
                        it.next();
                    } else {
                        break;
                    }
                }
                let tok = match text.as_str() {
                    "if" => Tok::KwIf,
                    "then" => Tok::KwThen,
                    "else" => Tok::KwElse,
                    "new" => Tok::KwNew,
                    "fix" => Tok::KwFix,
                    "exp" => Tok::KwExp,
                    "com" => Tok::KwCom,
                    "var" => Tok::KwVar,
                    _ => Tok::Ident(text),
                };
                out.push((i, tok));
            }
            _ => {
                return Err(ParseError {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                });
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: &'a [(usize, Tok)],
    i: usize,
    eof: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|(_, t)| t)
    }

    fn peek2(&self) -> Option<&Tok> {
        self.toks.get(self.i + 1).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map_or(self.eof, |(p, _)| *p)
    }

    fn bump(&mut self) -> Option<&Tok> {
        let t = self.toks.get(self.i).map(|(_, t)| t);
        self.i += 1;
        t
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError {
            pos: self.pos(),
            msg: msg.into(),
        })
    }

    fn describe(&self) -> String {
        match self.peek() {
            Some(t) => format!("{t}"),
            None => "end of input".into(),
        }
    }

    fn expect(&mut self, want: &Tok) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.i += 1;
            Ok(())
        } else {
            self.fail(format!("expected {want}, found {}", self.describe()))
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(x)) => {
                let x = x.clone();
                self.i += 1;
                Ok(x)
            }
            _ => self.fail(format!("expected {what}, found {}", self.describe())),
        }
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        match self.peek() {
            Some(Tok::Lambda) => self.lambda(),
            Some(Tok::KwIf) => self.conditional(),
            Some(Tok::KwNew) => self.binder(),
            _ => self.par_level(),
        }
    }

    fn lambda(&mut self) -> Result<Term, ParseError> {
        self.expect(&Tok::Lambda)?;
        let x = self.ident("a parameter name")?;
        self.expect(&Tok::Colon)?;
        let t = self.type_level()?;
        self.expect(&Tok::Dot)?;
        let body = self.term()?;
        Ok(Term::Lam(x, t, Box::new(body)))
    }

    fn conditional(&mut self) -> Result<Term, ParseError> {
        self.expect(&Tok::KwIf)?;
        let c = self.term()?;
        self.expect(&Tok::KwThen)?;
        let t = self.term()?;
        self.expect(&Tok::KwElse)?;
        let e = self.term()?;
        Ok(Term::If(Box::new(c), Box::new(t), Box::new(e)))
    }

    fn binder(&mut self) -> Result<Term, ParseError> {
        self.expect(&Tok::KwNew)?;
        let x = self.ident("a variable name")?;
        self.expect(&Tok::Dot)?;
        let body = self.term()?;
        Ok(Term::New(x, Box::new(body)))
    }

    fn par_level(&mut self) -> Result<Term, ParseError> {
        let t = self.seq_level()?;
        #[cfg(not(feature = "par"))]
        {
            if self.peek() == Some(&Tok::ParBar) {
                return self.fail("`||` requires the par feature");
            }
            Ok(t)
        }
        #[cfg(feature = "par")]
        {
            let mut t = t;
            while self.peek() == Some(&Tok::ParBar) {
                self.i += 1;
                let rhs = self.seq_level()?;
                t = Term::Par(Box::new(t), Box::new(rhs));
            }
            Ok(t)
        }
    }

    fn seq_level(&mut self) -> Result<Term, ParseError> {
        let a = self.assign_level()?;
        if self.peek() == Some(&Tok::Semi) {
            self.i += 1;
            let b = match self.peek() {
                Some(Tok::Lambda | Tok::KwIf | Tok::KwNew) => self.term()?,
                _ => self.seq_level()?,
            };
            Ok(Term::Seq(Box::new(a), Box::new(b)))
        } else {
            Ok(a)
        }
    }

    fn assign_level(&mut self) -> Result<Term, ParseError> {
        if let (Some(Tok::Ident(_)), Some(Tok::Walrus)) = (self.peek(), self.peek2()) {
            let x = self.ident("a variable name")?;
            self.i += 1;
            let rhs = self.additive_level()?;
            return Ok(Term::Assign(x, Box::new(rhs)));
        }
        self.additive_level()
    }

    fn additive_level(&mut self) -> Result<Term, ParseError> {
        let mut t = self.mult_level()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => ArithOp::Add,
                Some(Tok::Minus) => ArithOp::Sub,
                _ => return Ok(t),
            };
            self.i += 1;
            let rhs = self.mult_level()?;
            t = Term::Binop(op, Box::new(t), Box::new(rhs));
        }
    }

    fn mult_level(&mut self) -> Result<Term, ParseError> {
        let mut t = self.app_level()?;
        while self.peek() == Some(&Tok::Star) {
            self.i += 1;
            let rhs = self.app_level()?;
            t = Term::Binop(ArithOp::Mul, Box::new(t), Box::new(rhs));
        }
        Ok(t)
    }

    fn starts_atom(&self) -> bool {
        matches!(
            self.peek(),
            Some(
                Tok::Num(_)
                    | Tok::Ident(_)
                    | Tok::Bang
                    | Tok::KwFix
                    | Tok::LParen
                    | Tok::LBrace
            )
        )
    }

    fn app_level(&mut self) -> Result<Term, ParseError> {
        let mut t = self.atom()?;
        while self.starts_atom() {
            let arg = self.atom()?;
            t = Term::App(Box::new(t), Box::new(arg));
        }
        Ok(t)
    }

    fn atom(&mut self) -> Result<Term, ParseError> {
        match self.peek() {
            Some(Tok::Num(n)) => {
                let n = *n;
                self.i += 1;
                Ok(Term::Lit(n))
            }
            Some(Tok::Ident(x)) => {
                let x = x.clone();
                self.i += 1;
                Ok(Term::Var(x))
            }
            Some(Tok::Bang) => {
                self.i += 1;
                let x = self.ident("a variable name")?;
                Ok(Term::Deref(x))
            }
            Some(Tok::KwFix) => {
                self.i += 1;
                let body = self.atom()?;
                Ok(Term::Fix(Box::new(body)))
            }
            Some(Tok::LParen) => {
                self.i += 1;
                let t = self.term()?;
                self.expect(&Tok::RParen)?;
                Ok(t)
            }
            Some(Tok::LBrace) => {
                self.i += 1;
                let t = self.term()?;
                self.expect(&Tok::RBrace)?;
                self.expect(&Tok::At)?;
                let node = match self.bump() {
                    Some(Tok::Ident(x)) => x.clone(),
                    Some(Tok::Num(n)) => n.to_string(),
                    _ => {
                        self.i -= 1;
                        return self.fail(format!(
                            "expected a node name, found {}",
                            self.describe()
                        ));
                    }
                };
                Ok(Term::At(Box::new(t), node))
            }
            _ => self.fail(format!("expected a term, found {}", self.describe())),
        }
    }

    fn type_level(&mut self) -> Result<Type, ParseError> {
        let t = self.type_prod()?;
        if self.peek() == Some(&Tok::Arrow) {
            self.i += 1;
            let rhs = self.type_level()?;
            Ok(Type::arrow(t, rhs))
        } else {
            Ok(t)
        }
    }

    fn type_prod(&mut self) -> Result<Type, ParseError> {
        let mut t = self.type_atom()?;
        while self.peek() == Some(&Tok::Star) {
            self.i += 1;
            let rhs = self.type_atom()?;
            t = Type::prod(t, rhs);
        }
        Ok(t)
    }

    fn type_atom(&mut self) -> Result<Type, ParseError> {
        match self.peek() {
            Some(Tok::KwExp) => {
                self.i += 1;
                Ok(Type::Exp)
            }
            Some(Tok::KwCom) => {
                self.i += 1;
                Ok(Type::Com)
            }
            Some(Tok::KwVar) => {
                self.i += 1;
                Ok(Type::var())
            }
            Some(Tok::LParen) => {
                self.i += 1;
                let t = self.type_level()?;
                self.expect(&Tok::RParen)?;
                Ok(t)
            }
            _ => self.fail(format!("expected a type, found {}", self.describe())),
        }
    }
}

/// Parses a term. Application binds tightest, then `*`, then `+`/`-`, then
/// `:=`, then `;`, then `||`; binders (`\`, `if`, `new`) extend as far
/// right as possible.
pub fn parse(src: &str) -> Result<Term, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks: &toks,
        i: 0,
        eof: src.len(),
    };
    let t = p.term()?;
    if p.i < toks.len() {
        return p.fail(format!("unexpected {} after the term", p.describe()));
    }
    Ok(t)
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum TypeError {
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("in `{subject}`: expected {expected}, found {found}")]
    Mismatch {
        subject: String,
        expected: String,
        found: Type,
    },
}

fn mismatch(subject: &Term, expected: impl Into<String>, found: &Type) -> TypeError {
    TypeError::Mismatch {
        subject: subject.to_string(),
        expected: expected.into(),
        found: found.clone(),
    }
}

fn check(t: &Term, ctx: &[(String, Type)], want: &Type) -> Result<(), TypeError> {
    let got = typecheck(t, ctx)?;
    if got == *want {
        Ok(())
    } else {
        Err(mismatch(t, format!("{want}"), &got))
    }
}

fn check_var(t: &Term, x: &str, ctx: &[(String, Type)]) -> Result<(), TypeError> {
    match ctx.iter().rev().find(|(y, _)| y == x) {
        None => Err(TypeError::Unbound(x.into())),
        Some((_, ty)) if *ty == Type::var() => Ok(()),
        Some((_, ty)) => Err(mismatch(t, "var", ty)),
    }
}

/// Infers the type of a term under a context, with declaration-order
/// shadowing.
pub fn typecheck(t: &Term, ctx: &[(String, Type)]) -> Result<Type, TypeError> {
    match t {
        Term::Var(x) => ctx
            .iter()
            .rev()
            .find(|(y, _)| y == x)
            .map(|(_, ty)| ty.clone())
            .ok_or_else(|| TypeError::Unbound(x.clone())),
        Term::Lam(x, a, body) => {
            let mut inner = ctx.to_vec();
            inner.push((x.clone(), a.clone()));
            Ok(Type::arrow(a.clone(), typecheck(body, &inner)?))
        }
        Term::App(fun, arg) => match typecheck(fun, ctx)? {
            Type::Arrow(a, b) => {
                check(arg, ctx, &a)?;
                Ok(*b)
            }
            other => Err(mismatch(t, "a function", &other)),
        },
        Term::Fix(fun) => match typecheck(fun, ctx)? {
            Type::Arrow(a, b) if a == b => Ok(*a),
            other => Err(mismatch(t, "a function from a type to itself", &other)),
        },
        Term::Lit(_) => Ok(Type::Exp),
        Term::Binop(_, l, r) => {
            check(l, ctx, &Type::Exp)?;
            check(r, ctx, &Type::Exp)?;
            Ok(Type::Exp)
        }
        Term::If(c, th, el) => {
            check(c, ctx, &Type::Exp)?;
            let g = typecheck(th, ctx)?;
            if !g.is_ground() {
                return Err(mismatch(th, "a ground branch (exp or com)", &g));
            }
            check(el, ctx, &g)?;
            Ok(g)
        }
        Term::Seq(a, b) => {
            check(a, ctx, &Type::Com)?;
            let g = typecheck(b, ctx)?;
            if !g.is_ground() {
                return Err(mismatch(b, "a ground continuation (exp or com)", &g));
            }
            Ok(g)
        }
        Term::Assign(x, rhs) => {
            check_var(t, x, ctx)?;
            check(rhs, ctx, &Type::Exp)?;
            Ok(Type::Com)
        }
        Term::Deref(x) => {
            check_var(t, x, ctx)?;
            Ok(Type::Exp)
        }
        Term::New(x, body) => {
            let mut inner = ctx.to_vec();
            inner.push((x.clone(), Type::var()));
            let g = typecheck(body, &inner)?;
            if !g.is_ground() {
                return Err(mismatch(body, "a ground body (exp or com)", &g));
            }
            Ok(g)
        }
        #[cfg(feature = "par")]
        Term::Par(a, b) => {
            check(a, ctx, &Type::Com)?;
            check(b, ctx, &Type::Com)?;
            Ok(Type::Com)
        }
        Term::At(sub, _) => typecheck(sub, ctx),
    }
}

/// The arena of a type: ground kinds are one question enabling one answer,
/// products are tensors, arrows dualize the argument.
pub fn arena_of(t: &Type, minter: &NameMinter) -> GameInterface {
    match t {
        Type::Exp | Type::Com => {
            GameInterface::ground(minter.fresh_port(), minter.fresh_port())
        }
        Type::Arrow(a, b) => game_arrow(&arena_of(a, minter), &arena_of(b, minter))
            .expect("fresh names cannot collide"),
        Type::Prod(a, b) => game_tensor(&arena_of(a, minter), &arena_of(b, minter))
            .expect("fresh names cannot collide"),
    }
}

/// The built-in constants. `If`, `Seq` and `NewVar` carry their ground
/// result kind, `Fix` the type being unfolded.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Constant {
    Lit(i64),
    Arith(ArithOp),
    If(Type),
    Seq(Type),
    NewVar(Type),
    Fix(Type),
    Deref,
    Assign,
    #[cfg(feature = "par")]
    Par,
}

impl fmt::Display for Constant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constant::Lit(n) => write!(f, "{n}"),
            Constant::Arith(op) => write!(f, "{}", op.mnemonic()),
            Constant::If(_) => write!(f, "if"),
            Constant::Seq(_) => write!(f, "seq"),
            Constant::NewVar(_) => write!(f, "new"),
            Constant::Fix(_) => write!(f, "fix"),
            Constant::Deref => write!(f, "deref"),
            Constant::Assign => write!(f, "assign"),
            #[cfg(feature = "par")]
            Constant::Par => write!(f, "par"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Gam(#[from] GamError),
    #[error("constant `{0}` needs a ground kind, got {1}")]
    NonGroundConstant(String, Type),
}

fn ground_arena(m: &NameMinter) -> GameInterface {
    GameInterface::ground(m.fresh_port(), m.fresh_port())
}

/// Wraps one engine implementing a closed strategy on the given arena.
fn closed(
    arena: GameInterface,
    handlers: impl IntoIterator<Item = (crate::nominal::PortName, Code)>,
    m: &NameMinter,
) -> GamNet {
    let engine = Engine {
        interface: arena.base.clone(),
        port_map: handlers.into_iter().collect(),
    };
    let (net, pi) = singleton(&engine, m);
    GamNet {
        net,
        source: GameInterface::empty(),
        target: arena.rename(&pi),
    }
}

fn lit_net(n: i64, m: &NameMinter) -> GamNet {
    let g = ground_arena(m);
    let (q, a) = (g.order[0], g.order[1]);
    let code = Code::seq(
        [
            Instr::Flip { a: R0, b: R1 },
            Instr::Set { dst: R1, lit: None },
            Instr::Set {
                dst: R2,
                lit: Some(n),
            },
        ],
        Code::Spark(a),
    );
    closed(g, [(q, code)], m)
}

/// Left-to-right strict binary arithmetic: one heap cell keeps the left
/// operand while the right argument runs.
fn arith_net(op: ArithOp, m: &NameMinter) -> GamNet {
    let (g1, g2, g3) = (ground_arena(m), ground_arena(m), ground_arena(m));
    let (q1, a1) = (g1.order[0], g1.order[1]);
    let (q2, a2) = (g2.order[0], g2.order[1]);
    let (q3, a3) = (g3.order[0], g3.order[1]);
    let arena = game_arrow(&g1, &game_arrow(&g2, &g3).expect("fresh names cannot collide"))
        .expect("fresh names cannot collide");
    let on_a1 = cca(Code::seq(
        [
            Instr::New {
                dst: R1,
                fst: R0,
                snd: R2,
            },
            Instr::Set { dst: R2, lit: None },
        ],
        Code::Spark(q2),
    ));
    let on_a2 = Code::seq(
        [
            Instr::Get {
                dst1: R1,
                dst2: R3,
                src: R0,
            },
            Instr::Free { cell: R0 },
            Instr::Arith {
                op,
                dst: R2,
                lhs: R3,
                rhs: R2,
            },
            Instr::Flip { a: R0, b: R1 },
        ],
        Code::Spark(a3),
    );
    closed(
        arena,
        [(q3, cci(Code::Spark(q1))), (a1, on_a1), (a2, on_a2)],
        m,
    )
}

/// Conditional at a ground kind; a zero condition selects the third
/// component, anything else the second.
fn if_net(kind: &Type, m: &NameMinter) -> GamNet {
    let g1 = ground_arena(m);
    let (g2, g3, g4) = (ground_arena(m), ground_arena(m), ground_arena(m));
    let _ = kind;
    let (q1, a1) = (g1.order[0], g1.order[1]);
    let (q2, a2) = (g2.order[0], g2.order[1]);
    let (q3, a3) = (g3.order[0], g3.order[1]);
    let (q4, a4) = (g4.order[0], g4.order[1]);
    let tail = game_arrow(
        &g2,
        &game_arrow(&g3, &g4).expect("fresh names cannot collide"),
    )
    .expect("fresh names cannot collide");
    let arena = game_arrow(&g1, &tail).expect("fresh names cannot collide");
    let on_a1 = cca(Code::Seq(
        Instr::Flip { a: R0, b: R1 },
        Box::new(cci(Code::IfZero(
            R2,
            Box::new(Code::Spark(q3)),
            Box::new(Code::Spark(q2)),
        ))),
    ));
    closed(
        arena,
        [
            (q4, cci(Code::Spark(q1))),
            (a1, on_a1),
            (a2, cca(Code::Spark(a4))),
            (a3, cca(Code::Spark(a4))),
        ],
        m,
    )
}

/// Sequencing: run the command, then the continuation of the given kind.
fn seq_net(kind: &Type, m: &NameMinter) -> GamNet {
    let (g1, g2, g3) = (ground_arena(m), ground_arena(m), ground_arena(m));
    let _ = kind;
    let (q1, a1) = (g1.order[0], g1.order[1]);
    let (q2, a2) = (g2.order[0], g2.order[1]);
    let (q3, a3) = (g3.order[0], g3.order[1]);
    let arena = game_arrow(&g1, &game_arrow(&g2, &g3).expect("fresh names cannot collide"))
        .expect("fresh names cannot collide");
    let on_a1 = cca(Code::Seq(
        Instr::Flip { a: R0, b: R1 },
        Box::new(cci(Code::Seq(
            Instr::Set { dst: R2, lit: None },
            Box::new(Code::Spark(q2)),
        ))),
    ));
    closed(
        arena,
        [
            (q3, cci(Code::Spark(q1))),
            (a1, on_a1),
            (a2, cca(Code::Spark(a3))),
        ],
        m,
    )
}

/// Local-variable allocator: the variable lives in the second component of
/// the cell minted for the body's initial question. Reads copy it, writes
/// update it in place, and the body's answer frees it.
fn newvar_net(kind: &Type, m: &NameMinter) -> GamNet {
    let (g1, g2, g3) = (ground_arena(m), ground_arena(m), ground_arena(m));
    let (g4, g5) = (ground_arena(m), ground_arena(m));
    let _ = kind;
    let (q1, a1) = (g1.order[0], g1.order[1]);
    let (q2, a2) = (g2.order[0], g2.order[1]);
    let (q3, a3) = (g3.order[0], g3.order[1]);
    let (q4, a4) = (g4.order[0], g4.order[1]);
    let (q5, a5) = (g5.order[0], g5.order[1]);
    let writer = game_arrow(&g2, &g3).expect("fresh names cannot collide");
    let cell = game_tensor(&g1, &writer).expect("fresh names cannot collide");
    let body = game_arrow(&cell, &g4).expect("fresh names cannot collide");
    let arena = game_arrow(&body, &g5).expect("fresh names cannot collide");
    let on_q5 = Code::Seq(
        Instr::Set {
            dst: R3,
            lit: Some(0),
        },
        Box::new(cci(Code::Spark(q4))),
    );
    let on_q1 = Code::seq(
        [
            Instr::Get {
                dst1: Reg::Null,
                dst2: R2,
                src: R0,
            },
            Instr::Flip { a: R0, b: R1 },
            Instr::Set { dst: R1, lit: None },
        ],
        Code::Spark(a1),
    );
    let on_q3 = Code::seq(
        [
            Instr::Flip { a: R0, b: R1 },
            Instr::New {
                dst: R1,
                fst: R0,
                snd: R1,
            },
        ],
        Code::Spark(q2),
    );
    let on_a2 = Code::seq(
        [
            Instr::Get {
                dst1: Reg::Null,
                dst2: R3,
                src: R0,
            },
            Instr::Update { cell: R3, val: R2 },
        ],
        cca(Code::Spark(a3)),
    );
    closed(
        arena,
        [
            (q5, on_q5),
            (q1, on_q1),
            (q3, on_q3),
            (a2, on_a2),
            (a4, cca(Code::Spark(a5))),
        ],
        m,
    )
}

fn fix_net(a: &Type, m: &NameMinter) -> Result<GamNet, GamError> {
    let f = fixpoint(&arena_of(a, m), m)?;
    let moved = f.source.clone();
    gam_curry(&f, &GameInterface::empty(), &moved)
}

fn proj_net(i: usize, m: &NameMinter) -> Result<GamNet, GamError> {
    let parts = [
        arena_of(&Type::Exp, m),
        arena_of(&Type::arrow(Type::Exp, Type::Com), m),
    ];
    let p = game_projection(i, &parts, m)?;
    let moved = p.source.clone();
    gam_curry(&p, &GameInterface::empty(), &moved)
}

/// Parallel composition of two commands: both initial questions carry the
/// same join cell, and the second answer back frees it and finishes.
#[cfg(feature = "par")]
fn par_net(m: &NameMinter) -> GamNet {
    let (g1, g2, g3) = (ground_arena(m), ground_arena(m), ground_arena(m));
    let (q1, a1) = (g1.order[0], g1.order[1]);
    let (q2, a2) = (g2.order[0], g2.order[1]);
    let (q3, a3) = (g3.order[0], g3.order[1]);
    let arena = game_arrow(&g1, &game_arrow(&g2, &g3).expect("fresh names cannot collide"))
        .expect("fresh names cannot collide");
    let on_q3 = Code::seq(
        [
            Instr::Set {
                dst: R3,
                lit: Some(0),
            },
            Instr::New {
                dst: R0,
                fst: R1,
                snd: R3,
            },
            Instr::Flip { a: R0, b: R1 },
        ],
        Code::Fork(q1, Box::new(Code::Spark(q2))),
    );
    let join = |_branch: crate::nominal::PortName| {
        Code::Seq(
            Instr::Get {
                dst1: R1,
                dst2: R3,
                src: R0,
            },
            Box::new(Code::IfZero(
                R3,
                Box::new(Code::seq(
                    [
                        Instr::Set {
                            dst: R2,
                            lit: Some(1),
                        },
                        Instr::Update { cell: R0, val: R2 },
                    ],
                    Code::End,
                )),
                Box::new(Code::seq(
                    [
                        Instr::Free { cell: R0 },
                        Instr::Flip { a: R0, b: R1 },
                        Instr::Set { dst: R1, lit: None },
                        Instr::Set { dst: R2, lit: None },
                    ],
                    Code::Spark(a3),
                )),
            )),
        )
    };
    closed(
        arena,
        [(q3, on_q3), (a1, join(a1)), (a2, join(a2))],
        m,
    )
}

/// Builds the net for a built-in constant.
pub fn constant_net(c: &Constant, minter: &NameMinter) -> Result<GamNet, CompileError> {
    let ground_kind = |k: &Type| {
        if k.is_ground() {
            Ok(())
        } else {
            Err(CompileError::NonGroundConstant(c.to_string(), k.clone()))
        }
    };
    match c {
        Constant::Lit(n) => Ok(lit_net(*n, minter)),
        Constant::Arith(op) => Ok(arith_net(*op, minter)),
        Constant::If(k) => {
            ground_kind(k)?;
            Ok(if_net(k, minter))
        }
        Constant::Seq(k) => {
            ground_kind(k)?;
            Ok(seq_net(k, minter))
        }
        Constant::NewVar(k) => {
            ground_kind(k)?;
            Ok(newvar_net(k, minter))
        }
        Constant::Fix(a) => Ok(fix_net(a, minter)?),
        Constant::Deref => Ok(proj_net(0, minter)?),
        Constant::Assign => Ok(proj_net(1, minter)?),
        #[cfg(feature = "par")]
        Constant::Par => Ok(par_net(minter)),
    }
}

fn ctx_arenas(ctx: &[(String, Type)], m: &NameMinter) -> Vec<GameInterface> {
    ctx.iter().map(|(_, ty)| arena_of(ty, m)).collect()
}

fn tensor_all(parts: &[GameInterface]) -> GameInterface {
    let mut g = GameInterface::empty();
    for p in parts {
        g = game_tensor(&g, p).expect("fresh names cannot collide");
    }
    g
}

/// Pairs a closed net with a sink absorbing the context.
fn lift(c: GamNet, ctx: &[(String, Type)], m: &NameMinter) -> Result<GamNet, CompileError> {
    if ctx.is_empty() {
        return Ok(c);
    }
    let gamma = tensor_all(&ctx_arenas(ctx, m));
    Ok(gam_tensor(&gam_sink(&gamma, m), &c)?)
}

/// One application step: share the context between function and argument,
/// then evaluate the pair.
fn app_net(
    fun: &GamNet,
    arg: &GamNet,
    ctx: &[(String, Type)],
    a: &Type,
    b: &Type,
    m: &NameMinter,
) -> Result<GamNet, CompileError> {
    let gamma = tensor_all(&ctx_arenas(ctx, m));
    let share = diagonal(&gamma, m)?;
    let pair = gam_tensor(fun, arg)?;
    let halves = gam_compose(&share, &pair, m)?;
    let ev = eval(&arena_of(a, m), &arena_of(b, m), m)?;
    Ok(gam_compose(&halves, &ev, m)?)
}

fn place(g: &mut GamNet, node: &str) {
    for p in &mut g.net.placements {
        if p.is_none() {
            *p = Some(node.to_string());
        }
    }
}

fn compile_term(
    t: &Term,
    ctx: &[(String, Type)],
    m: &NameMinter,
) -> Result<GamNet, CompileError> {
    match t {
        Term::Var(x) => {
            let i = ctx
                .iter()
                .rposition(|(y, _)| y == x)
                .ok_or_else(|| TypeError::Unbound(x.clone()))?;
            let arenas = ctx_arenas(ctx, m);
            Ok(game_projection(i, &arenas, m)?)
        }
        Term::Lam(x, a, body) => {
            let mut inner = ctx.to_vec();
            inner.push((x.clone(), a.clone()));
            let g = compile_term(body, &inner, m)?;
            let gamma = tensor_all(&ctx_arenas(ctx, m));
            let arg = arena_of(a, m);
            let parts =
                split_tensor(&g.source, &[&gamma, &arg]).ok_or(GamError::SplitMismatch)?;
            Ok(gam_curry(&g, &parts[0], &parts[1])?)
        }
        Term::App(fun, arg) => match typecheck(fun, ctx)? {
            Type::Arrow(a, b) => {
                let gf = compile_term(fun, ctx, m)?;
                let gx = compile_term(arg, ctx, m)?;
                app_net(&gf, &gx, ctx, &a, &b, m)
            }
            other => Err(mismatch(t, "a function", &other).into()),
        },
        Term::Fix(fun) => match typecheck(fun, ctx)? {
            Type::Arrow(a, _) => {
                let c = lift(constant_net(&Constant::Fix((*a).clone()), m)?, ctx, m)?;
                let gf = compile_term(fun, ctx, m)?;
                app_net(&c, &gf, ctx, &Type::arrow((*a).clone(), (*a).clone()), &a, m)
            }
            other => Err(mismatch(t, "a function from a type to itself", &other).into()),
        },
        Term::Lit(n) => lift(constant_net(&Constant::Lit(*n), m)?, ctx, m),
        Term::Binop(op, l, r) => {
            let c = lift(constant_net(&Constant::Arith(*op), m)?, ctx, m)?;
            let gl = compile_term(l, ctx, m)?;
            let once = app_net(
                &c,
                &gl,
                ctx,
                &Type::Exp,
                &Type::arrow(Type::Exp, Type::Exp),
                m,
            )?;
            let gr = compile_term(r, ctx, m)?;
            app_net(&once, &gr, ctx, &Type::Exp, &Type::Exp, m)
        }
        Term::If(c, th, el) => {
            let g = typecheck(th, ctx)?;
            let k = lift(constant_net(&Constant::If(g.clone()), m)?, ctx, m)?;
            let picked = app_net(
                &k,
                &compile_term(c, ctx, m)?,
                ctx,
                &Type::Exp,
                &Type::arrow(g.clone(), Type::arrow(g.clone(), g.clone())),
                m,
            )?;
            let with_else = app_net(
                &picked,
                &compile_term(el, ctx, m)?,
                ctx,
                &g,
                &Type::arrow(g.clone(), g.clone()),
                m,
            )?;
            app_net(&with_else, &compile_term(th, ctx, m)?, ctx, &g, &g, m)
        }
        Term::Seq(a, b) => {
            let g = typecheck(b, ctx)?;
            let k = lift(constant_net(&Constant::Seq(g.clone()), m)?, ctx, m)?;
            let started = app_net(
                &k,
                &compile_term(a, ctx, m)?,
                ctx,
                &Type::Com,
                &Type::arrow(g.clone(), g.clone()),
                m,
            )?;
            app_net(&started, &compile_term(b, ctx, m)?, ctx, &g, &g, m)
        }
        Term::Assign(x, rhs) => {
            let k = lift(constant_net(&Constant::Assign, m)?, ctx, m)?;
            let gx = compile_term(&Term::Var(x.clone()), ctx, m)?;
            let writer = app_net(
                &k,
                &gx,
                ctx,
                &Type::var(),
                &Type::arrow(Type::Exp, Type::Com),
                m,
            )?;
            app_net(
                &writer,
                &compile_term(rhs, ctx, m)?,
                ctx,
                &Type::Exp,
                &Type::Com,
                m,
            )
        }
        Term::Deref(x) => {
            let k = lift(constant_net(&Constant::Deref, m)?, ctx, m)?;
            let gx = compile_term(&Term::Var(x.clone()), ctx, m)?;
            app_net(&k, &gx, ctx, &Type::var(), &Type::Exp, m)
        }
        Term::New(x, body) => {
            let mut inner = ctx.to_vec();
            inner.push((x.clone(), Type::var()));
            let g = typecheck(body, &inner)?;
            let k = lift(constant_net(&Constant::NewVar(g.clone()), m)?, ctx, m)?;
            let lam = Term::Lam(x.clone(), Type::var(), body.clone());
            let gl = compile_term(&lam, ctx, m)?;
            app_net(&k, &gl, ctx, &Type::arrow(Type::var(), g.clone()), &g, m)
        }
        #[cfg(feature = "par")]
        Term::Par(a, b) => {
            let k = lift(constant_net(&Constant::Par, m)?, ctx, m)?;
            let started = app_net(
                &k,
                &compile_term(a, ctx, m)?,
                ctx,
                &Type::Com,
                &Type::arrow(Type::Com, Type::Com),
                m,
            )?;
            app_net(
                &started,
                &compile_term(b, ctx, m)?,
                ctx,
                &Type::Com,
                &Type::Com,
                m,
            )
        }
        Term::At(sub, node) => {
            let mut g = compile_term(sub, ctx, m)?;
            place(&mut g, node);
            Ok(g)
        }
    }
}

/// Compiles a typechecked unit to a net. Engines keep the placement of the
/// innermost enclosing brace; the rest go to the unit's root node.
pub fn compile(u: &CompilationUnit, minter: &NameMinter) -> Result<GamNet, CompileError> {
    typecheck(&u.term, &u.ctx)?;
    let mut g = compile_term(&u.term, &u.ctx, minter)?;
    place(&mut g, &u.root);
    Ok(g)
}

/// A ground result from the oracle interpreter.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Value {
    Int(i64),
    Done,
}

#[derive(Clone, PartialEq, Eq, Debug, Error)]
pub enum EvalError {
    #[error("evaluation fuel exhausted")]
    Timeout,
    #[error("stuck: {0}")]
    Stuck(String),
}

#[derive(Clone)]
enum Binding {
    Thunk(Term, Env),
    Cell(usize),
}

#[derive(Clone)]
struct Env(Rc<Vec<(String, Binding)>>);

impl Env {
    fn empty() -> Env {
        Env(Rc::new(Vec::new()))
    }

    fn lookup(&self, x: &str) -> Option<&Binding> {
        self.0.iter().rev().find(|(y, _)| y == x).map(|(_, b)| b)
    }

    fn bind(&self, x: &str, b: Binding) -> Env {
        let mut v = (*self.0).clone();
        v.push((x.to_string(), b));
        Env(Rc::new(v))
    }
}

enum Val {
    Int(i64),
    Done,
    Clo(String, Term, Env),
    Loc(usize),
}

struct Machine {
    store: Vec<i64>,
    fuel: u64,
}

impl Machine {
    fn eval(&mut self, t: &Term, env: &Env) -> Result<Val, EvalError> {
        if self.fuel == 0 {
            return Err(EvalError::Timeout);
        }
        self.fuel -= 1;
        match t {
            Term::Var(x) => match env.lookup(x) {
                Some(Binding::Thunk(t2, e2)) => {
                    let (t2, e2) = (t2.clone(), e2.clone());
                    self.eval(&t2, &e2)
                }
                Some(Binding::Cell(l)) => Ok(Val::Loc(*l)),
                None => Err(EvalError::Stuck(format!("unbound variable `{x}`"))),
            },
            Term::Lam(x, _, body) => Ok(Val::Clo(x.clone(), (**body).clone(), env.clone())),
            Term::App(fun, arg) => match self.eval(fun, env)? {
                Val::Clo(x, body, cenv) => {
                    let e2 = cenv.bind(&x, Binding::Thunk((**arg).clone(), env.clone()));
                    self.eval(&body, &e2)
                }
                _ => Err(EvalError::Stuck(format!("`{fun}` is not a function"))),
            },
            Term::Fix(fun) => {
                let unfolded = Term::App(fun.clone(), Box::new(Term::Fix(fun.clone())));
                self.eval(&unfolded, env)
            }
            Term::Lit(n) => Ok(Val::Int(*n)),
            Term::Binop(op, l, r) => {
                let a = self.int(l, env)?;
                let b = self.int(r, env)?;
                Ok(Val::Int(op.eval(a, b)))
            }
            Term::If(c, th, el) => {
                if self.int(c, env)? == 0 {
                    self.eval(th, env)
                } else {
                    self.eval(el, env)
                }
            }
            Term::Seq(a, b) => {
                self.eval(a, env)?;
                self.eval(b, env)
            }
            Term::Assign(x, rhs) => {
                let v = self.int(rhs, env)?;
                let l = self.loc(x, env)?;
                self.store[l] = v;
                Ok(Val::Done)
            }
            Term::Deref(x) => {
                let l = self.loc(x, env)?;
                Ok(Val::Int(self.store[l]))
            }
            Term::New(x, body) => {
                self.store.push(0);
                let l = self.store.len() - 1;
                self.eval(body, &env.bind(x, Binding::Cell(l)))
            }
            #[cfg(feature = "par")]
            Term::Par(_, _) => Err(EvalError::Stuck(
                "parallel composition is outside the sequential oracle".into(),
            )),
            Term::At(sub, _) => self.eval(sub, env),
        }
    }

    fn int(&mut self, t: &Term, env: &Env) -> Result<i64, EvalError> {
        match self.eval(t, env)? {
            Val::Int(n) => Ok(n),
            _ => Err(EvalError::Stuck(format!("`{t}` is not an integer"))),
        }
    }

    fn loc(&mut self, x: &str, env: &Env) -> Result<usize, EvalError> {
        match self.eval(&Term::Var(x.to_string()), env)? {
            Val::Loc(l) => Ok(l),
            _ => Err(EvalError::Stuck(format!("`{x}` is not an assignable cell"))),
        }
    }
}

/// Call-by-name big-step oracle for closed sequential programs.
///
/// Evaluation recurses once per fuel unit in the worst case, so it runs on
/// a dedicated thread with a stack sized for the full fuel budget.
pub fn reference_interpret(t: &Term, fuel: u64) -> Result<Value, EvalError> {
    let t = t.clone();
    std::thread::Builder::new()
        .stack_size(64 << 20)
        .spawn(move || {
            let mut m = Machine {
                store: Vec::new(),
                fuel,
            };
            match m.eval(&t, &Env::empty())? {
                Val::Int(n) => Ok(Value::Int(n)),
                Val::Done => Ok(Value::Done),
                _ => Err(EvalError::Stuck("the result is not a ground value".into())),
            }
        })
        .expect("the evaluator thread spawns")
        .join()
        .expect("the evaluator thread finishes")
}
