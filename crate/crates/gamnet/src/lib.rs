//! Compiler and runtime for networks of heap-and-register abstract machines.
//!
//! The crate compiles programs in a small higher-order concurrent language
//! into networks of message-passing engines, runs those networks locally or
//! across processes, and checks the interaction traces they produce against
//! the legality conditions of their interfaces.

pub mod combinators;
pub mod explore;
pub mod game;
pub mod hram;
pub mod ica;
pub mod net;
pub mod nominal;
pub mod runtime;
