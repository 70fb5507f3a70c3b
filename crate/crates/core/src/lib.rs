//! Oblivious aggregation of top-k sparsified federated-learning gradients.
//!
//! The crate is organised bottom-up:
//!
//! * [`primitives`] - branch-free select/swap on packed 64-bit cells.
//! * [`trace`] - an instrumented memory arena that records every access so
//!   that obliviousness can be checked by comparing traces.
//! * [`osort`] - Batcher's bitonic sorting network built on [`primitives::o_swap`].
//! * [`aggregation`] - the Linear, Baseline, Advanced and Grouped server-side
//!   aggregators plus averaging/perturbation.
//! * [`oram`] - a PathORAM baseline with a linear-scan position map.
//! * [`flcore`] - a desk-scale DP-FedAVG simulator with a trust boundary.
//! * [`attack`] - label inference from leaked top-k gradient indices.
//! * [`cli`] - the subcommands behind the `olive` binary.

pub mod aggregation;
pub mod attack;
pub mod cli;
pub mod error;
pub mod flcore;
pub mod oram;
pub mod osort;
pub mod primitives;
pub mod trace;

pub use error::{Error, Result};
pub use primitives::CtWord;
