//! Planning, analysis and verification for patch-based CNN inference on
//! memory-constrained targets.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation
//! over immutable network descriptions; file formats and the command-line
//! front end live in the `mcupatch` crate.
//!
//! * [`net`] describes networks as blocks and lowers them to primitive layers.
//! * [`memory`] profiles analytic activation memory per layer and per block.
//! * [`geometry`] does receptive-field calculus, patch/halo geometry and MAC
//!   counting for layer-wise and patch-wise execution.
//! * [`schedule`] builds patch plans, sweeps `(p, n)`, picks the cheapest
//!   feasible schedule and redistributes receptive fields.
//! * [`search`] is the joint architecture and schedule evolutionary search.
//! * [`exec`] is a reference executor proving patch-wise execution is
//!   bit-exact with layer-wise execution.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod exec;
pub mod geometry;
pub mod memory;
pub mod net;
pub mod schedule;
pub mod search;

pub use error::{Error, Result};
pub use net::{
    builtin_network, BlockKind, BlockSpec, ChainBuilder, Layer, LayerChain, LayerKind,
    NetworkSpec, TensorShape,
};

/// Bytes per kilobyte used for every kB figure in reports.
pub const KIB: u64 = 1024;

/// Formats a byte count as kB with one decimal place.
pub fn kib(bytes: u64) -> f64 {
    bytes as f64 / KIB as f64
}
