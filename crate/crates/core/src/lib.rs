//! Monte Carlo and exact-enumeration engine for maximal-cluster statistics in
//! non-critical site percolation on `Z^d`.

pub mod clusters;
pub mod error;
pub mod extremes;
pub mod harness;
pub mod hitting;
pub mod lattice;
pub mod oracles;
pub mod sampler;
pub mod stats;
pub mod tails;
pub mod unionfind;

pub use error::{Error, Result};
