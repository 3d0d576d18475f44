//! Selective state-space scan engine with sequential token merging.
//!
//! The crate implements a diagonal selective SSM (input-dependent B, C, Δ with
//! zero-order-hold discretization), a toy bidirectional Vision-Mamba-style
//! encoder stack, nearest-neighbor token merging with hidden-state
//! compensation, the perturbation-loss analysis that justifies it, an analytic
//! FLOPs model, and a synthetic linear-probe benchmark.
//!
//! Everything here is pure computation over `alloc` containers; IO, file
//! formats and the CLI live in the companion `stm-cli` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod flops;
pub mod loss;
pub mod math;
pub mod merge;
pub mod probe;
pub mod report;
pub mod ssm;
pub mod verify;
pub mod vim;

pub use error::Error;

/// Result alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;
