//! Data-regularized training engine for small linear-stack networks.
//!
//! The crate computes per-sample gradient alignment scores against a target
//! batch, projects the target gradient onto subset-average feasible sets
//! (global, layer-wise or arbitrary parameter groups), and executes the
//! resulting updates under explicit tensor-lifetime schedules. Every kernel
//! is metered: scalar additions and multiplications go to a FLOP counter and
//! every cached tensor goes through an allocation ledger.
//!
//! Module map:
//! - [`tensor`]: dense tensors, metered kernels, the instrumented allocator.
//! - [`rng`]: reproducible counter-based random streams.
//! - [`net`]: bias-free linear stack with dense, LoRA and embedding layers.
//! - [`scoring`]: Direct, GIP, PIP, compressed and embedding scoring.
//! - [`selection`]: partitions, selection rules and exact subset solvers.
//! - [`updates`]: one optimization step for each feasible-set design.
//! - [`scheduler`]: ledger replay, legality checks and checkpoint modeling.
//! - [`compression`]: factorized projections and compressed AdamW state.
//! - [`oracle`]: slow reference implementations used by tests and fixtures.

pub mod compression;
pub mod error;
pub mod net;
pub mod oracle;
pub mod rng;
pub mod scheduler;
pub mod scoring;
pub mod selection;
pub mod tensor;
pub mod updates;

pub use error::{Error, Result};
