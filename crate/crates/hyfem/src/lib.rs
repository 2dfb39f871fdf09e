//! Hybrid federated learning over data partitioned in both sample space and
//! feature space.
//!
//! Clients hold a subset of the samples *and* a subset of the feature blocks
//! (views). Each client trains per-view feature extractors plus a local
//! inference head; the server aggregates extractors by consensus averaging
//! and assembles a full-feature global head by Hungarian-matching local head
//! neurons onto global ones. Two local-update flavors are provided: a
//! proximally regularized one and a plain unregularized one.
//!
//! The crate is organized around the simulation pipeline:
//!
//! - [`nn`]: dense networks, cross-entropy, exact gradients, SGD.
//! - [`data`]: feature schemas, synthetic multi-view data, hybrid partitions,
//!   CSV ingest.
//! - [`matching`]: linear assignment and matched averaging of head neurons.
//! - [`federation`]: client/server state and the round loop.
//! - [`eval`]: local and global accuracy metrics.
//! - [`config`]: run specifications, built-in scenarios, experiment driver.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `hyfem` binary for the flag-driven experiment runner.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod matching;
pub mod nn;
pub mod seeding;

pub use error::{Error, Result};
