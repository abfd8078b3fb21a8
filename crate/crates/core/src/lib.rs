//! Radio-resource management for vehicle-to-vehicle links on a Manhattan grid.
//!
//! The crate simulates pairs of vehicles (a transmitter following its receiver)
//! that share a small set of orthogonal channels inside geographic groups. A
//! road-side unit decides each epoch which pair gets which channel and how many
//! queued packets it sends, trading queueing delay against transmit power.
//!
//! Layers, bottom up:
//!
//! * [`grid`], [`channel`], [`traffic`], [`grouping`]: mobility, propagation,
//!   queues and clustering.
//! * [`env`]: the whole network as one decision process.
//! * [`policies`]: heuristic baselines and the per-group min-cost matching.
//! * [`neural`], [`drl`]: the recurrent Q-network and its online training.
//! * [`oracle`]: exact and tabular solutions of a tiny instance.
//! * [`config`], [`harness`]: experiment files, sweeps and CSV output.

pub mod channel;
pub mod config;
pub mod drl;
pub mod env;
pub mod error;
pub mod grid;
pub mod grouping;
pub mod harness;
pub mod neural;
pub mod oracle;
pub mod policies;
pub mod rng;
pub mod traffic;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their examples run as doc-tests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/queues.md")]
    mod queues {}
    #[doc = include_str!("../../../book/src/grouping.md")]
    mod grouping {}
    #[doc = include_str!("../../../book/src/decision_process.md")]
    mod decision_process {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/q_network.md")]
    mod q_network {}
    #[doc = include_str!("../../../book/src/learning.md")]
    mod learning {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
