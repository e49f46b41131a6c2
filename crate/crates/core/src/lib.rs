//! Utility-proportional-fair bandwidth allocation.
//!
//! - [`utility`]: sigmoidal and logarithmic QoS utility curves.
//! - [`solver`]: price-bisection solver for the weighted sum-of-log-utility problem.
//! - [`broker`]: the rate broker state machine, its line protocol and TCP service.
//! - [`shaper`]: token buckets and the shared bottleneck FIFO.
//! - [`simnet`]: tick-driven simulation of streaming and download flows.
//! - [`config`]: TOML configuration files.

// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod broker;
pub mod config;
pub mod fmt;
pub mod ids;
pub mod shaper;
pub mod simnet;
pub mod solver;
pub mod utility;

pub use ids::{AppId, UeId};
pub use utility::{QoeObservation, UtilityFunction};
