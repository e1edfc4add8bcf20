//! Distributed equilibrium seeking for aggregative games over networks.
//!
//! Agents minimize costs that depend on their own strategy and on the
//! average of everyone's strategies, talking only to graph neighbors.  Two
//! synchronous engines cover the two constraint regimes:
//!
//! * [`trades::Trades`] — local constraint sets handled by projection, with
//!   a consensus tracker standing in for the unknown average;
//! * [`trades_c::TradesC`] — shared affine inequality constraints handled by
//!   per-agent multipliers with tracked constraint values.
//!
//! Centralized reference dynamics and solvers live in [`oracles`], feasible
//! sets and Dykstra projections in [`projection`], doubly stochastic
//! topologies in [`network`], and a config-driven Monte Carlo harness with
//! CSV traces in [`experiments`].

pub mod engine;
pub mod error;
pub mod experiments;
pub mod game;
pub mod network;
pub mod numeric;
pub mod oracles;
pub mod profile;
pub mod projection;
pub mod trace;
pub mod trades;
pub mod trades_c;

pub use crate::error::{Error, Result};
pub use crate::game::{AggregativeGame, GameSpec};
pub use crate::network::{CommNetwork, NetworkSpec};
pub use crate::profile::{Layout, Profile};
