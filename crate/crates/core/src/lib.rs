//! Deterministic discrete-event simulation of grid resources, users and
//! economic brokers.
//!
//! Entities are cooperative state machines driven by [`kernel::Engine`].
//! [`scenario`] wires a full grid from a JSON [`scenario::ScenarioConfig`].

pub mod application;
pub mod broker;
pub mod error;
pub mod kernel;
pub mod message;
pub mod net;
pub mod resource;
pub mod scenario;
pub mod stats;
pub mod user;

pub use error::{Error, Result};
pub use kernel::{Engine, Entity, EntityId, Next, SimTime};
pub use message::{GridEngine, Message};
pub use scenario::{preset_wwg, run_scenario, run_single, run_sweep, ScenarioConfig};
