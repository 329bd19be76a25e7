//! Simulation core for a peer-to-peer local energy market on a radial feeder.

pub mod artifacts;
pub mod assets;
pub mod cem;
pub mod config;
pub mod env;
pub mod error;
pub mod grid;
pub mod kpi;
pub mod ledger;
pub mod market;
pub mod network;
pub mod policies;
pub mod reward;
pub mod runner;
pub mod types;

pub use config::Scenario;
pub use env::{Action, MarketEnv, Observation, StepResult};
pub use error::{Error, Result};
pub use types::AgentId;
