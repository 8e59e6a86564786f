//! Scenario documents and the closed-loop simulation.

pub mod config;
pub mod sim;

pub use config::{load_scenario, parse_scenario, Dimensions, ManeuverKind, ScenarioConfig, SpawnSpec, TaskSpec};
pub use sim::{run_scenario, RunOutcome, Simulation, TerminatedBy};
