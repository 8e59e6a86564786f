//! Deterministic desk-scale cooperative driving automation simulator.

pub mod adversarial;
pub mod control;
pub mod datalog;
pub mod dynamics;
pub mod evaluation;
pub mod error;
pub mod geometry;
pub mod localization;
pub mod map;
pub mod perception;
pub mod planning;
pub mod platoon;
pub mod rng;
pub mod scenario;
pub mod v2x;
pub mod world;

pub use error::{Error, Result};
