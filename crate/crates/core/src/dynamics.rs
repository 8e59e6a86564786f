//! Kinematic bicycle model, integrated with forward Euler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::world::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    pub accel_cmd: f64,
    pub steer_cmd: f64,
}

impl ControlCommand {
    pub fn new(accel_cmd: f64, steer_cmd: f64) -> Self {
        Self {
            accel_cmd,
            steer_cmd,
        }
    }
}

/// Actuation limits applied before integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleLimits {
    pub accel_min: f64,
    pub accel_max: f64,
    pub steer_max: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            accel_min: -6.0,
            accel_max: 3.0,
            steer_max: 0.6,
        }
    }
}

impl VehicleLimits {
    pub fn saturate(&self, cmd: ControlCommand) -> ControlCommand {
        ControlCommand {
            accel_cmd: cmd.accel_cmd.clamp(self.accel_min, self.accel_max),
            steer_cmd: cmd.steer_cmd.clamp(-self.steer_max, self.steer_max),
        }
    }
}

/// Advances `state` by `dt` seconds under `cmd`.
///
/// All derivatives are evaluated at the start of the step; the recorded
/// `accel` and `steer` are the saturated commands actually applied.
pub fn step_bicycle(
    state: &VehicleState,
    cmd: ControlCommand,
    dt: f64,
    limits: &VehicleLimits,
) -> Result<VehicleState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::domain("dt must be positive and finite"));
    }
    if !cmd.accel_cmd.is_finite() || !cmd.steer_cmd.is_finite() || !state.pose.is_finite() || !state.speed.is_finite() {
        return Err(Error::domain("non-finite state or command"));
    }
    let cmd = limits.saturate(cmd);
    let v = state.speed;
    let yaw = state.pose.yaw;
    let mut next = state.clone();
    next.pose = Pose2D::new(
        state.pose.x + v * yaw.cos() * dt,
        state.pose.y + v * yaw.sin() * dt,
        yaw + v / state.wheelbase * cmd.steer_cmd.tan() * dt,
    );
    next.speed = (v + cmd.accel_cmd * dt).max(0.0);
    next.accel = cmd.accel_cmd;
    next.steer = cmd.steer_cmd;
    Ok(next)
}
