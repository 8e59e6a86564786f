//! World-state value types shared by every pipeline stage.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou_bev, OrientedBox, Pose2D};
use crate::map::LaneGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    PlatoonLeader,
    PlatoonMember,
    MergingCav,
    Background,
    Infrastructure,
}

impl Role {
    /// Whether the agent carries a V2X radio.
    pub fn is_connected(self) -> bool {
        !matches!(self, Role::Background)
    }

    pub fn is_platoon(self) -> bool {
        matches!(self, Role::PlatoonLeader | Role::PlatoonMember)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: AgentId,
    pub pose: Pose2D,
    pub speed: f64,
    pub accel: f64,
    pub steer: f64,
    pub length: f64,
    pub width: f64,
    pub wheelbase: f64,
    pub role: Role,
}

impl VehicleState {
    pub fn new(id: AgentId, role: Role, pose: Pose2D, speed: f64) -> Self {
        Self {
            id,
            pose,
            speed,
            accel: 0.0,
            steer: 0.0,
            length: 4.8,
            width: 2.0,
            wheelbase: 2.8,
            role,
        }
    }

    pub fn with_dimensions(mut self, length: f64, width: f64, wheelbase: f64) -> Self {
        self.length = length;
        self.width = width;
        self.wheelbase = wheelbase;
        self
    }

    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::from_pose(&self.pose, self.length, self.width)
    }

    pub fn validate(&self, steer_max: f64) -> Result<()> {
        let field = |name: &str| format!("vehicles[{}].{name}", self.id);
        if !self.pose.is_finite() {
            return Err(Error::validation(field("pose"), "must be finite"));
        }
        if !(self.speed >= 0.0) {
            return Err(Error::validation(field("speed"), "must be non-negative"));
        }
        for (name, v) in [
            ("length", self.length),
            ("width", self.width),
            ("wheelbase", self.wheelbase),
        ] {
            if !(v > 0.0) {
                return Err(Error::validation(field(name), "must be positive"));
            }
        }
        if self.steer.abs() > steer_max {
            return Err(Error::validation(field("steer"), "exceeds steer_max"));
        }
        Ok(())
    }
}

/// A frozen snapshot of every vehicle at one instant.
#[derive(Debug, Clone)]
pub struct Scene {
    pub time: f64,
    pub vehicles: Vec<VehicleState>,
    pub ego_id: AgentId,
    pub map: Arc<LaneGraph>,
}

impl Scene {
    pub fn new(
        time: f64,
        vehicles: Vec<VehicleState>,
        ego_id: AgentId,
        map: Arc<LaneGraph>,
    ) -> Result<Self> {
        let scene = Self {
            time,
            vehicles,
            ego_id,
            map,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vehicle(self.ego_id).is_none() {
            return Err(Error::validation("ego_id", "not present among vehicles"));
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if self.vehicles[..i].iter().any(|o| o.id == v.id) {
                return Err(Error::validation("vehicles", format!("duplicate id {}", v.id)));
            }
        }
        Ok(())
    }

    pub fn vehicle(&self, id: AgentId) -> Option<&VehicleState> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn ego(&self) -> &VehicleState {
        self.vehicle(self.ego_id).expect("ego validated at construction")
    }

    /// Pairs of vehicles whose footprints overlap (IoU > 0).
    pub fn collisions(&self) -> Vec<(AgentId, AgentId)> {
        let mut out = Vec::new();
        for (i, a) in self.vehicles.iter().enumerate() {
            for b in &self.vehicles[i + 1..] {
                let overlap = box_iou_bev(&a.footprint(), &b.footprint()).unwrap_or(0.0);
                if overlap > 0.0 {
                    out.push((a.id, b.id));
                }
            }
        }
        out
    }
}
