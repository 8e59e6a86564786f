//! YAML scenario documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvaluationConfig;
use crate::localization::NoiseConfig;
use crate::map::LaneGraph;
use crate::perception::{FusionMode, LidarConfig};
use crate::platoon::MergePolicy;
use crate::v2x::CommConfig;
use crate::world::Role;

fn default_dt() -> f64 {
    0.05
}

fn default_time_gap() -> f64 {
    0.6
}

fn default_fusion() -> FusionMode {
    FusionMode::Late
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub length: f64,
    pub width: f64,
    #[serde(default = "Dimensions::default_wheelbase")]
    pub wheelbase: f64,
}

impl Dimensions {
    fn default_wheelbase() -> f64 {
        2.8
    }
}

impl Default for Dimensions {
    fn default() -> Self {
        Self {
            length: 4.8,
            width: 2.0,
            wheelbase: 2.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub role: Role,
    pub lane: String,
    pub s: f64,
    pub speed: f64,
    #[serde(default)]
    pub dimensions: Dimensions,
    /// Cruise speed; defaults to the initial speed.
    #[serde(default)]
    pub desired_speed: Option<f64>,
    /// Car-following time gap of scripted background vehicles.
    #[serde(default)]
    pub time_gap: Option<f64>,
    /// Lateral offset from the lane centerline at spawn.
    #[serde(default)]
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    PlatoonFollow,
    CooperativeMerge,
    Cruise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Index into `spawns`; spawned agents take their index as id.
    pub agent: u32,
    pub lane: String,
    pub s: f64,
    pub maneuver: ManeuverKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub map_file: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub max_time: f64,
    /// Informational only; the surrogate sensors ignore it.
    #[serde(default)]
    pub weather: Option<String>,
    #[serde(default = "default_time_gap")]
    pub desired_time_gap: f64,
    #[serde(default)]
    pub merge_policy: MergePolicy,
    /// How the platoon leader pools perception when judging merge gaps.
    #[serde(default = "default_fusion")]
    pub fusion: FusionMode,
    #[serde(default)]
    pub comm: CommConfig,
    #[serde(default)]
    pub sensors: LidarConfig,
    #[serde(default)]
    pub localization: NoiseConfig,
    pub spawns: Vec<SpawnSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

/// Parses and validates everything that does not need the map.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_yaml::from_str(text).map_err(|e| Error::Parse {
        line: e.location().map_or(0, |l| l.line()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::validation("dt", "must be positive"));
        }
        if !(self.max_time > 0.0) || !self.max_time.is_finite() {
            return Err(Error::validation("max_time", "must be positive"));
        }
        if !(self.desired_time_gap > 0.0) {
            return Err(Error::validation("desired_time_gap", "must be positive"));
        }
        self.comm.validate()?;
        self.sensors.validate()?;
        if self.localization.sigma_gps < 0.0 || self.localization.sigma_accel < 0.0 || self.localization.sigma_yaw_rate < 0.0 {
            return Err(Error::validation("localization", "noise magnitudes must be non-negative"));
        }
        if self.spawns.is_empty() {
            return Err(Error::validation("spawns", "at least one vehicle is required"));
        }
        for (i, sp) in self.spawns.iter().enumerate() {
            let field = |f: &str| format!("spawns[{i}].{f}");
            if !(sp.speed >= 0.0) {
                return Err(Error::validation(field("speed"), "must be non-negative"));
            }
            if sp.desired_speed.is_some_and(|v| !(v >= 0.0)) {
                return Err(Error::validation(field("desired_speed"), "must be non-negative"));
            }
            if sp.time_gap.is_some_and(|v| !(v > 0.0)) {
                return Err(Error::validation(field("time_gap"), "must be positive"));
            }
            let d = sp.dimensions;
            if !(d.length > 0.0 && d.width > 0.0 && d.wheelbase > 0.0) {
                return Err(Error::validation(field("dimensions"), "must be positive"));
            }
        }
        let leaders = self.spawns.iter().filter(|s| s.role == Role::PlatoonLeader).count();
        let platoon_roles = self.spawns.iter().filter(|s| s.role.is_platoon()).count();
        if platoon_roles > 0 && leaders != 1 {
            return Err(Error::validation(
                "spawns",
                format!("exactly one platoon_leader is required, found {leaders}"),
            ));
        }
        self.evaluation.validate()?;
        for (i, t) in self.tasks.iter().enumerate() {
            if t.agent as usize >= self.spawns.len() {
                return Err(Error::validation(format!("tasks[{i}].agent"), "no such spawn"));
            }
        }
        Ok(())
    }

    /// Checks spawn and task positions against the loaded map.
    pub fn validate_against(&self, map: &LaneGraph) -> Result<()> {
        for (i, sp) in self.spawns.iter().enumerate() {
            let lane = map
                .lane(&sp.lane)
                .ok_or_else(|| Error::validation(format!("spawns[{i}].lane"), format!("unknown lane `{}`", sp.lane)))?;
            if !(0.0..=lane.length()).contains(&sp.s) {
                return Err(Error::validation(
                    format!("spawns[{i}].s"),
                    format!("{} lies outside lane `{}` of length {:.3}", sp.s, sp.lane, lane.length()),
                ));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            let lane = map
                .lane(&t.lane)
                .ok_or_else(|| Error::validation(format!("tasks[{i}].lane"), format!("unknown lane `{}`", t.lane)))?;
            if !(0.0..=lane.length()).contains(&t.s) {
                return Err(Error::validation(format!("tasks[{i}].s"), "outside the lane"));
            }
        }
        Ok(())
    }
}

/// Reads a scenario file and the map it references (relative to the file).
pub fn load_scenario(path: &Path) -> Result<(ScenarioConfig, LaneGraph)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = parse_scenario(&text)?;
    let map_path = path.parent().unwrap_or(Path::new(".")).join(&cfg.map_file);
    let map = LaneGraph::load(&map_path)?;
    cfg.validate_against(&map)?;
    Ok((cfg, map))
}
