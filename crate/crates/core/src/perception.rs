//! Surrogate sensing layer.
//!
//! A planar ray-cast LiDAR decides which vehicles are visible from a sensor
//! pose; a rule-based detector turns visible vehicles into noisy boxes.
//! Collaborating agents share either raw hit counts (early fusion) or final
//! detections (late fusion).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou_bev, transform_from_frame, transform_to_frame, OrientedBox, Pose2D};
use crate::world::{AgentId, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub beams: u32,
    pub max_range: f64,
    pub sigma_pos: f64,
    pub sigma_yaw: f64,
    pub dropout_p: f64,
    pub min_hits: u32,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            beams: 360,
            max_range: 120.0,
            sigma_pos: 0.2,
            sigma_yaw: 0.02,
            dropout_p: 0.0,
            min_hits: 1,
        }
    }
}

impl LidarConfig {
    /// Same geometry, all detector noise disabled.
    pub fn noise_free(self) -> Self {
        Self {
            sigma_pos: 0.0,
            sigma_yaw: 0.0,
            dropout_p: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams < 8 {
            return Err(Error::validation("sensors.beams", "must be at least 8"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::validation("sensors.max_range", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation("sensors.dropout_p", "must lie in [0, 1)"));
        }
        if self.min_hits < 1 {
            return Err(Error::validation("sensors.min_hits", "must be at least 1"));
        }
        if !(self.sigma_pos >= 0.0) || !(self.sigma_yaw >= 0.0) {
            return Err(Error::validation("sensors.sigma_pos", "noise must be non-negative"));
        }
        Ok(())
    }
}

/// Number of beam returns per target vehicle from one sensor pose.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HitRecord(pub BTreeMap<AgentId, u32>);

impl HitRecord {
    pub fn hits(&self, target: AgentId) -> u32 {
        self.0.get(&target).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u32 {
        self.0.values().sum()
    }

    pub fn visible(&self, min_hits: u32) -> BTreeSet<AgentId> {
        self.0
            .iter()
            .filter(|(_, &h)| h >= min_hits)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Element-wise sum of several records.
    pub fn merged<'a>(records: impl IntoIterator<Item = &'a HitRecord>) -> HitRecord {
        let mut out = BTreeMap::new();
        for rec in records {
            for (&id, &h) in &rec.0 {
                *out.entry(id).or_insert(0) += h;
            }
        }
        HitRecord(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Box in the frame of the agent that reported it.
    pub bbox: OrientedBox,
    pub confidence: f64,
    pub source: AgentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    NoFusion,
    Late,
    Early,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::NoFusion, FusionMode::Late, FusionMode::Early];

    pub fn label(self) -> &'static str {
        match self {
            FusionMode::NoFusion => "no_fusion",
            FusionMode::Late => "late",
            FusionMode::Early => "early",
        }
    }
}

/// Casts `cfg.beams` equiangular rays from the sensor vehicle's pose.
pub fn simulate_lidar(scene: &Scene, sensor: AgentId, cfg: &LidarConfig) -> Result<HitRecord> {
    let origin = scene
        .vehicle(sensor)
        .ok_or_else(|| Error::domain(format!("sensor {sensor} not in scene")))?
        .pose;
    Ok(cast_from(origin, sensor, scene, cfg))
}

fn cast_from(origin: Pose2D, sensor: AgentId, scene: &Scene, cfg: &LidarConfig) -> HitRecord {
    let candidates: Vec<(AgentId, OrientedBox)> = scene
        .vehicles
        .iter()
        .filter(|v| v.id != sensor)
        .map(|v| (v.id, v.footprint()))
        .filter(|(_, b)| (b.cx - origin.x).hypot(b.cy - origin.y) <= cfg.max_range + b.circumradius())
        .collect();
    let mut hits = BTreeMap::new();
    if candidates.is_empty() {
        return HitRecord(hits);
    }
    let step = std::f64::consts::TAU / cfg.beams as f64;
    for i in 0..cfg.beams {
        let angle = origin.yaw + step * i as f64;
        let dir = [angle.cos(), angle.sin()];
        let mut nearest: Option<(f64, AgentId)> = None;
        for (id, bbox) in &candidates {
            if let Some(t) = bbox.ray_intersection([origin.x, origin.y], dir) {
                if t <= cfg.max_range && nearest.is_none_or(|(bt, _)| t < bt) {
                    nearest = Some((t, *id));
                }
            }
        }
        if let Some((_, id)) = nearest {
            *hits.entry(id).or_insert(0u32) += 1;
        }
    }
    HitRecord(hits)
}

/// Confidence assigned to a detection supported by `hits` beam returns.
pub fn confidence_from_hits(hits: u32) -> f64 {
    1.0 - (-(hits as f64) / 10.0).exp()
}

/// Rule-based surrogate detector: every target with at least `min_hits`
/// returns is reported (unless dropped) with its footprint perturbed by
/// Gaussian noise, expressed in the detecting agent's frame.
pub fn detect<R: Rng + ?Sized>(
    scene: &Scene,
    agent: AgentId,
    hits: &HitRecord,
    cfg: &LidarConfig,
    rng: &mut R,
) -> Result<Vec<Detection>> {
    let frame = scene
        .vehicle(agent)
        .ok_or_else(|| Error::domain(format!("agent {agent} not in scene")))?
        .pose;
    let mut out = Vec::new();
    for (&target, &count) in &hits.0 {
        if count < cfg.min_hits {
            continue;
        }
        let Some(truth) = scene.vehicle(target) else {
            continue;
        };
        let dropped = rng.random::<f64>() < cfg.dropout_p;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let nyaw: f64 = rng.sample(StandardNormal);
        if dropped {
            continue;
        }
        let mut bbox = transform_to_frame(&truth.footprint(), &frame);
        bbox.cx += cfg.sigma_pos * nx;
        bbox.cy += cfg.sigma_pos * ny;
        bbox = OrientedBox::new(bbox.cx, bbox.cy, bbox.length, bbox.width, bbox.yaw + cfg.sigma_yaw * nyaw);
        out.push(Detection {
            bbox,
            confidence: confidence_from_hits(count),
            source: agent,
        });
    }
    Ok(out)
}

/// Greedy confidence-ordered non-maximum suppression.
pub fn non_max_suppression(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for det in detections {
        let suppressed = kept
            .iter()
            .any(|k| box_iou_bev(&k.bbox, &det.bbox).unwrap_or(0.0) >= iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

pub const DEFAULT_NMS_IOU: f64 = 0.15;

/// Late fusion: brings every agent's detections into the ego frame and
/// suppresses duplicates.
pub fn fuse_late(
    detections: &[Detection],
    source_poses: &BTreeMap<AgentId, Pose2D>,
    ego_pose: &Pose2D,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let mut in_ego = Vec::with_capacity(detections.len());
    for det in detections {
        let pose = source_poses
            .get(&det.source)
            .ok_or_else(|| Error::domain(format!("unknown pose for source {}", det.source)))?;
        let world = transform_from_frame(&det.bbox, pose);
        in_ego.push(Detection {
            bbox: transform_to_frame(&world, ego_pose),
            ..det.clone()
        });
    }
    Ok(non_max_suppression(in_ego, nms_iou))
}

/// Early fusion: raw returns from every contributing agent are pooled
/// before thresholding, then detected once from the ego perspective.
pub fn fuse_early<R: Rng + ?Sized>(
    scene: &Scene,
    ego: AgentId,
    hit_records: &[HitRecord],
    cfg: &LidarConfig,
    rng: &mut R,
) -> Result<Vec<Detection>> {
    let pooled = HitRecord::merged(hit_records);
    detect(scene, ego, &pooled, cfg, rng)
}

/// Rectangular evaluation window in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRange {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl EvalRange {
    pub fn symmetric(half_x: f64, half_y: f64) -> Self {
        Self {
            x: [-half_x, half_x],
            y: [-half_y, half_y],
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x[0] && x <= self.x[1] && y >= self.y[0] && y <= self.y[1]
    }
}

/// Output of one cooperative perception pass for a fixed ego.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionOutcome {
    /// Fused detections in the ego frame, restricted to the evaluation range.
    pub detections: Vec<Detection>,
    /// Evaluation targets (ground truth boxes in the ego frame).
    pub targets: Vec<(AgentId, OrientedBox)>,
}

/// Runs the surrogate pipeline from `ego`'s perspective.
///
/// `collaborators` are the agents whose data the ego fuses (ignored for
/// `NoFusion`); `labelers` are the connected agents whose returns define the
/// evaluation targets (a vehicle is a target when any labeler hits it).
#[allow(clippy::too_many_arguments)]
pub fn perceive<R: Rng + ?Sized>(
    scene: &Scene,
    ego: AgentId,
    collaborators: &[AgentId],
    labelers: &[AgentId],
    mode: FusionMode,
    cfg: &LidarConfig,
    range: &EvalRange,
    rng: &mut R,
) -> Result<PerceptionOutcome> {
    let ego_pose = scene
        .vehicle(ego)
        .ok_or_else(|| Error::domain(format!("ego {ego} not in scene")))?
        .pose;
    let mut records: BTreeMap<AgentId, HitRecord> = BTreeMap::new();
    let mut record_for = |id: AgentId| -> Result<HitRecord> {
        if let Some(r) = records.get(&id) {
            return Ok(r.clone());
        }
        let r = simulate_lidar(scene, id, cfg)?;
        records.insert(id, r.clone());
        Ok(r)
    };

    let mut participants = vec![ego];
    if mode != FusionMode::NoFusion {
        participants.extend(collaborators.iter().copied().filter(|&c| c != ego));
    }
    let detections = match mode {
        FusionMode::NoFusion => {
            let hits = record_for(ego)?;
            detect(scene, ego, &hits, cfg, rng)?
        }
        FusionMode::Late => {
            let mut all = Vec::new();
            let mut poses = BTreeMap::new();
            for &p in &participants {
                let hits = record_for(p)?;
                all.extend(detect(scene, p, &hits, cfg, rng)?);
                poses.insert(p, scene.vehicle(p).expect("participant in scene").pose);
            }
            fuse_late(&all, &poses, &ego_pose, DEFAULT_NMS_IOU)?
        }
        FusionMode::Early => {
            let hit_records = participants
                .iter()
                .map(|&p| record_for(p))
                .collect::<Result<Vec<_>>>()?;
            fuse_early(scene, ego, &hit_records, cfg, rng)?
        }
    };

    let mut labeled = BTreeSet::new();
    for &l in labelers.iter().chain(std::iter::once(&ego)) {
        labeled.extend(record_for(l)?.visible(1));
    }
    labeled.remove(&ego);
    let targets = labeled
        .into_iter()
        .filter_map(|id| scene.vehicle(id).map(|v| (id, transform_to_frame(&v.footprint(), &ego_pose))))
        .filter(|(_, b)| range.contains(b.cx, b.cy))
        .collect();
    // Collaborators see the ego too; the ego knows where it is.
    let own = transform_to_frame(&scene.vehicle(ego).expect("ego in scene").footprint(), &ego_pose);
    let detections = detections
        .into_iter()
        .filter(|d| range.contains(d.bbox.cx, d.bbox.cy) && !own.contains_point(d.bbox.cx, d.bbox.cy))
        .collect();
    Ok(PerceptionOutcome { detections, targets })
}
