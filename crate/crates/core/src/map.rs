//! Lane graph: centerline polylines, successor links and Frenet projection.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Pose2D};

pub type LaneId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Mainline,
    Ramp,
    AccelerationLane,
}

/// On-disk lane record, before cumulative arc lengths are derived.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawLane {
    id: LaneId,
    kind: LaneKind,
    width: f64,
    centerline: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawLaneGraph {
    lanes: Vec<RawLane>,
    #[serde(default)]
    successors: BTreeMap<LaneId, Vec<LaneId>>,
    #[serde(default)]
    merge_end_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub kind: LaneKind,
    pub width: f64,
    pub centerline: Vec<[f64; 2]>,
    cumulative: Vec<f64>,
}

impl Lane {
    pub fn new(id: impl Into<LaneId>, kind: LaneKind, width: f64, centerline: Vec<[f64; 2]>) -> Result<Self> {
        let id = id.into();
        if centerline.len() < 2 {
            return Err(Error::validation(
                format!("lanes[{id}].centerline"),
                "needs at least two points",
            ));
        }
        if !(width > 0.0) {
            return Err(Error::validation(format!("lanes[{id}].width"), "must be positive"));
        }
        let mut cumulative = Vec::with_capacity(centerline.len());
        cumulative.push(0.0);
        for w in centerline.windows(2) {
            let seg = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if !(seg > 0.0) || !seg.is_finite() {
                return Err(Error::validation(
                    format!("lanes[{id}].centerline"),
                    "cumulative arc length must be strictly increasing",
                ));
            }
            cumulative.push(cumulative.last().unwrap() + seg);
        }
        Ok(Self {
            id,
            kind,
            width,
            centerline,
            cumulative,
        })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Cumulative arc length at each centerline vertex.
    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn start(&self) -> [f64; 2] {
        self.centerline[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.centerline.last().unwrap()
    }

    /// Pose on the centerline at arc length `s` (clamped to the lane), heading
    /// along the local segment.
    pub fn pose_at(&self, s: f64) -> Pose2D {
        let s = s.clamp(0.0, self.length());
        let idx = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.centerline.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.centerline.len() - 2),
        };
        let a = self.centerline[idx];
        let b = self.centerline[idx + 1];
        let seg = self.cumulative[idx + 1] - self.cumulative[idx];
        let t = (s - self.cumulative[idx]) / seg;
        Pose2D::new(
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            (b[1] - a[1]).atan2(b[0] - a[0]),
        )
    }

    /// Nearest-point projection onto the centerline: `(s, d)` with `d`
    /// positive to the left of the direction of travel.
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, w) in self.centerline.windows(2).enumerate() {
            let [ax, ay] = w[0];
            let [bx, by] = w[1];
            let (ux, uy) = (bx - ax, by - ay);
            let len2 = ux * ux + uy * uy;
            let t = (((x - ax) * ux + (y - ay) * uy) / len2).clamp(0.0, 1.0);
            let (px, py) = (ax + t * ux, ay + t * uy);
            let dist = (x - px).hypot(y - py);
            if dist < best.0 {
                let side = ux * (y - py) - uy * (x - px);
                let d = if side < 0.0 { -dist } else { dist };
                best = (dist, self.cumulative[i] + t * len2.sqrt(), d);
            }
        }
        (best.1, best.2)
    }

    /// Heading of the centerline at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        normalize_angle(self.pose_at(s).yaw)
    }
}

/// The road network the world is built on.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneGraph {
    lanes: Vec<Lane>,
    successors: BTreeMap<LaneId, Vec<LaneId>>,
    /// Mainline arc length at which the acceleration lane ends.
    pub merge_end_s: Option<f64>,
}

impl LaneGraph {
    pub fn new(
        lanes: Vec<Lane>,
        successors: BTreeMap<LaneId, Vec<LaneId>>,
        merge_end_s: Option<f64>,
    ) -> Result<Self> {
        let graph = Self {
            lanes,
            successors,
            merge_end_s,
        };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        for (i, lane) in self.lanes.iter().enumerate() {
            if self.lanes[..i].iter().any(|l| l.id == lane.id) {
                return Err(Error::validation("lanes", format!("duplicate lane id `{}`", lane.id)));
            }
        }
        for (from, tos) in &self.successors {
            if self.lane(from).is_none() {
                return Err(Error::validation(
                    "successors",
                    format!("unknown lane `{from}`"),
                ));
            }
            for to in tos {
                if self.lane(to).is_none() {
                    return Err(Error::validation(
                        "successors",
                        format!("`{from}` references unknown lane `{to}`"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawLaneGraph = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let lanes = raw
            .lanes
            .into_iter()
            .map(|l| Lane::new(l.id, l.kind, l.width, l.centerline))
            .collect::<Result<Vec<_>>>()?;
        Self::new(lanes, raw.successors, raw.merge_end_s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let raw = RawLaneGraph {
            lanes: self
                .lanes
                .iter()
                .map(|l| RawLane {
                    id: l.id.clone(),
                    kind: l.kind,
                    width: l.width,
                    centerline: l.centerline.clone(),
                })
                .collect(),
            successors: self.successors.clone(),
            merge_end_s: self.merge_end_s,
        };
        serde_json::to_value(raw).expect("lane graph serializes")
    }

    pub fn lanes(&self) -> &[Lane] {
        &self.lanes
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    pub fn successors(&self, id: &str) -> &[LaneId] {
        self.successors.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn first_of_kind(&self, kind: LaneKind) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.kind == kind)
    }

    /// Frenet coordinates of `pose` relative to lane `lane_id`.
    pub fn project_to_frenet(&self, pose: &Pose2D, lane_id: &str) -> Result<(f64, f64)> {
        let lane = self
            .lane(lane_id)
            .ok_or_else(|| Error::domain(format!("unknown lane `{lane_id}`")))?;
        Ok(lane.project(pose.x, pose.y))
    }

    /// Lane whose centerline is laterally nearest to the point, preferring
    /// lanes whose corridor contains it.
    pub fn locate(&self, x: f64, y: f64) -> Option<(&Lane, f64, f64)> {
        let mut best: Option<(&Lane, f64, f64)> = None;
        for lane in &self.lanes {
            let (s, d) = lane.project(x, y);
            let better = match best {
                None => true,
                Some((_, _, bd)) => d.abs() < bd.abs() - 1e-9,
            };
            if better {
                best = Some((lane, s, d));
            }
        }
        best
    }

    /// True when the point lies within `margin` of some lane corridor.
    pub fn in_corridor(&self, x: f64, y: f64, margin: f64) -> bool {
        self.lanes.iter().any(|lane| {
            let (s, d) = lane.project(x, y);
            let inside_span = s > 0.0 && s < lane.length();
            inside_span && d.abs() <= 0.5 * lane.width + margin
        })
    }
}

/// Frenet projection onto a single polyline (used for ad-hoc paths).
pub fn project_to_frenet(pose: &Pose2D, lane: &Lane) -> (f64, f64) {
    lane.project(pose.x, pose.y)
}
