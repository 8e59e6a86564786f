//! Fixed-step closed loop.
//!
//! Every step runs, in this order: collision check on the current states,
//! perception, localization, V2X publish and collect, the platoon state
//! machines, control, logging and finally dynamics. Agents only ever see
//! messages published at the start of the step, so nobody observes another
//! agent's same-step update.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::Matrix4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ManeuverKind, ScenarioConfig, SpawnSpec};
use crate::control::{gap_law, pure_pursuit, GapGains, PidController, PidGains};
use crate::datalog::{encode_line, AgentFrame, EstimateRecord, FrameRecord, LogHeader, SCHEMA_VERSION};
use crate::dynamics::{step_bicycle, ControlCommand, VehicleLimits};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvaluationConfig, RunReport};
use crate::geometry::{transform_from_frame, OrientedBox, Pose2D};
use crate::localization::{kf_predict, kf_update, GaussianEstimate, GpsMeasurement, ImuMeasurement};
use crate::map::{Lane, LaneGraph, LaneId, LaneKind};
use crate::perception::{detect, fuse_early, fuse_late, simulate_lidar, Detection, FusionMode, HitRecord, DEFAULT_NMS_IOU};
use crate::planning::{plan_route, CubicSpline2D, LanePosition};
use crate::platoon::{FsmInput, FsmState, Maneuver, OwnView, PlatoonFsm, PlatoonRole};
use crate::rng::{stream_rng, Stream};
use crate::v2x::{Beacon, Message, Payload, V2xBus};
use crate::world::{AgentId, Role, Scene, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    TaskComplete,
    Timeout,
    Collision,
}

impl TerminatedBy {
    pub fn label(self) -> &'static str {
        match self {
            TerminatedBy::TaskComplete => "task_complete",
            TerminatedBy::Timeout => "timeout",
            TerminatedBy::Collision => "collision",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub terminated_by: TerminatedBy,
    /// Complete JSONL log, header first.
    pub log: String,
    /// Frames decoded back from `log`, so they equal a replay exactly.
    pub frames: Vec<FrameRecord>,
    pub report: RunReport,
    pub collisions: Vec<(AgentId, AgentId)>,
}

/// Objects closer than this to a known connected vehicle are taken to be it.
const SAME_OBJECT_RADIUS: f64 = 3.0;
const LANE_CHANGE_TAIL: f64 = 20.0;
const BACKGROUND_TIME_GAP: f64 = 1.0;
/// Planned deceleration when stopping at the end of a lane.
const END_DECEL: f64 = 1.5;
/// Bounds on the candidate's acceleration while it lines up with its slot.
const ALIGN_ACCEL: [f64; 2] = [-3.0, 2.0];
/// Better damped than platoon following: the initial slot error can be large.
const ALIGN_GAINS: GapGains = GapGains { k_s: 0.45, k_v: 0.9 };

#[derive(Debug, Clone)]
struct TrackedBeacon {
    sent_at: u64,
    beacon: Beacon,
}

#[derive(Debug, Clone)]
struct Agent {
    id: AgentId,
    spawn: SpawnSpec,
    truth: VehicleState,
    desired_speed: f64,
    estimate: Option<GaussianEstimate>,
    fsm: Option<PlatoonFsm>,
    route: Vec<LaneId>,
    route_idx: usize,
    lane_change: Option<Lane>,
    /// Acceleration and yaw rate applied over the previous step.
    applied: (f64, f64),
    pid: PidController,
    outbox: Vec<Payload>,
    beacons: BTreeMap<AgentId, TrackedBeacon>,
    hits: HitRecord,
    detections: Vec<Detection>,
    det_rng: ChaCha8Rng,
    gps_rng: ChaCha8Rng,
    imu_rng: ChaCha8Rng,
    radio_rng: ChaCha8Rng,
}

impl Agent {
    fn connected(&self) -> bool {
        self.truth.role.is_connected()
    }

    /// Own state as the agent believes it to be.
    fn believed(&self) -> VehicleState {
        let mut s = self.truth.clone();
        if let Some(e) = &self.estimate {
            s.pose = Pose2D::new(e.x(), e.y(), e.yaw());
            s.speed = e.v().max(0.0);
        }
        s
    }
}

/// Another vehicle as known to an agent, in world coordinates.
#[derive(Debug, Clone, Copy)]
struct Known {
    x: f64,
    y: f64,
    speed: Option<f64>,
    length: f64,
    width: f64,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    map: Arc<LaneGraph>,
    main: Lane,
    acceleration_start_s: f64,
    merge_end_s: f64,
    agents: Vec<Agent>,
    bus: V2xBus,
    limits: VehicleLimits,
    gains: GapGains,
    eval: EvaluationConfig,
    step: u64,
    tasks_done: BTreeSet<usize>,
    log: String,
    frames: Vec<FrameRecord>,
    collisions: Vec<(AgentId, AgentId)>,
    finished: Option<TerminatedBy>,
}

fn offset_point(lane: &Lane, s: f64, d: f64) -> [f64; 2] {
    let p = lane.pose_at(s);
    [p.x - d * p.yaw.sin(), p.y + d * p.yaw.cos()]
}

/// Whether `next` continues where `lane` ends.
fn contiguous(lane: &Lane, next: &Lane) -> bool {
    let e = lane.end();
    next.project(e[0], e[1]).1.abs() < 0.5
}

fn lookahead(lane: &Lane, next: Option<&Lane>, s: f64, distance: f64) -> [f64; 2] {
    let target = s + distance;
    if target <= lane.length() {
        let p = lane.pose_at(target);
        return [p.x, p.y];
    }
    if let Some(next) = next {
        let e = lane.end();
        let (entry, _) = next.project(e[0], e[1]);
        let p = next.pose_at((entry + target - lane.length()).min(next.length()));
        return [p.x, p.y];
    }
    let end = lane.pose_at(lane.length());
    let extra = target - lane.length();
    [end.x + extra * end.yaw.cos(), end.y + extra * end.yaw.sin()]
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig, map: LaneGraph) -> Result<Self> {
        cfg.validate()?;
        cfg.validate_against(&map)?;
        let main = map
            .first_of_kind(LaneKind::Mainline)
            .cloned()
            .ok_or_else(|| Error::validation("map_file", "map has no mainline lane"))?;
        let (acceleration_start_s, accel_end_s) = match map.first_of_kind(LaneKind::AccelerationLane) {
            Some(acc) => {
                let st = acc.start();
                let en = acc.end();
                (main.project(st[0], st[1]).0, main.project(en[0], en[1]).0)
            }
            None => (main.length(), main.length()),
        };
        let merge_end_s = map.merge_end_s.unwrap_or(accel_end_s);

        let has_platoon = cfg.spawns.iter().any(|s| s.role == Role::PlatoonLeader);
        let mut order: Vec<(f64, AgentId)> = Vec::new();
        let mut agents = Vec::with_capacity(cfg.spawns.len());
        for (i, sp) in cfg.spawns.iter().enumerate() {
            let id = AgentId(i as u32);
            let lane = map.lane(&sp.lane).expect("spawn lanes validated");
            let base = lane.pose_at(sp.s);
            let [x, y] = offset_point(lane, sp.s, sp.d);
            let dims = sp.dimensions;
            let truth = VehicleState::new(id, sp.role, Pose2D::new(x, y, base.yaw), sp.speed).with_dimensions(
                dims.length,
                dims.width,
                dims.wheelbase,
            );
            if sp.role.is_platoon() {
                order.push((main.project(x, y).0, id));
            }
            let goal = cfg
                .tasks
                .iter()
                .find(|t| t.agent as usize == i)
                .map(|t| LanePosition::new(t.lane.clone(), t.s));
            let route = match goal {
                Some(g) => plan_route(&map, &LanePosition::new(sp.lane.clone(), sp.s), &g)?.lanes,
                None => {
                    let mut r = vec![sp.lane.clone()];
                    let mut cur = lane;
                    while let Some(next) = map
                        .successors(&cur.id)
                        .iter()
                        .filter_map(|n| map.lane(n))
                        .find(|n| contiguous(cur, n) && !r.contains(&n.id))
                    {
                        r.push(next.id.clone());
                        cur = next;
                    }
                    r
                }
            };
            let estimate = sp.role.is_connected().then(|| {
                let g = cfg.localization.sigma_gps;
                let cov = Matrix4::from_diagonal(&nalgebra::Vector4::new(g * g, g * g, 1e-4, 1e-2));
                GaussianEstimate::new(x, y, base.yaw, sp.speed, cov)
            });
            let fsm_role = match sp.role {
                Role::PlatoonLeader => Some(PlatoonRole::Leader),
                Role::PlatoonMember => Some(PlatoonRole::Member),
                Role::MergingCav if has_platoon => Some(PlatoonRole::Candidate),
                _ => None,
            };
            let fsm = fsm_role.map(|r| PlatoonFsm::new(id, r, cfg.desired_time_gap, cfg.merge_policy));
            agents.push(Agent {
                id,
                spawn: sp.clone(),
                truth,
                desired_speed: sp.desired_speed.unwrap_or(sp.speed),
                estimate,
                fsm,
                route,
                route_idx: 0,
                lane_change: None,
                applied: (0.0, 0.0),
                pid: PidController::new(PidGains::default()),
                outbox: Vec::new(),
                beacons: BTreeMap::new(),
                hits: HitRecord::default(),
                detections: Vec::new(),
                det_rng: stream_rng(cfg.seed, id, Stream::Detector),
                gps_rng: stream_rng(cfg.seed, id, Stream::Gps),
                imu_rng: stream_rng(cfg.seed, id, Stream::Imu),
                radio_rng: stream_rng(cfg.seed, id, Stream::Radio),
            });
        }
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let order: Vec<AgentId> = order.into_iter().map(|(_, id)| id).collect();
        for a in &mut agents {
            if let Some(f) = a.fsm.take() {
                a.fsm = Some(if f.role == PlatoonRole::Candidate { f } else { f.with_order(order.clone()) });
            }
        }

        let header = LogHeader {
            schema: SCHEMA_VERSION,
            config: serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?,
            map: Some(map.to_json_value()),
        };
        let mut log = encode_line(&header)?;
        log.push('\n');
        let eval = cfg.evaluation.clone();
        Ok(Self {
            bus: V2xBus::new(cfg.comm),
            cfg,
            map: Arc::new(map),
            main,
            acceleration_start_s,
            merge_end_s,
            agents,
            limits: VehicleLimits::default(),
            gains: GapGains::default(),
            eval,
            step: 0,
            tasks_done: BTreeSet::new(),
            log,
            frames: Vec::new(),
            collisions: Vec::new(),
            finished: None,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn states(&self) -> Vec<VehicleState> {
        self.agents.iter().map(|a| a.truth.clone()).collect()
    }

    pub fn finished(&self) -> Option<TerminatedBy> {
        self.finished
    }

    fn scene(&self) -> Result<Scene> {
        Scene::new(self.time(), self.states(), self.agents[0].id, Arc::clone(&self.map))
    }

    fn own_view(&self, a: &Agent) -> OwnView {
        let state = a.believed();
        let (s, d) = self.main.project(state.pose.x, state.pose.y);
        let on_acceleration_lane = self
            .map
            .locate(state.pose.x, state.pose.y)
            .is_some_and(|(l, ls, _)| l.kind == LaneKind::AccelerationLane && ls < l.length());
        OwnView {
            state,
            s,
            d,
            on_acceleration_lane,
            acceleration_start_s: self.acceleration_start_s,
            merge_end_s: self.merge_end_s,
        }
    }

    fn lane_of(&self, x: f64, y: f64) -> Option<(LaneId, f64, f64)> {
        self.map.locate(x, y).map(|(l, s, d)| (l.id.clone(), s, d))
    }

    /// Advances one step; returns the termination reason once finished.
    pub fn step(&mut self) -> Result<Option<TerminatedBy>> {
        if let Some(t) = self.finished {
            return Ok(Some(t));
        }
        let k = self.step;
        let t = self.time();
        let dt = self.cfg.dt;
        let scene = self.scene()?;

        let collisions = scene.collisions();
        if !collisions.is_empty() {
            let commands = vec![ControlCommand::default(); self.agents.len()];
            self.record(k, t, &commands, Vec::new())?;
            self.collisions = collisions;
            self.finished = Some(TerminatedBy::Collision);
            return Ok(self.finished);
        }

        // perception
        for a in self.agents.iter_mut().filter(|a| a.truth.role.is_connected()) {
            a.hits = simulate_lidar(&scene, a.id, &self.cfg.sensors)?;
            a.detections = detect(&scene, a.id, &a.hits, &self.cfg.sensors, &mut a.det_rng)?;
        }

        // localization
        let noise = self.cfg.localization;
        for a in self.agents.iter_mut() {
            let Some(est) = a.estimate.as_ref() else { continue };
            let mut est = est.clone();
            if k > 0 {
                let na: f64 = a.imu_rng.sample(StandardNormal);
                let ny: f64 = a.imu_rng.sample(StandardNormal);
                let imu = ImuMeasurement {
                    accel: a.applied.0 + noise.sigma_accel * na,
                    yaw_rate: a.applied.1 + noise.sigma_yaw_rate * ny,
                };
                est = kf_predict(&est, &imu, dt, &noise);
            }
            let gx: f64 = a.gps_rng.sample(StandardNormal);
            let gy: f64 = a.gps_rng.sample(StandardNormal);
            let gps = GpsMeasurement {
                x: a.truth.pose.x + noise.sigma_gps * gx,
                y: a.truth.pose.y + noise.sigma_gps * gy,
                sigma: noise.sigma_gps,
            };
            a.estimate = Some(kf_update(&est, &gps)?);
        }

        // publish
        let mut published = Vec::new();
        for i in 0..self.agents.len() {
            if !self.agents[i].connected() {
                continue;
            }
            let own = self.own_view(&self.agents[i]);
            let a = &self.agents[i];
            let lane = self.lane_of(own.state.pose.x, own.state.pose.y).map(|l| l.0);
            let beacon = match &a.fsm {
                Some(f) => f.beacon(&own, lane),
                None => Beacon {
                    role: a.truth.role,
                    pose: own.state.pose,
                    speed: own.state.speed,
                    accel: own.state.accel,
                    length: own.state.length,
                    lane,
                    s: own.s,
                    fsm: None,
                    platoon: Vec::new(),
                    order_version: 0,
                },
            };
            let pose = a.truth.pose;
            let mut payloads = vec![Payload::StateBeacon(beacon)];
            payloads.extend(a.outbox.iter().cloned());
            match self.cfg.fusion {
                FusionMode::NoFusion => {}
                FusionMode::Late => payloads.push(Payload::SharedDetections {
                    detections: a.detections.clone(),
                }),
                FusionMode::Early => payloads.push(Payload::SharedHits { hits: a.hits.clone() }),
            }
            for p in payloads {
                let msg = Message::new(a.id, k, pose, p);
                if !matches!(msg.payload, Payload::SharedDetections { .. } | Payload::SharedHits { .. }) {
                    published.push(msg.clone());
                }
                self.bus.publish(msg);
            }
            self.agents[i].outbox.clear();
        }

        // collect
        let mut inboxes: Vec<Vec<Message>> = Vec::with_capacity(self.agents.len());
        for a in self.agents.iter_mut() {
            if !a.truth.role.is_connected() {
                inboxes.push(Vec::new());
                continue;
            }
            let inbox = self.bus.collect(a.id, &a.truth.pose, k, &mut a.radio_rng);
            for m in &inbox {
                if let Payload::StateBeacon(b) = &m.payload {
                    let newer = a.beacons.get(&m.sender).is_none_or(|tb| tb.sent_at <= m.sent_at);
                    if newer {
                        a.beacons.insert(m.sender, TrackedBeacon { sent_at: m.sent_at, beacon: b.clone() });
                    }
                }
            }
            inboxes.push(inbox);
        }
        self.bus.prune(k + 1);

        // application layer
        let mut maneuvers: Vec<Option<Maneuver>> = vec![None; self.agents.len()];
        for i in 0..self.agents.len() {
            if self.agents[i].fsm.is_none() {
                continue;
            }
            let own = self.own_view(&self.agents[i]);
            let is_leader = self.agents[i].fsm.as_ref().is_some_and(|f| f.role == PlatoonRole::Leader);
            let background = if is_leader {
                self.leader_background(i, &scene, &inboxes[i])?
            } else {
                Vec::new()
            };
            let clear = self.clear_to_merge(&self.agents[i], &own);
            let input = FsmInput {
                step: k,
                time: t,
                inbox: &inboxes[i],
                own,
                clear_to_merge: clear,
                background: &background,
            };
            let fsm = self.agents[i].fsm.as_mut().expect("checked above");
            // A protocol error leaves the machine in Abort; the run goes on.
            let out = match fsm.step(&input) {
                Ok(out) => out,
                Err(Error::Protocol(_)) => crate::platoon::FsmOutput {
                    state: fsm.state,
                    maneuver: Maneuver::Hold,
                    outbox: Vec::new(),
                },
                Err(e) => return Err(e),
            };
            self.agents[i].outbox = out.outbox;
            maneuvers[i] = Some(out.maneuver);
        }

        // planning and control
        let mut commands = Vec::with_capacity(self.agents.len());
        for i in 0..self.agents.len() {
            let cmd = if self.agents[i].connected() {
                self.connected_command(i, maneuvers[i].clone(), k)?
            } else {
                self.background_command(i)
            };
            commands.push(self.limits.saturate(cmd));
        }

        self.record(k, t, &commands, published)?;

        for (a, cmd) in self.agents.iter_mut().zip(&commands) {
            a.applied = (cmd.accel_cmd, a.truth.speed / a.truth.wheelbase * cmd.steer_cmd.tan());
            a.truth = step_bicycle(&a.truth, *cmd, dt, &self.limits)?;
        }
        self.step += 1;

        if self.tasks_complete() {
            self.finished = Some(TerminatedBy::TaskComplete);
        } else if self.step as f64 * dt >= self.cfg.max_time - 1e-9 {
            self.finished = Some(TerminatedBy::Timeout);
        }
        Ok(self.finished)
    }

    /// Connected vehicles known to agent `a` through beacons, extrapolated to now.
    fn known_from_beacons(&self, a: &Agent, step: u64) -> Vec<Known> {
        a.beacons
            .values()
            .map(|tb| {
                let age = step.saturating_sub(tb.sent_at) as f64 * self.cfg.dt;
                let b = &tb.beacon;
                Known {
                    x: b.pose.x + b.speed * age * b.pose.yaw.cos(),
                    y: b.pose.y + b.speed * age * b.pose.yaw.sin(),
                    speed: Some(b.speed),
                    length: b.length,
                    width: 2.0,
                }
            })
            .collect()
    }

    /// Own detections in world coordinates, minus those explained by beacons.
    fn known_from_detections(&self, a: &Agent, beacons: &[Known]) -> Vec<Known> {
        let me = a.believed();
        a.detections
            .iter()
            .map(|d| transform_from_frame(&d.bbox, &me.pose))
            .filter(|b| {
                beacons
                    .iter()
                    .all(|k| (k.x - b.cx).hypot(k.y - b.cy) > SAME_OBJECT_RADIUS)
            })
            .map(|b| Known {
                x: b.cx,
                y: b.cy,
                speed: None,
                length: b.length,
                width: b.width,
            })
            .collect()
    }

    fn known(&self, a: &Agent) -> Vec<Known> {
        let mut k = self.known_from_beacons(a, self.step);
        let d = self.known_from_detections(a, &k);
        k.extend(d);
        k
    }

    /// Non-connected vehicles the leader knows of, from its fused perception.
    fn leader_background(&mut self, i: usize, scene: &Scene, inbox: &[Message]) -> Result<Vec<VehicleState>> {
        let me = self.agents[i].believed();
        let boxes: Vec<OrientedBox> = match self.cfg.fusion {
            FusionMode::NoFusion => self.agents[i].detections.iter().map(|d| d.bbox).collect(),
            FusionMode::Late => {
                let mut all = self.agents[i].detections.clone();
                let mut poses = BTreeMap::new();
                poses.insert(self.agents[i].id, me.pose);
                for m in inbox {
                    if let Payload::SharedDetections { detections } = &m.payload {
                        if let Some(tb) = self.agents[i].beacons.get(&m.sender) {
                            poses.insert(m.sender, tb.beacon.pose);
                            all.extend(detections.iter().filter(|d| d.source == m.sender).cloned());
                        }
                    }
                }
                fuse_late(&all, &poses, &me.pose, DEFAULT_NMS_IOU)?.into_iter().map(|d| d.bbox).collect()
            }
            FusionMode::Early => {
                let mut records = vec![self.agents[i].hits.clone()];
                for m in inbox {
                    if let Payload::SharedHits { hits } = &m.payload {
                        records.push(hits.clone());
                    }
                }
                let a = &mut self.agents[i];
                fuse_early(scene, a.id, &records, &self.cfg.sensors, &mut a.det_rng)?
                    .into_iter()
                    .map(|d| d.bbox)
                    .collect()
            }
        };
        let cavs = self.known_from_beacons(&self.agents[i], self.step);
        Ok(boxes
            .iter()
            .map(|b| transform_from_frame(b, &me.pose))
            .filter(|b| (b.cx - me.pose.x).hypot(b.cy - me.pose.y) > SAME_OBJECT_RADIUS)
            .filter(|b| cavs.iter().all(|k| (k.x - b.cx).hypot(k.y - b.cy) > SAME_OBJECT_RADIUS))
            .enumerate()
            .map(|(n, b)| {
                VehicleState::new(AgentId(u32::MAX - n as u32), Role::Background, b.pose(), 0.0)
                    .with_dimensions(b.length, b.width, 2.8)
            })
            .collect())
    }

    /// No object occupies the stretch of mainline next to the candidate.
    fn clear_to_merge(&self, a: &Agent, own: &OwnView) -> bool {
        if a.fsm.as_ref().is_none_or(|f| f.role != PlatoonRole::Candidate) {
            return false;
        }
        let v = own.state.speed;
        let half = 0.5 * self.main.width + 0.75;
        self.known(a).iter().all(|k| {
            let (s, d) = self.main.project(k.x, k.y);
            if d.abs() >= half {
                return true;
            }
            let rel = s - own.s;
            let gap = rel.abs() - 0.5 * (k.length + own.state.length);
            if rel >= 0.0 {
                gap >= 3.0
            } else {
                gap >= (0.3 * v).max(4.0)
            }
        })
    }

    /// Closest object ahead within the agent's own corridor.
    fn nearest_ahead(me: &VehicleState, objects: &[Known]) -> Option<(f64, f64)> {
        objects
            .iter()
            .filter_map(|k| {
                let (lx, ly) = me.pose.to_local(k.x, k.y);
                let corridor = 0.5 * (me.width + k.width) + 0.3;
                (lx > 0.0 && lx < 120.0 && ly.abs() < corridor).then(|| {
                    let gap = lx - 0.5 * (me.length + k.length);
                    (gap, k.speed.unwrap_or(me.speed))
                })
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Advances the route index and returns the lane and arc length tracked.
    fn track(&mut self, i: usize, x: f64, y: f64) -> (Lane, Option<Lane>, f64) {
        if let Some(path) = &self.agents[i].lane_change {
            let (s, _) = path.project(x, y);
            if s < path.length() - LANE_CHANGE_TAIL {
                return (path.clone(), None, s);
            }
            let a = &mut self.agents[i];
            a.lane_change = None;
            a.route = vec![self.main.id.clone()];
            a.route_idx = 0;
        }
        let map = Arc::clone(&self.map);
        loop {
            let a = &self.agents[i];
            let lane = map.lane(&a.route[a.route_idx]).expect("route lanes exist");
            let next = a
                .route
                .get(a.route_idx + 1)
                .and_then(|n| map.lane(n))
                .filter(|n| contiguous(lane, n));
            let (s, _) = lane.project(x, y);
            if next.is_some() && s >= lane.length() - 1e-6 {
                self.agents[i].route_idx += 1;
            } else {
                return (lane.clone(), next.cloned(), s);
            }
        }
    }

    fn steer_along(&mut self, i: usize, me: &VehicleState) -> f64 {
        let (lane, next, s) = self.track(i, me.pose.x, me.pose.y);
        let ld = (0.7 * me.speed).max(6.0);
        let target = lookahead(&lane, next.as_ref(), s, ld);
        pure_pursuit(me, target, self.limits.steer_max)
    }

    fn start_lane_change(&mut self, i: usize, me: &VehicleState) -> Result<()> {
        let (s0, d0) = self.main.project(me.pose.x, me.pose.y);
        let span = (2.5 * me.speed).max(30.0);
        let wps = [
            offset_point(&self.main, s0, d0),
            offset_point(&self.main, s0 + 0.5 * span, 0.5 * d0),
            offset_point(&self.main, s0 + span, 0.0),
            offset_point(&self.main, s0 + span + LANE_CHANGE_TAIL, 0.0),
        ];
        let spline = CubicSpline2D::new(&wps)?;
        let n = spline.param_length().ceil().max(2.0) as usize;
        let pts: Vec<[f64; 2]> = (0..=n)
            .map(|j| spline.point(spline.param_length() * j as f64 / n as f64))
            .collect();
        self.agents[i].lane_change = Some(Lane::new("lane_change", LaneKind::Mainline, self.main.width, pts)?);
        Ok(())
    }

    fn connected_command(&mut self, i: usize, maneuver: Option<Maneuver>, step: u64) -> Result<ControlCommand> {
        let me = self.agents[i].believed();
        let v = me.speed;
        let dt = self.cfg.dt;
        let tau = self.cfg.desired_time_gap;
        let known = self.known(&self.agents[i]);
        let follow = |leader: AgentId, time_gap: f64, gains: &GapGains, sim: &Self| -> Option<f64> {
            let tb = sim.agents[i].beacons.get(&leader)?;
            let age = step.saturating_sub(tb.sent_at) as f64 * dt;
            let b = &tb.beacon;
            let (own_s, _) = sim.main.project(me.pose.x, me.pose.y);
            let gap = b.s + b.speed * age - own_s - 0.5 * (b.length + me.length);
            Some(gap_law(gap, v, b.speed, time_gap, gains))
        };
        let cruise = |pid: &mut PidController, target: f64| pid.update(target - v, dt);

        let desired = self.agents[i].desired_speed;
        let maneuver = maneuver.unwrap_or(Maneuver::Cruise);
        let mut accel = match &maneuver {
            Maneuver::Cruise => cruise(&mut self.agents[i].pid, desired),
            Maneuver::FollowGap { leader, time_gap } | Maneuver::LaneChange { behind: leader, time_gap } => {
                let aligning = self.agents[i]
                    .fsm
                    .as_ref()
                    .is_some_and(|f| matches!(f.state, FsmState::MovingToPosition | FsmState::Joining));
                let gains = if aligning { ALIGN_GAINS } else { self.gains };
                match follow(*leader, *time_gap, &gains, self) {
                    Some(a) if aligning => a.clamp(ALIGN_ACCEL[0], ALIGN_ACCEL[1]),
                    Some(a) => a,
                    None => cruise(&mut self.agents[i].pid, desired),
                }
            }
            Maneuver::Hold => {
                if v > 0.0 {
                    -2.0
                } else {
                    0.0
                }
            }
        };
        if !matches!(maneuver, Maneuver::Cruise) {
            self.agents[i].pid.reset();
        }
        if let Some((gap, v_lead)) = Self::nearest_ahead(&me, &known) {
            accel = accel.min(gap_law(gap, v, v_lead, tau, &self.gains));
        }

        if matches!(maneuver, Maneuver::LaneChange { .. }) && self.agents[i].lane_change.is_none() {
            let (_, d) = self.main.project(me.pose.x, me.pose.y);
            if d.abs() > 0.5 * self.main.width {
                self.start_lane_change(i, &me)?;
            }
        }
        let steer = self.steer_along(i, &me);
        accel = accel.min(self.route_end_cap(i, &me));

        // Stay behind the end of an acceleration lane unless already changing lanes.
        if self.agents[i].lane_change.is_none() {
            let a = &self.agents[i];
            let on_acc = self
                .map
                .lane(&a.route[a.route_idx])
                .is_some_and(|l| l.kind == LaneKind::AccelerationLane);
            let (s, _) = self.main.project(me.pose.x, me.pose.y);
            if on_acc {
                let rem = (self.merge_end_s - s - 0.5 * me.length - 2.0).max(0.0);
                let allowed = (2.0 * END_DECEL * rem).sqrt();
                accel = accel.min(0.8 * (allowed - v));
            }
        }
        Ok(ControlCommand::new(accel, steer))
    }

    fn background_command(&mut self, i: usize) -> ControlCommand {
        let me = self.agents[i].truth.clone();
        let v = me.speed;
        let others: Vec<Known> = self
            .agents
            .iter()
            .filter(|o| o.id != me.id)
            .map(|o| Known {
                x: o.truth.pose.x,
                y: o.truth.pose.y,
                speed: Some(o.truth.speed),
                length: o.truth.length,
                width: o.truth.width,
            })
            .collect();
        let desired = self.agents[i].desired_speed;
        let tau = self.agents[i].spawn.time_gap.unwrap_or(BACKGROUND_TIME_GAP);
        let mut accel = self.agents[i].pid.update(desired - v, self.cfg.dt);
        if let Some((gap, v_lead)) = Self::nearest_ahead(&me, &others) {
            accel = accel.min(gap_law(gap, v, v_lead, tau, &self.gains));
        }
        let steer = self.steer_along(i, &me);
        accel = accel.min(self.route_end_cap(i, &me));
        ControlCommand::new(accel, steer)
    }

    /// Braking that brings the vehicle to rest where its route runs out.
    fn route_end_cap(&mut self, i: usize, me: &VehicleState) -> f64 {
        let (lane, next, s) = self.track(i, me.pose.x, me.pose.y);
        let a = &self.agents[i];
        if next.is_some() || a.lane_change.is_some() || a.route_idx + 1 < a.route.len() {
            return f64::INFINITY;
        }
        let rem = (lane.length() - s - 0.5 * me.length).max(0.0);
        0.8 * ((2.0 * END_DECEL * rem).sqrt() - me.speed)
    }

    fn record(&mut self, k: u64, t: f64, commands: &[ControlCommand], messages: Vec<Message>) -> Result<()> {
        let mut frame = FrameRecord::empty(k, t);
        for (a, cmd) in self.agents.iter().zip(commands) {
            let located = self.lane_of(a.truth.pose.x, a.truth.pose.y);
            frame.agents.insert(
                a.id,
                AgentFrame {
                    state: a.truth.clone(),
                    estimate: a.estimate.as_ref().map(EstimateRecord::from),
                    fsm: a.fsm.as_ref().map(|f| f.state),
                    command: *cmd,
                    lane: located.as_ref().map(|l| l.0.clone()),
                    s: located.as_ref().map_or(0.0, |l| l.1),
                    d: located.as_ref().map_or(0.0, |l| l.2),
                    detections: a.detections.clone(),
                    hits: a.hits.clone(),
                },
            );
            if a.fsm.as_ref().is_some_and(|f| f.role == PlatoonRole::Leader) {
                frame.platoon = a.fsm.as_ref().map(|f| f.order.clone()).unwrap_or_default();
            }
        }
        frame.messages = messages;
        let line = encode_line(&frame)?;
        let decoded: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: self.frames.len() + 2,
            message: e.to_string(),
        })?;
        self.log.push_str(&line);
        self.log.push('\n');
        self.frames.push(decoded);
        Ok(())
    }

    fn tasks_complete(&mut self) -> bool {
        if self.cfg.tasks.is_empty() {
            return false;
        }
        let Some(frame) = self.frames.last() else { return false };
        for (n, task) in self.cfg.tasks.iter().enumerate() {
            if self.tasks_done.contains(&n) {
                continue;
            }
            let Some(a) = frame.agents.get(&AgentId(task.agent)) else { continue };
            let reached = a.lane.as_deref() == Some(task.lane.as_str()) && a.s >= task.s;
            let state_ok = match task.maneuver {
                ManeuverKind::Cruise => true,
                ManeuverKind::CooperativeMerge => a.fsm == Some(FsmState::Complete),
                ManeuverKind::PlatoonFollow => matches!(a.fsm, Some(FsmState::Maintaining) | Some(FsmState::Leading)),
            };
            if reached && state_ok {
                self.tasks_done.insert(n);
            }
        }
        self.tasks_done.len() == self.cfg.tasks.len()
    }

    /// Runs to termination and evaluates the run.
    pub fn run(mut self) -> Result<RunOutcome> {
        while self.step()?.is_none() {}
        let report = evaluate_run(&self.frames, &self.eval);
        Ok(RunOutcome {
            terminated_by: self.finished.expect("loop ends on termination"),
            log: self.log,
            frames: self.frames,
            report,
            collisions: self.collisions,
        })
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, map: &LaneGraph) -> Result<RunOutcome> {
    Simulation::new(cfg.clone(), map.clone())?.run()
}
