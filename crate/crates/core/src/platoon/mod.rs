//! Application layer: platoon finite state machine, merge-position policies
//! and leader-side gap opening.

pub mod fuzzy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::v2x::{Beacon, Message, Payload};
use crate::world::{AgentId, Role, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlatoonRole {
    Leader,
    Member,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FsmState {
    Maintaining,
    Leading,
    Searching,
    JoinRequested,
    MovingToPosition,
    OpeningGap,
    Joining,
    Complete,
    Abort,
}

impl FsmState {
    /// Position in the candidate's forward progression, if on that path.
    pub fn candidate_rank(self) -> Option<u8> {
        match self {
            FsmState::Searching => Some(0),
            FsmState::JoinRequested => Some(1),
            FsmState::MovingToPosition => Some(2),
            FsmState::Joining => Some(3),
            FsmState::Complete => Some(4),
            _ => None,
        }
    }

    pub fn allowed_for(self, role: PlatoonRole) -> bool {
        match role {
            PlatoonRole::Leader => self == FsmState::Leading,
            PlatoonRole::Member => matches!(self, FsmState::Maintaining | FsmState::OpeningGap),
            PlatoonRole::Candidate => self.candidate_rank().is_some() || self == FsmState::Abort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    #[default]
    Heuristic,
    Gfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub frontal_vehicle: AgentId,
    /// Member directly behind the frontal vehicle; `None` for the tail slot.
    pub gap_opener: Option<AgentId>,
    /// Mainline arc length where the candidate's center should settle.
    pub target_s: f64,
}

/// A platoon member as seen by the planner: its state and mainline `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberView {
    pub state: VehicleState,
    pub s: f64,
}

fn slot_target_s(frontal: &MemberView, candidate: &VehicleState, time_gap: f64) -> f64 {
    frontal.s - 0.5 * frontal.state.length - frontal.state.speed * time_gap - 0.5 * candidate.length
}

/// World position where the candidate's center would sit behind `frontal`.
fn slot_center(frontal: &MemberView, candidate: &VehicleState, time_gap: f64) -> [f64; 2] {
    let back = 0.5 * frontal.state.length + frontal.state.speed * time_gap + 0.5 * candidate.length;
    let (s, c) = frontal.state.pose.yaw.sin_cos();
    [frontal.state.pose.x - back * c, frontal.state.pose.y - back * s]
}

fn plan_for(platoon: &[MemberView], i: usize, candidate: &VehicleState, time_gap: f64) -> MergePlan {
    MergePlan {
        frontal_vehicle: platoon[i].state.id,
        gap_opener: platoon.get(i + 1).map(|m| m.state.id),
        target_s: slot_target_s(&platoon[i], candidate, time_gap),
    }
}

/// Nearest-member policy: the member with the smallest Euclidean distance to
/// the candidate becomes the frontal vehicle; ties go to the smaller index.
pub fn select_merge_position_heuristic(
    platoon: &[MemberView],
    candidate: &VehicleState,
    time_gap: f64,
) -> Result<MergePlan> {
    select_heuristic_among(platoon, candidate, time_gap, &[])
}

pub fn select_heuristic_among(
    platoon: &[MemberView],
    candidate: &VehicleState,
    time_gap: f64,
    excluded: &[AgentId],
) -> Result<MergePlan> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in platoon.iter().enumerate() {
        if excluded.contains(&m.state.id) {
            continue;
        }
        let d = m.state.pose.distance_to(&candidate.pose);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::domain("platoon has no eligible member"))?;
    Ok(plan_for(platoon, i, candidate, time_gap))
}

/// Crisp fuzzy inputs for the slot behind every member, in platoon order.
pub fn gfs_inputs(
    platoon: &[MemberView],
    candidate: &VehicleState,
    background: &[VehicleState],
    time_gap: f64,
) -> Vec<[f64; 3]> {
    let dists: Vec<f64> = platoon
        .iter()
        .map(|m| m.state.pose.distance_to(&candidate.pose))
        .collect();
    let max_d = dists.iter().cloned().fold(0.0, f64::max);
    platoon
        .iter()
        .zip(&dists)
        .map(|(m, &d)| {
            let dist = if max_d > 0.0 { d / max_d } else { 0.0 };
            let rel = ((m.state.speed - candidate.speed) / 5.0).clamp(-1.0, 1.0);
            let c = slot_center(m, candidate, time_gap);
            let space = background
                .iter()
                .map(|b| (b.pose.x - c[0]).hypot(b.pose.y - c[1]))
                .fold(f64::INFINITY, f64::min);
            let space = if space.is_finite() { (space / 20.0).clamp(0.0, 1.0) } else { 1.0 };
            [dist, rel, space]
        })
        .collect()
}

/// Defuzzified desirability of the slot behind every member.
pub fn gfs_scores(
    platoon: &[MemberView],
    candidate: &VehicleState,
    background: &[VehicleState],
    time_gap: f64,
) -> Vec<f64> {
    let fs = fuzzy::merge_rule_base();
    gfs_inputs(platoon, candidate, background, time_gap)
        .iter()
        .map(|x| fs.evaluate(x))
        .collect()
}

/// Fuzzy policy: scores every slot and picks the best; ties go leader-side.
pub fn select_merge_position_gfs(
    platoon: &[MemberView],
    candidate: &VehicleState,
    background: &[VehicleState],
    time_gap: f64,
) -> Result<MergePlan> {
    select_gfs_among(platoon, candidate, background, time_gap, &[])
}

pub fn select_gfs_among(
    platoon: &[MemberView],
    candidate: &VehicleState,
    background: &[VehicleState],
    time_gap: f64,
    excluded: &[AgentId],
) -> Result<MergePlan> {
    let scores = gfs_scores(platoon, candidate, background, time_gap);
    let mut best: Option<(usize, f64)> = None;
    for (i, &score) in scores.iter().enumerate() {
        if excluded.contains(&platoon[i].state.id) {
            continue;
        }
        if best.is_none_or(|(_, bs)| score > bs) {
            best = Some((i, score));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::domain("platoon has no eligible member"))?;
    Ok(plan_for(platoon, i, candidate, time_gap))
}

/// Gap commands the leader issues for `plan`: one enlarged-gap command for
/// the opener, or none for the tail slot.
pub fn plan_gap_opening(order: &[AgentId], plan: &MergePlan, default_gap: f64) -> Result<Vec<Payload>> {
    let Some(opener) = plan.gap_opener else {
        return Ok(Vec::new());
    };
    let pos = order
        .iter()
        .position(|&id| id == opener)
        .ok_or_else(|| Error::domain(format!("gap opener {opener} is not in the platoon")))?;
    if pos == 0 || order[pos - 1] != plan.frontal_vehicle {
        return Err(Error::domain("gap opener must directly follow the frontal vehicle"));
    }
    Ok(vec![Payload::GapCommand {
        target: opener,
        time_gap: 2.0 * default_gap,
    }])
}

/// Longitudinal/lateral intent handed to planning and control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Maneuver {
    Cruise,
    FollowGap { leader: AgentId, time_gap: f64 },
    LaneChange { behind: AgentId, time_gap: f64 },
    Hold,
}

/// What the agent knows about itself this step (from its own estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct OwnView {
    pub state: VehicleState,
    /// Arc length along the mainline.
    pub s: f64,
    /// Lateral offset from the mainline centerline.
    pub d: f64,
    pub on_acceleration_lane: bool,
    pub acceleration_start_s: f64,
    pub merge_end_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsmInput<'a> {
    pub step: u64,
    pub time: f64,
    pub inbox: &'a [Message],
    pub own: OwnView,
    /// Candidate only: no object occupies the target stretch of the mainline.
    pub clear_to_merge: bool,
    /// Leader only: non-connected vehicles known to the leader (world frame).
    pub background: &'a [VehicleState],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsmOutput {
    pub state: FsmState,
    pub maneuver: Maneuver,
    pub outbox: Vec<Payload>,
}

/// Tunables of the transition table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FsmParams {
    /// Candidate asks to join once within this distance of the acceleration lane.
    pub request_lead: f64,
    pub request_retry: f64,
    /// Seconds spent aligned beside an occupied slot before asking for another.
    pub replan_after: f64,
    pub abort_factor: f64,
    pub align_tolerance: f64,
    pub speed_tolerance: f64,
    pub complete_lateral: f64,
    pub complete_gap_error: f64,
    pub joining_gap_factor: f64,
}

impl Default for FsmParams {
    fn default() -> Self {
        Self {
            request_lead: 50.0,
            request_retry: 1.0,
            replan_after: 4.0,
            abort_factor: 1.5,
            align_tolerance: 0.15,
            speed_tolerance: 1.0,
            complete_lateral: 0.3,
            complete_gap_error: 0.1,
            joining_gap_factor: 1.5,
        }
    }
}

/// One agent's platoon state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatoonFsm {
    pub id: AgentId,
    pub role: PlatoonRole,
    pub state: FsmState,
    pub default_gap: f64,
    pub time_gap: f64,
    pub policy: MergePolicy,
    pub params: FsmParams,
    /// Platoon order, leader first, with a version bumped on every change.
    pub order: Vec<AgentId>,
    pub order_version: u64,
    pub beacons: BTreeMap<AgentId, Beacon>,
    // candidate bookkeeping
    pub plan: Option<MergePlan>,
    pub excluded: Vec<AgentId>,
    pub requested_at: Option<f64>,
    pub last_request: Option<f64>,
    pub deadline: Option<f64>,
    pub blocked_since: Option<f64>,
    /// A re-plan request is outstanding.
    pub awaiting_response: bool,
    // leader bookkeeping
    pub active: Option<(AgentId, MergePlan)>,
}

impl PlatoonFsm {
    pub fn new(id: AgentId, role: PlatoonRole, default_gap: f64, policy: MergePolicy) -> Self {
        let state = match role {
            PlatoonRole::Leader => FsmState::Leading,
            PlatoonRole::Member => FsmState::Maintaining,
            PlatoonRole::Candidate => FsmState::Searching,
        };
        Self {
            id,
            role,
            state,
            default_gap,
            time_gap: default_gap,
            policy,
            params: FsmParams::default(),
            order: Vec::new(),
            order_version: 0,
            beacons: BTreeMap::new(),
            plan: None,
            excluded: Vec::new(),
            requested_at: None,
            last_request: None,
            deadline: None,
            blocked_since: None,
            awaiting_response: false,
            active: None,
        }
    }

    pub fn with_order(mut self, order: Vec<AgentId>) -> Self {
        self.order = order;
        self.order_version = 1;
        self
    }

    /// Platoon member directly ahead of this agent, if any.
    pub fn predecessor(&self) -> Option<AgentId> {
        let pos = self.order.iter().position(|&id| id == self.id)?;
        pos.checked_sub(1).map(|p| self.order[p])
    }

    /// Beacon contents describing this agent for the current step.
    pub fn beacon(&self, own: &OwnView, lane: Option<String>) -> Beacon {
        Beacon {
            role: match self.role {
                PlatoonRole::Leader => Role::PlatoonLeader,
                PlatoonRole::Member => Role::PlatoonMember,
                PlatoonRole::Candidate => Role::MergingCav,
            },
            pose: own.state.pose,
            speed: own.state.speed,
            accel: own.state.accel,
            length: own.state.length,
            lane,
            s: own.s,
            fsm: Some(self.state),
            platoon: self.order.clone(),
            order_version: self.order_version,
        }
    }

    fn absorb_beacons(&mut self, inbox: &[Message]) {
        for msg in inbox {
            if let Payload::StateBeacon(b) = &msg.payload {
                if b.order_version > self.order_version && !b.platoon.is_empty() && self.role != PlatoonRole::Leader {
                    self.order = b.platoon.clone();
                    self.order_version = b.order_version;
                }
                self.beacons.insert(msg.sender, b.clone());
            }
        }
    }

    /// Advances the machine by one step.
    ///
    /// On an inconsistent inbox the machine moves to `Abort` and the protocol
    /// error is returned; the caller keeps stepping the agent.
    pub fn step(&mut self, input: &FsmInput<'_>) -> Result<FsmOutput> {
        self.absorb_beacons(input.inbox);
        match self.role {
            PlatoonRole::Leader => Ok(self.step_leader(input)),
            PlatoonRole::Member => Ok(self.step_member(input)),
            PlatoonRole::Candidate => self.step_candidate(input),
        }
    }

    fn member_view(&self, id: AgentId, own: &OwnView) -> Option<MemberView> {
        if id == self.id {
            return Some(MemberView { state: own.state.clone(), s: own.s });
        }
        let b = self.beacons.get(&id)?;
        let state = VehicleState::new(id, b.role, b.pose, b.speed).with_dimensions(b.length, own.state.width, own.state.wheelbase);
        Some(MemberView { state, s: b.s })
    }

    fn step_leader(&mut self, input: &FsmInput<'_>) -> FsmOutput {
        let mut outbox = Vec::new();
        for msg in input.inbox {
            let Payload::JoinRequest { excluded } = &msg.payload else {
                continue;
            };
            let candidate = msg.sender;
            if self.order.contains(&candidate) {
                continue;
            }
            if let Some((busy, _)) = &self.active {
                if *busy != candidate {
                    continue;
                }
            }
            let Some(cand) = self.beacons.get(&candidate).cloned() else {
                continue;
            };
            let cand_state = VehicleState::new(candidate, Role::MergingCav, cand.pose, cand.speed).with_dimensions(
                cand.length,
                input.own.state.width,
                input.own.state.wheelbase,
            );
            let members: Vec<MemberView> = self
                .order
                .iter()
                .filter_map(|&id| self.member_view(id, &input.own))
                .collect();
            if members.len() != self.order.len() {
                continue;
            }
            let mut excluded = excluded.clone();
            if excluded.len() >= members.len() {
                excluded.clear();
            }
            let plan = match self.policy {
                MergePolicy::Heuristic => select_heuristic_among(&members, &cand_state, self.default_gap, &excluded),
                MergePolicy::Gfs => select_gfs_among(&members, &cand_state, input.background, self.default_gap, &excluded),
            };
            let Ok(plan) = plan else { continue };
            if let Some((_, old)) = &self.active {
                if let Some(old_opener) = old.gap_opener {
                    if Some(old_opener) != plan.gap_opener {
                        outbox.push(Payload::GapCommand { target: old_opener, time_gap: self.default_gap });
                    }
                }
            }
            if let Ok(cmds) = plan_gap_opening(&self.order, &plan, self.default_gap) {
                outbox.extend(cmds);
            }
            outbox.push(Payload::JoinResponse { candidate, plan: plan.clone() });
            self.active = Some((candidate, plan));
        }
        if let Some((candidate, plan)) = self.active.clone() {
            match self.beacons.get(&candidate).and_then(|b| b.fsm) {
                Some(FsmState::Complete) => {
                    let pos = self
                        .order
                        .iter()
                        .position(|&id| id == plan.frontal_vehicle)
                        .map_or(self.order.len(), |p| p + 1);
                    self.order.insert(pos, candidate);
                    self.order_version += 1;
                    self.active = None;
                }
                Some(FsmState::Abort) => {
                    if let Some(opener) = plan.gap_opener {
                        outbox.push(Payload::GapCommand { target: opener, time_gap: self.default_gap });
                    }
                    self.active = None;
                }
                _ => {}
            }
        }
        FsmOutput {
            state: self.state,
            maneuver: Maneuver::Cruise,
            outbox,
        }
    }

    fn step_member(&mut self, input: &FsmInput<'_>) -> FsmOutput {
        for msg in input.inbox {
            if let Payload::GapCommand { target, time_gap } = &msg.payload {
                if *target == self.id {
                    self.time_gap = *time_gap;
                    self.state = if *time_gap > self.default_gap {
                        FsmState::OpeningGap
                    } else {
                        FsmState::Maintaining
                    };
                }
            }
        }
        if self.state == FsmState::OpeningGap {
            if let Some(pred) = self.predecessor() {
                // A new vehicle slotted in ahead: the gap has served its purpose.
                if self.beacons.get(&pred).is_some_and(|b| b.role == Role::MergingCav) {
                    self.state = FsmState::Maintaining;
                    self.time_gap = self.default_gap;
                }
            }
        }
        let maneuver = match self.predecessor() {
            Some(leader) => Maneuver::FollowGap { leader, time_gap: self.time_gap },
            None => Maneuver::Cruise,
        };
        FsmOutput {
            state: self.state,
            maneuver,
            outbox: Vec::new(),
        }
    }

    fn frontal_gap(&self, plan: &MergePlan, own: &OwnView) -> Option<(f64, f64)> {
        let f = self.beacons.get(&plan.frontal_vehicle)?;
        let gap = f.s - own.s - 0.5 * (f.length + own.state.length);
        Some((gap, f.speed))
    }

    /// Time gap between the frontal vehicle and the opener, infinite at the tail.
    fn slot_time_gap(&self, plan: &MergePlan) -> Option<f64> {
        let Some(opener) = plan.gap_opener else {
            return Some(f64::INFINITY);
        };
        let f = self.beacons.get(&plan.frontal_vehicle)?;
        let o = self.beacons.get(&opener)?;
        let gap = f.s - o.s - 0.5 * (f.length + o.length);
        Some(if o.speed > 0.1 { gap / o.speed } else { f64::INFINITY })
    }

    fn step_candidate(&mut self, input: &FsmInput<'_>) -> Result<FsmOutput> {
        let p = self.params;
        let own = &input.own;
        let mut outbox = Vec::new();
        let mut response = None;
        for msg in input.inbox {
            if let Payload::JoinResponse { candidate, plan } = &msg.payload {
                if *candidate == self.id {
                    response = Some(plan.clone());
                }
            }
        }
        if let Some(plan) = response {
            match self.state {
                FsmState::JoinRequested | FsmState::MovingToPosition => {
                    self.plan = Some(plan);
                    self.blocked_since = None;
                    self.awaiting_response = false;
                    self.state = FsmState::MovingToPosition;
                }
                FsmState::Joining | FsmState::Complete | FsmState::Abort => {}
                _ => {
                    self.state = FsmState::Abort;
                    return Err(Error::Protocol(format!(
                        "agent {} received a join response without a request",
                        self.id
                    )));
                }
            }
        }

        let hears_platoon = input.inbox.iter().any(|m| {
            matches!(&m.payload, Payload::StateBeacon(b) if matches!(b.role, Role::PlatoonLeader | Role::PlatoonMember))
        });
        let abortable = !matches!(self.state, FsmState::Complete | FsmState::Abort);
        if abortable && self.deadline.is_some_and(|d| input.time > d) {
            self.state = FsmState::Abort;
        }

        match self.state {
            FsmState::Searching => {
                if hears_platoon && own.s >= own.acceleration_start_s - p.request_lead {
                    self.state = FsmState::JoinRequested;
                    self.requested_at = Some(input.time);
                    self.last_request = Some(input.time);
                    let remaining = (own.merge_end_s - own.s).max(0.0);
                    self.deadline = Some(input.time + p.abort_factor * remaining / own.state.speed.max(1.0));
                    outbox.push(Payload::JoinRequest { excluded: Vec::new() });
                }
            }
            FsmState::JoinRequested => {
                if self.last_request.is_some_and(|t| input.time - t >= p.request_retry) {
                    self.last_request = Some(input.time);
                    outbox.push(Payload::JoinRequest { excluded: self.excluded.clone() });
                }
            }
            FsmState::MovingToPosition => {
                let plan = self.plan.clone().expect("plan set on response");
                let aligned = self.frontal_gap(&plan, own).is_some_and(|(gap, vf)| {
                    let want = own.state.speed * self.default_gap;
                    (gap - want).abs() <= p.align_tolerance * want.max(2.0) && (own.state.speed - vf).abs() <= p.speed_tolerance
                });
                let slot_open = self
                    .slot_time_gap(&plan)
                    .is_some_and(|tg| tg >= p.joining_gap_factor * self.default_gap);
                if own.on_acceleration_lane && aligned && slot_open && input.clear_to_merge {
                    self.state = FsmState::Joining;
                } else if self.awaiting_response {
                    if self.last_request.is_some_and(|t| input.time - t >= p.request_retry) {
                        self.last_request = Some(input.time);
                        outbox.push(Payload::JoinRequest { excluded: self.excluded.clone() });
                    }
                } else if own.on_acceleration_lane && aligned && !input.clear_to_merge {
                    let since = *self.blocked_since.get_or_insert(input.time);
                    if input.time - since >= p.replan_after {
                        if !self.excluded.contains(&plan.frontal_vehicle) {
                            self.excluded.push(plan.frontal_vehicle);
                        }
                        self.blocked_since = None;
                        self.awaiting_response = true;
                        self.last_request = Some(input.time);
                        outbox.push(Payload::JoinRequest { excluded: self.excluded.clone() });
                    }
                } else {
                    self.blocked_since = None;
                }
            }
            FsmState::Joining => {
                let plan = self.plan.clone().expect("plan set on response");
                let settled = self.frontal_gap(&plan, own).is_some_and(|(gap, _)| {
                    let want = (own.state.speed * self.default_gap).max(1e-6);
                    ((gap - want) / want).abs() < p.complete_gap_error
                });
                if own.d.abs() < p.complete_lateral && settled {
                    self.state = FsmState::Complete;
                }
            }
            _ => {}
        }

        let maneuver = match (self.state, &self.plan) {
            (FsmState::MovingToPosition, Some(plan)) => Maneuver::FollowGap {
                leader: plan.frontal_vehicle,
                time_gap: self.default_gap,
            },
            (FsmState::Joining, Some(plan)) => Maneuver::LaneChange {
                behind: plan.frontal_vehicle,
                time_gap: self.default_gap,
            },
            (FsmState::Complete, Some(plan)) => Maneuver::FollowGap {
                leader: self.predecessor().unwrap_or(plan.frontal_vehicle),
                time_gap: self.default_gap,
            },
            (FsmState::Abort, _) => Maneuver::Hold,
            _ => Maneuver::Cruise,
        };
        Ok(FsmOutput {
            state: self.state,
            maneuver,
            outbox,
        })
    }
}
