//! Range-limited broadcast bus with whole-step latency and random loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose2D;
use crate::map::LaneId;
use crate::perception::{Detection, HitRecord};
use crate::platoon::{FsmState, MergePlan};
use crate::world::{AgentId, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommConfig {
    pub range: f64,
    pub latency_steps: u64,
    pub drop_p: f64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            range: 70.0,
            latency_steps: 0,
            drop_p: 0.0,
        }
    }
}

impl CommConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) {
            return Err(Error::validation("comm.range", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::validation("comm.drop_p", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    StateBeacon,
    JoinRequest,
    JoinResponse,
    GapCommand,
    SharedDetections,
    SharedHits,
}

/// Periodic self-report of a connected agent (its own estimate, not truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beacon {
    pub role: Role,
    pub pose: Pose2D,
    pub speed: f64,
    pub accel: f64,
    pub length: f64,
    pub lane: Option<LaneId>,
    pub s: f64,
    pub fsm: Option<FsmState>,
    /// Platoon order, leader first, as last known to the sender. Members
    /// relay it so that it reaches vehicles beyond the leader's range.
    pub platoon: Vec<AgentId>,
    pub order_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    StateBeacon(Beacon),
    JoinRequest {
        /// Frontal vehicles the candidate could not reach on earlier plans.
        excluded: Vec<AgentId>,
    },
    JoinResponse {
        candidate: AgentId,
        plan: MergePlan,
    },
    GapCommand {
        target: AgentId,
        time_gap: f64,
    },
    SharedDetections {
        detections: Vec<Detection>,
    },
    SharedHits {
        hits: HitRecord,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::StateBeacon(_) => MessageKind::StateBeacon,
            Payload::JoinRequest { .. } => MessageKind::JoinRequest,
            Payload::JoinResponse { .. } => MessageKind::JoinResponse,
            Payload::GapCommand { .. } => MessageKind::GapCommand,
            Payload::SharedDetections { .. } => MessageKind::SharedDetections,
            Payload::SharedHits { .. } => MessageKind::SharedHits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: AgentId,
    pub sent_at: u64,
    /// True sender pose when the message left the radio; decides range.
    pub sender_pose_at_send: Pose2D,
    pub payload: Payload,
}

impl Message {
    pub fn new(sender: AgentId, sent_at: u64, sender_pose_at_send: Pose2D, payload: Payload) -> Self {
        Self {
            sender,
            sent_at,
            sender_pose_at_send,
            payload,
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }
}

#[derive(Debug, Clone, Default)]
pub struct V2xBus {
    pub cfg: CommConfig,
    queue: Vec<Message>,
}

impl V2xBus {
    pub fn new(cfg: CommConfig) -> Self {
        Self {
            cfg,
            queue: Vec::new(),
        }
    }

    pub fn publish(&mut self, msg: Message) {
        self.queue.push(msg);
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    fn due(&self, msg: &Message, step: u64) -> bool {
        msg.sent_at + self.cfg.latency_steps == step
    }

    /// Messages due for `receiver` at `step`, sorted by (sender, sent_at).
    ///
    /// One loss draw is taken per in-range message, in delivery order, so
    /// the stream position depends only on the bus content.
    pub fn collect<R: Rng + ?Sized>(
        &self,
        receiver: AgentId,
        receiver_pose: &Pose2D,
        step: u64,
        rng: &mut R,
    ) -> Vec<Message> {
        let mut eligible: Vec<&Message> = self
            .queue
            .iter()
            .filter(|m| self.due(m, step) && m.sender != receiver)
            .filter(|m| m.sender_pose_at_send.distance_to(receiver_pose) <= self.cfg.range)
            .collect();
        eligible.sort_by_key(|m| (m.sender, m.sent_at));
        eligible
            .into_iter()
            .filter(|_| rng.random::<f64>() >= self.cfg.drop_p)
            .cloned()
            .collect()
    }

    /// Drops messages that can no longer be delivered at or after `step`.
    pub fn prune(&mut self, step: u64) {
        let latency = self.cfg.latency_steps;
        self.queue.retain(|m| m.sent_at + latency >= step);
    }
}
