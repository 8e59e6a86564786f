//! Safety, stability, efficiency and detection-quality metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datalog::FrameRecord;
use crate::error::{Error, Result};
use crate::geometry::{box_iou_bev, OrientedBox};
use crate::platoon::FsmState;
use crate::world::{AgentId, Role, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub ttc_threshold: f64,
    pub iou_thresholds: Vec<f64>,
    pub eval_range_x: [f64; 2],
    pub eval_range_y: [f64; 2],
    /// Length of the trailing window used for the steady-state time gap.
    pub steady_window: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 2.5,
            iou_thresholds: vec![0.5, 0.7],
            eval_range_x: [-140.0, 140.0],
            eval_range_y: [-40.0, 40.0],
            steady_window: 10.0,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ttc_threshold > 0.0) {
            return Err(Error::validation("ttc_threshold", "must be positive"));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::validation("iou_thresholds", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Time to collision from a bumper gap and the two speeds.
pub fn ttc_from_gap(gap: f64, v_follower: f64, v_leader: f64) -> f64 {
    if gap <= 0.0 {
        return 0.0;
    }
    let closing = v_follower - v_leader;
    if closing > 0.0 {
        gap / closing
    } else {
        f64::INFINITY
    }
}

/// Time to collision of `follower` behind `leader`, with the bumper gap
/// measured along the follower's heading.
pub fn compute_ttc(follower: &VehicleState, leader: &VehicleState) -> f64 {
    let (s, c) = follower.pose.yaw.sin_cos();
    let ahead = (leader.pose.x - follower.pose.x) * c + (leader.pose.y - follower.pose.y) * s;
    let gap = ahead - 0.5 * (follower.length + leader.length);
    ttc_from_gap(gap, follower.speed, leader.speed)
}

/// Number of maximal runs strictly below `threshold`.
pub fn hazard_events(series: &[f64], threshold: f64) -> usize {
    let mut events = 0;
    let mut below = false;
    for &v in series {
        let now = v < threshold;
        if now && !below {
            events += 1;
        }
        below = now;
    }
    events
}

/// Events summed over follower-leader pair series.
pub fn hazard_frequency(pairs: &[Vec<f64>], threshold: f64) -> usize {
    pairs.iter().map(|s| hazard_events(s, threshold)).sum()
}

/// Mean and sample standard deviation; `None` when fewer than one sample.
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: OrientedBox,
}

/// Precision/recall after each detection in descending-score order.
pub fn pr_curve(detections: &[ScoredBox], ground_truth: &[OrientedBox], iou_threshold: f64) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut matched = vec![false; ground_truth.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(order.len());
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = box_iou_bev(&detections[i].bbox, gt).unwrap_or(0.0);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / ground_truth.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    curve
}

/// All-point interpolated average precision; `None` without ground truth.
pub fn average_precision(detections: &[ScoredBox], ground_truth: &[OrientedBox], iou_threshold: f64) -> Option<f64> {
    if ground_truth.is_empty() {
        return None;
    }
    let curve = pr_curve(detections, ground_truth, iou_threshold);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub vehicle: AgentId,
    pub role: Role,
    pub attc: Option<f64>,
    pub hf: usize,
    pub atg: Option<f64>,
    pub tg_std: Option<f64>,
    pub acc_std: Option<f64>,
    pub tcm: Option<f64>,
    pub acc_std_maneuver: Option<f64>,
    /// Frames dropped from time-gap statistics because the follower was stopped.
    pub zero_speed_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub agent: AgentId,
    pub tcm: Option<f64>,
    pub aborted: bool,
    pub window: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub vehicles: Vec<VehicleMetrics>,
    pub hf_total: usize,
    pub attc: Option<f64>,
    pub maneuver: Option<EfficiencyReport>,
    /// Mean platoon time gap over the trailing steady window.
    pub steady_time_gap: Option<f64>,
    pub duration: f64,
}

/// Per-frame TTC of every vehicle to the nearest vehicle ahead in its lane.
pub fn ttc_series(frames: &[FrameRecord]) -> BTreeMap<AgentId, Vec<f64>> {
    let mut out: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    for f in frames {
        for (&id, a) in &f.agents {
            let ahead = f
                .agents
                .iter()
                .filter(|(&o, b)| o != id && b.lane.is_some() && b.lane == a.lane && b.s > a.s)
                .min_by(|x, y| x.1.s.total_cmp(&y.1.s));
            let ttc = match (ahead, &a.lane) {
                (Some((_, b)), Some(_)) => {
                    let gap = b.s - a.s - 0.5 * (a.state.length + b.state.length);
                    ttc_from_gap(gap, a.state.speed, b.state.speed)
                }
                _ => f64::INFINITY,
            };
            out.entry(id).or_default().push(ttc);
        }
    }
    out
}

/// Time gap of platoon followers to their predecessor for one frame.
pub fn frame_time_gaps(frame: &FrameRecord) -> Vec<(AgentId, Option<f64>)> {
    let mut out = Vec::new();
    for w in frame.platoon.windows(2) {
        let (pred, me) = (w[0], w[1]);
        let (Some(p), Some(a)) = (frame.agents.get(&pred), frame.agents.get(&me)) else {
            continue;
        };
        if !matches!(a.fsm, Some(FsmState::Maintaining) | Some(FsmState::Complete)) {
            continue;
        }
        if a.lane.is_none() || a.lane != p.lane {
            continue;
        }
        if a.state.speed <= 0.0 {
            out.push((me, None));
            continue;
        }
        let gap = p.s - a.s - 0.5 * (p.state.length + a.state.length);
        out.push((me, Some(gap / a.state.speed)));
    }
    out
}

pub fn stability_report(frames: &[FrameRecord]) -> BTreeMap<AgentId, (Option<(f64, f64)>, Option<f64>, usize)> {
    let mut gaps: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    let mut zero: BTreeMap<AgentId, usize> = BTreeMap::new();
    let mut acc: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    for f in frames {
        for (id, tg) in frame_time_gaps(f) {
            match tg {
                Some(v) => gaps.entry(id).or_default().push(v),
                None => *zero.entry(id).or_default() += 1,
            }
        }
        for (&id, a) in &f.agents {
            acc.entry(id).or_default().push(a.command.accel_cmd);
        }
    }
    acc.into_iter()
        .map(|(id, a)| {
            let tg = gaps.get(&id).and_then(|g| mean_std(g));
            let acc_std = mean_std(&a).map(|(_, s)| s);
            (id, (tg, acc_std, zero.get(&id).copied().unwrap_or(0)))
        })
        .collect()
}

/// Time from the first `JoinRequested` frame to the first `Complete` frame.
pub fn efficiency_report(frames: &[FrameRecord], agent: AgentId) -> EfficiencyReport {
    let state_at = |f: &FrameRecord| f.agents.get(&agent).and_then(|a| a.fsm);
    let start = frames.iter().find(|f| state_at(f) == Some(FsmState::JoinRequested)).map(|f| f.time);
    let end = frames.iter().find(|f| state_at(f) == Some(FsmState::Complete)).map(|f| f.time);
    let aborted = frames.iter().any(|f| state_at(f) == Some(FsmState::Abort));
    match (start, end) {
        (Some(s), Some(e)) if e >= s => EfficiencyReport {
            agent,
            tcm: Some(e - s),
            aborted,
            window: Some((s, e)),
        },
        _ => EfficiencyReport {
            agent,
            tcm: None,
            aborted,
            window: None,
        },
    }
}

/// The agent whose join maneuver is measured: first to request a join.
pub fn maneuver_agent(frames: &[FrameRecord]) -> Option<AgentId> {
    frames.iter().find_map(|f| {
        f.agents
            .iter()
            .find(|(_, a)| a.fsm == Some(FsmState::JoinRequested))
            .map(|(&id, _)| id)
    })
}

pub fn evaluate_run(frames: &[FrameRecord], cfg: &EvaluationConfig) -> RunReport {
    let ttc = ttc_series(frames);
    let stability = stability_report(frames);
    let maneuver = maneuver_agent(frames).map(|a| efficiency_report(frames, a));
    let window = maneuver.as_ref().and_then(|m| m.window);
    let duration = frames.last().map_or(0.0, |f| f.time);
    let mut vehicles = Vec::new();
    let mut all_finite = Vec::new();
    let mut hf_total = 0;
    for (&id, (tg, acc_std, zero)) in &stability {
        let series = &ttc[&id];
        let finite: Vec<f64> = series.iter().copied().filter(|t| t.is_finite()).collect();
        all_finite.extend_from_slice(&finite);
        let hf = hazard_events(series, cfg.ttc_threshold);
        hf_total += hf;
        let role = frames[0].agents[&id].state.role;
        let acc_std_maneuver = window.and_then(|(s, e)| {
            let xs: Vec<f64> = frames
                .iter()
                .filter(|f| f.time >= s && f.time <= e)
                .filter_map(|f| f.agents.get(&id).map(|a| a.command.accel_cmd))
                .collect();
            mean_std(&xs).map(|(_, sd)| sd)
        });
        vehicles.push(VehicleMetrics {
            vehicle: id,
            role,
            attc: mean_std(&finite).map(|(m, _)| m),
            hf,
            atg: tg.map(|(m, _)| m),
            tg_std: tg.map(|(_, s)| s),
            acc_std: *acc_std,
            tcm: maneuver.as_ref().filter(|m| m.agent == id).and_then(|m| m.tcm),
            acc_std_maneuver,
            zero_speed_frames: *zero,
        });
    }
    let steady: Vec<f64> = frames
        .iter()
        .filter(|f| f.time >= duration - cfg.steady_window)
        .flat_map(|f| frame_time_gaps(f).into_iter().filter_map(|(_, g)| g))
        .collect();
    RunReport {
        vehicles,
        hf_total,
        attc: mean_std(&all_finite).map(|(m, _)| m),
        maneuver,
        steady_time_gap: mean_std(&steady).map(|(m, _)| m),
        duration,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// One row per vehicle.
pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from("vehicle,role,attc,hf,atg,tg_std,acc_std,tcm,acc_std_maneuver\n");
    for v in &report.vehicles {
        let role = serde_json::to_value(v.role).ok().and_then(|r| r.as_str().map(str::to_owned)).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            v.vehicle,
            role,
            opt(v.attc),
            v.hf,
            opt(v.atg),
            opt(v.tg_std),
            opt(v.acc_std),
            opt(v.tcm),
            opt(v.acc_std_maneuver)
        )
        .unwrap();
    }
    out
}
