//! Plan layer: A* lane routing and natural cubic spline trajectories.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::normalize_angle;
use crate::map::{LaneGraph, LaneId};

/// A position on the lane graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanePosition {
    pub lane: LaneId,
    pub s: f64,
}

impl LanePosition {
    pub fn new(lane: impl Into<LaneId>, s: f64) -> Self {
        Self { lane: lane.into(), s }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub lanes: Vec<LaneId>,
    /// Travelled arc length plus any gaps between disconnected lane ends.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over (lane, entry arc length) nodes with a Euclidean heuristic.
///
/// Leaving a lane costs its remaining length; jumping from a lane end to the
/// entry point of a successor costs the straight-line distance between them,
/// which keeps the heuristic admissible on graphs with imperfect joins.
pub fn plan_route(map: &LaneGraph, start: &LanePosition, goal: &LanePosition) -> Result<Route> {
    let start_lane = map
        .lane(&start.lane)
        .ok_or_else(|| Error::domain(format!("unknown start lane `{}`", start.lane)))?;
    let goal_lane = map
        .lane(&goal.lane)
        .ok_or_else(|| Error::domain(format!("unknown goal lane `{}`", goal.lane)))?;
    let goal_s = goal.s.clamp(0.0, goal_lane.length());
    let goal_pt = goal_lane.pose_at(goal_s);

    // node storage: (lane id, entry s, parent); index GOAL is virtual.
    let mut nodes: Vec<(LaneId, f64, Option<usize>)> = vec![(start.lane.clone(), start.s.clamp(0.0, start_lane.length()), None)];
    let mut best_g: BTreeMap<(LaneId, u64), f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    let h = |lane: &str, s: f64| {
        let p = map.lane(lane).expect("routed lanes exist").pose_at(s);
        (p.x - goal_pt.x).hypot(p.y - goal_pt.y)
    };
    heap.push(Frontier { f: h(&start.lane, nodes[0].1), g: 0.0, node: 0 });
    best_g.insert((start.lane.clone(), nodes[0].1.to_bits()), 0.0);
    let mut goal_hits: Vec<(usize, f64)> = Vec::new();
    const GOAL: usize = usize::MAX;

    while let Some(Frontier { g, node, .. }) = heap.pop() {
        if node == GOAL {
            let (parent, cost) = goal_hits
                .iter()
                .copied()
                .find(|&(_, c)| c == g)
                .expect("goal entry recorded");
            let mut lanes = Vec::new();
            let mut cur = Some(parent);
            while let Some(i) = cur {
                lanes.push(nodes[i].0.clone());
                cur = nodes[i].2;
            }
            lanes.reverse();
            return Ok(Route { lanes, cost });
        }
        let (lane_id, entry, _) = nodes[node].clone();
        if best_g
            .get(&(lane_id.clone(), entry.to_bits()))
            .is_some_and(|&bg| g > bg)
        {
            continue;
        }
        let lane = map.lane(&lane_id).expect("routed lanes exist");
        if lane_id == goal.lane && entry <= goal_s {
            let cost = g + (goal_s - entry);
            goal_hits.push((node, cost));
            heap.push(Frontier { f: cost, g: cost, node: GOAL });
        }
        let exit = lane.end();
        let leave = g + (lane.length() - entry);
        for next in map.successors(&lane_id) {
            let next_lane = map.lane(next).expect("successors validated");
            let (next_s, _) = next_lane.project(exit[0], exit[1]);
            let p = next_lane.pose_at(next_s);
            let ng = leave + (p.x - exit[0]).hypot(p.y - exit[1]);
            let key = (next.clone(), next_s.to_bits());
            if best_g.get(&key).is_some_and(|&bg| bg <= ng) {
                continue;
            }
            best_g.insert(key, ng);
            nodes.push((next.clone(), next_s, Some(node)));
            heap.push(Frontier { f: ng + h(next, next_s), g: ng, node: nodes.len() - 1 });
        }
    }
    Err(Error::NoRoute {
        from: start.lane.clone(),
        to: goal.lane.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> Option<f64> {
        (self.samples.len() >= 2).then(|| self.samples[1].t - self.samples[0].t)
    }
}

/// One coordinate of a natural cubic spline over knots `u`.
#[derive(Debug, Clone, PartialEq)]
struct Spline1D {
    u: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline1D {
    fn natural(u: &[f64], y: &[f64]) -> Self {
        let n = u.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second-derivative system.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sub = vec![0.0; k];
            let mut sup = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = u[i] - u[i - 1];
                let h1 = u[i + 1] - u[i];
                sub[i - 1] = h0;
                diag[i - 1] = 2.0 * (h0 + h1);
                sup[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - sup[i] * sol[i + 1]) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        Self { u: u.to_vec(), y: y.to_vec(), m }
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.u.len();
        match self.u.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Value, first and second derivative at parameter `t`.
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let i = self.segment(t);
        let h = self.u[i + 1] - self.u[i];
        let a = (self.u[i + 1] - t) / h;
        let b = (t - self.u[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let val = a * y0 + b * y1 + ((a.powi(3) - a) * m0 + (b.powi(3) - b) * m1) * h * h / 6.0;
        let d1 = (y1 - y0) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1;
        let d2 = a * m0 + b * m1;
        (val, d1, d2)
    }
}

/// Planar natural cubic spline parameterized by cumulative chord length.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline2D {
    sx: Spline1D,
    sy: Spline1D,
}

impl CubicSpline2D {
    pub fn new(waypoints: &[[f64; 2]]) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::domain("spline needs at least two waypoints"));
        }
        let mut u = vec![0.0];
        for w in waypoints.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::domain("duplicate consecutive waypoints"));
            }
            u.push(u.last().unwrap() + d);
        }
        let xs: Vec<f64> = waypoints.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = waypoints.iter().map(|p| p[1]).collect();
        Ok(Self {
            sx: Spline1D::natural(&u, &xs),
            sy: Spline1D::natural(&u, &ys),
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.sx.u
    }

    pub fn param_length(&self) -> f64 {
        *self.sx.u.last().unwrap()
    }

    pub fn point(&self, u: f64) -> [f64; 2] {
        [self.sx.eval(u).0, self.sy.eval(u).0]
    }

    pub fn derivative(&self, u: f64) -> [f64; 2] {
        [self.sx.eval(u).1, self.sy.eval(u).1]
    }

    pub fn second_derivative(&self, u: f64) -> [f64; 2] {
        [self.sx.eval(u).2, self.sy.eval(u).2]
    }

    pub fn heading(&self, u: f64) -> f64 {
        let [dx, dy] = self.derivative(u);
        dy.atan2(dx)
    }

    /// Arc length at evenly spaced parameter values (Simpson per sub-step).
    pub fn arc_length_table(&self, per_segment: usize) -> Vec<(f64, f64)> {
        let speed = |u: f64| {
            let [dx, dy] = self.derivative(u);
            dx.hypot(dy)
        };
        let mut table = vec![(0.0, 0.0)];
        let mut acc = 0.0;
        for w in self.knots().windows(2) {
            let h = (w[1] - w[0]) / per_segment as f64;
            for j in 0..per_segment {
                let a = w[0] + h * j as f64;
                let b = a + h;
                acc += h / 6.0 * (speed(a) + 4.0 * speed(0.5 * (a + b)) + speed(b));
                table.push((b, acc));
            }
        }
        table
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpeedProfile {
    Constant(f64),
    /// One speed per waypoint, interpolated linearly in arc length.
    PerWaypoint(Vec<f64>),
}

/// Fits a natural cubic spline through `waypoints` and resamples it at a
/// uniform time step following `speed`.
pub fn fit_cubic_spline(waypoints: &[[f64; 2]], speed: &SpeedProfile, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::domain("dt must be positive"));
    }
    let spline = CubicSpline2D::new(waypoints)?;
    let table = spline.arc_length_table(64);
    let total = table.last().unwrap().1;
    let knot_s: Vec<f64> = spline
        .knots()
        .iter()
        .map(|&k| arc_at_param(&table, k))
        .collect();
    let speed_at = |s: f64| -> Result<f64> {
        let v = match speed {
            SpeedProfile::Constant(v) => *v,
            SpeedProfile::PerWaypoint(vs) => {
                if vs.len() != waypoints.len() {
                    return Err(Error::domain("speed profile length must match waypoints"));
                }
                let i = match knot_s.binary_search_by(|k| k.total_cmp(&s)) {
                    Ok(i) => i.min(vs.len() - 2),
                    Err(i) => i.saturating_sub(1).min(vs.len() - 2),
                };
                let w = ((s - knot_s[i]) / (knot_s[i + 1] - knot_s[i])).clamp(0.0, 1.0);
                vs[i] + w * (vs[i + 1] - vs[i])
            }
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::domain("speed profile must be positive"));
        }
        Ok(v)
    };
    let mut samples = Vec::new();
    let mut s = 0.0;
    let mut t = 0.0;
    loop {
        let u = param_at_arc(&table, s);
        let [x, y] = spline.point(u);
        let v = speed_at(s)?;
        samples.push(TrajectorySample { t, x, y, yaw: normalize_angle(spline.heading(u)), v });
        if s >= total {
            break;
        }
        s = (s + v * dt).min(total);
        t += dt;
    }
    Ok(Trajectory { samples })
}

fn arc_at_param(table: &[(f64, f64)], u: f64) -> f64 {
    let i = table.partition_point(|&(p, _)| p < u).clamp(1, table.len() - 1);
    let (u0, s0) = table[i - 1];
    let (u1, s1) = table[i];
    s0 + (s1 - s0) * ((u - u0) / (u1 - u0)).clamp(0.0, 1.0)
}

fn param_at_arc(table: &[(f64, f64)], s: f64) -> f64 {
    let i = table.partition_point(|&(_, a)| a < s).clamp(1, table.len() - 1);
    let (u0, s0) = table[i - 1];
    let (u1, s1) = table[i];
    u0 + (u1 - u0) * ((s - s0) / (s1 - s0)).clamp(0.0, 1.0)
}
