//! Longitudinal and tracking controllers: constant-time-gap following, PID
//! and a Riccati-based finite-horizon MPC.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlCommand, VehicleLimits};
use crate::error::{Error, Result};
use crate::geometry::normalize_angle;
use crate::planning::Trajectory;
use crate::world::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapGains {
    pub k_s: f64,
    pub k_v: f64,
}

impl Default for GapGains {
    fn default() -> Self {
        Self { k_s: 0.45, k_v: 0.25 }
    }
}

/// Constant-time-gap law on a precomputed bumper gap, unsaturated.
pub fn gap_law(gap: f64, v_ego: f64, v_lead: f64, time_gap: f64, gains: &GapGains) -> f64 {
    gains.k_s * (gap - v_ego * time_gap) + gains.k_v * (v_lead - v_ego)
}

/// Bumper-to-bumper gap measured along the ego heading, or `None` when the
/// leader's center is not ahead of the ego.
pub fn bumper_gap(ego: &VehicleState, leader: &VehicleState) -> Option<f64> {
    let (s, c) = ego.pose.yaw.sin_cos();
    let ahead = (leader.pose.x - ego.pose.x) * c + (leader.pose.y - ego.pose.y) * s;
    (ahead > 0.0).then(|| ahead - 0.5 * (ego.length + leader.length))
}

/// Following command towards `leader` at `time_gap` seconds, saturated.
pub fn gap_control(
    ego: &VehicleState,
    leader: &VehicleState,
    time_gap: f64,
    gains: &GapGains,
    limits: &VehicleLimits,
) -> Result<f64> {
    let gap = bumper_gap(ego, leader).ok_or_else(|| Error::domain("leader is not ahead of ego"))?;
    let a = gap_law(gap, ego.speed, leader.speed, time_gap, gains);
    Ok(a.clamp(limits.accel_min, limits.accel_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on the magnitude of the accumulated integral term `∑e·dt`.
    pub integral_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.8,
            ki: 0.2,
            kd: 0.0,
            integral_limit: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PidController {
    pub gains: PidGains,
    integral: f64,
    prev_error: Option<f64>,
}

impl PidController {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            integral: 0.0,
            prev_error: None,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
    }

    pub fn update(&mut self, error: f64, dt: f64) -> f64 {
        let g = &self.gains;
        self.integral = (self.integral + error * dt).clamp(-g.integral_limit, g.integral_limit);
        let derivative = self.prev_error.map_or(0.0, |p| (error - p) / dt);
        self.prev_error = Some(error);
        g.kp * error + g.ki * self.integral + g.kd * derivative
    }
}

/// PID output after feeding an entire error history.
pub fn pid_control(errors: &[f64], gains: &PidGains, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::domain("dt must be positive"));
    }
    let mut pid = PidController::new(*gains);
    let mut u = 0.0;
    for &e in errors {
        u = pid.update(e, dt);
    }
    Ok(u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Weights on the tracking error of (x, y, yaw, v).
    pub q: [f64; 4],
    /// Weights on the input deviation (accel, steer).
    pub r: [f64; 2],
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    pub wheelbase: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        let lim = VehicleLimits::default();
        Self {
            horizon: 20,
            q: [1.0, 1.0, 0.5, 1.0],
            r: [0.1, 0.1],
            u_min: [lim.accel_min, -lim.steer_max],
            u_max: [lim.accel_max, lim.steer_max],
            wheelbase: 2.8,
        }
    }
}

/// Linear time-varying quadratic problem
/// `min Σ xₖᵀQxₖ + uₖᵀRuₖ + x_NᵀQ_f x_N`, `xₖ₊₁ = Aₖxₖ + Bₖuₖ + cₖ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvProblem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtvSolution {
    pub inputs: Vec<DVector<f64>>,
    pub cost: f64,
}

impl LtvProblem {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    fn clip(&self, u: DVector<f64>) -> DVector<f64> {
        u.zip_zip_map(&self.u_min, &self.u_max, |v, lo, hi| v.clamp(lo, hi))
    }

    /// Cost of applying `inputs` open loop from `x0`.
    pub fn cost_of(&self, inputs: &[DVector<f64>]) -> f64 {
        let mut x = self.x0.clone();
        let mut cost = 0.0;
        for (k, u) in inputs.iter().enumerate() {
            cost += (x.transpose() * &self.q * &x)[0] + (u.transpose() * &self.r * u)[0];
            x = &self.a[k] * &x + &self.b[k] * u + &self.c[k];
        }
        cost + (x.transpose() * &self.qf * &x)[0]
    }

    /// Riccati recursion for the affine LQ problem, then a clipped rollout.
    /// If clipping makes the policy worse than doing nothing, the zero input
    /// sequence is returned instead.
    pub fn solve(&self) -> Result<LtvSolution> {
        let n = self.horizon();
        if n == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        let mut p = self.qf.clone();
        let mut pv = DVector::zeros(self.x0.len());
        let mut gains = Vec::with_capacity(n);
        for k in (0..n).rev() {
            let (a, b, c) = (&self.a[k], &self.b[k], &self.c[k]);
            let bt_p = b.transpose() * &p;
            let h = &self.r + &bt_p * b;
            let h_inv = h
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numeric("singular Riccati gain matrix".into()))?;
            let k_gain = &h_inv * &bt_p * a;
            let k_off = &h_inv * b.transpose() * (&p * c + &pv);
            let a_cl = a - b * &k_gain;
            pv = a_cl.transpose() * (&p * c + &pv);
            p = &self.q + a.transpose() * &p * &a_cl;
            p = 0.5 * (&p + p.transpose());
            gains.push((k_gain, k_off));
        }
        gains.reverse();
        let mut x = self.x0.clone();
        let mut inputs = Vec::with_capacity(n);
        for (k, (kg, ko)) in gains.iter().enumerate() {
            let u = self.clip(-(kg * &x) - ko);
            x = &self.a[k] * &x + &self.b[k] * &u + &self.c[k];
            inputs.push(u);
        }
        let cost = self.cost_of(&inputs);
        let zero = vec![DVector::zeros(self.u_min.len()); n];
        let zero_cost = self.cost_of(&zero);
        if cost <= zero_cost {
            Ok(LtvSolution { inputs, cost })
        } else {
            Ok(LtvSolution { inputs: zero, cost: zero_cost })
        }
    }
}

/// Reference input implied by consecutive trajectory samples.
fn reference_inputs(reference: &Trajectory, k: usize, dt: f64, wheelbase: f64) -> (f64, f64) {
    let s0 = &reference.samples[k];
    let s1 = &reference.samples[k + 1];
    let accel = (s1.v - s0.v) / dt;
    let yaw_rate = normalize_angle(s1.yaw - s0.yaw) / dt;
    let steer = if s0.v.abs() > 1e-6 {
        (wheelbase * yaw_rate / s0.v).atan()
    } else {
        0.0
    };
    (accel, steer)
}

/// Builds the error-coordinates tracking problem around `reference`.
///
/// The state is `[x, y, yaw, v]` minus the reference, the input is
/// `[accel, steer]` minus the reference input; input bounds are shifted
/// accordingly so that the absolute command respects `cfg.u_min/u_max`.
pub fn tracking_problem(state: &VehicleState, reference: &Trajectory, cfg: &MpcConfig) -> Result<(LtvProblem, Vec<[f64; 2]>)> {
    if cfg.horizon < 1 {
        return Err(Error::Config("MPC horizon must be at least 1".into()));
    }
    if reference.len() < cfg.horizon + 1 {
        return Err(Error::domain("reference does not cover the horizon"));
    }
    let dt = reference.dt().ok_or_else(|| Error::domain("reference needs two samples"))?;
    if !(dt > 0.0) {
        return Err(Error::domain("reference time must increase"));
    }
    let l = cfg.wheelbase;
    let mut a = Vec::with_capacity(cfg.horizon);
    let mut b = Vec::with_capacity(cfg.horizon);
    let mut c = Vec::with_capacity(cfg.horizon);
    let mut u_ref = Vec::with_capacity(cfg.horizon);
    for k in 0..cfg.horizon {
        let r = &reference.samples[k];
        let r1 = &reference.samples[k + 1];
        let (ar, dr) = reference_inputs(reference, k, dt, l);
        let (s, co) = r.yaw.sin_cos();
        #[rustfmt::skip]
        let ak = DMatrix::from_row_slice(4, 4, &[
            1.0, 0.0, -r.v * s * dt, co * dt,
            0.0, 1.0,  r.v * co * dt, s * dt,
            0.0, 0.0,  1.0, dr.tan() / l * dt,
            0.0, 0.0,  0.0, 1.0,
        ]);
        #[rustfmt::skip]
        let bk = DMatrix::from_row_slice(4, 2, &[
            0.0, 0.0,
            0.0, 0.0,
            0.0, r.v / (l * dr.cos().powi(2)) * dt,
            dt,  0.0,
        ]);
        // Model drift of the reference itself under its own inputs.
        let pred = [
            r.x + r.v * co * dt,
            r.y + r.v * s * dt,
            r.yaw + r.v / l * dr.tan() * dt,
            r.v + ar * dt,
        ];
        let ck = DVector::from_vec(vec![
            pred[0] - r1.x,
            pred[1] - r1.y,
            normalize_angle(pred[2] - r1.yaw),
            pred[3] - r1.v,
        ]);
        a.push(ak);
        b.push(bk);
        c.push(ck);
        u_ref.push([ar, dr]);
    }
    let r0 = &reference.samples[0];
    let x0 = DVector::from_vec(vec![
        state.pose.x - r0.x,
        state.pose.y - r0.y,
        normalize_angle(state.pose.yaw - r0.yaw),
        state.speed - r0.v,
    ]);
    let u_min = DVector::from_vec(vec![cfg.u_min[0] - u_ref[0][0], cfg.u_min[1] - u_ref[0][1]]);
    let u_max = DVector::from_vec(vec![cfg.u_max[0] - u_ref[0][0], cfg.u_max[1] - u_ref[0][1]]);
    let problem = LtvProblem {
        a,
        b,
        c,
        q: DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.q)),
        r: DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.r)),
        qf: DMatrix::from_diagonal(&DVector::from_row_slice(&cfg.q)),
        x0,
        u_min,
        u_max,
    };
    Ok((problem, u_ref))
}

/// First input of the finite-horizon tracking solution.
pub fn mpc_control(state: &VehicleState, reference: &Trajectory, cfg: &MpcConfig) -> Result<ControlCommand> {
    let (problem, u_ref) = tracking_problem(state, reference, cfg)?;
    let sol = problem.solve()?;
    let du = &sol.inputs[0];
    Ok(ControlCommand::new(
        (u_ref[0][0] + du[0]).clamp(cfg.u_min[0], cfg.u_max[0]),
        (u_ref[0][1] + du[1]).clamp(cfg.u_min[1], cfg.u_max[1]),
    ))
}

/// Pure-pursuit steering towards a look-ahead point given in world frame.
pub fn pure_pursuit(state: &VehicleState, target: [f64; 2], steer_max: f64) -> f64 {
    let (lx, ly) = state.pose.to_local(target[0], target[1]);
    let ld2 = lx * lx + ly * ly;
    if ld2 < 1e-9 {
        return 0.0;
    }
    let curvature = 2.0 * ly / ld2;
    (state.wheelbase * curvature).atan().clamp(-steer_max, steer_max)
}
