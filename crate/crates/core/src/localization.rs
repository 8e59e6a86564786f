//! GPS/IMU Kalman filter over the state `[x, y, yaw, v]`.
//!
//! Propagation uses the unicycle model driven by the IMU (longitudinal
//! acceleration and yaw rate); the covariance is propagated through the
//! model Jacobian, so the predict step is the EKF step of that model.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::normalize_angle;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEstimate {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
}

impl GaussianEstimate {
    pub fn new(x: f64, y: f64, yaw: f64, v: f64, covariance: Matrix4<f64>) -> Self {
        Self {
            mean: Vector4::new(x, y, normalize_angle(yaw), v),
            covariance,
        }
    }

    pub fn x(&self) -> f64 {
        self.mean[0]
    }
    pub fn y(&self) -> f64 {
        self.mean[1]
    }
    pub fn yaw(&self) -> f64 {
        self.mean[2]
    }
    pub fn v(&self) -> f64 {
        self.mean[3]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.covariance - self.covariance.transpose()).amax() <= tol
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.covariance
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsMeasurement {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuMeasurement {
    pub accel: f64,
    pub yaw_rate: f64,
}

/// Noise model of the filter. `process` is the continuous-time diagonal
/// applied per second of propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub process: [f64; 4],
    pub sigma_gps: f64,
    pub sigma_accel: f64,
    pub sigma_yaw_rate: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            process: [0.01, 0.01, 0.001, 0.1],
            sigma_gps: 0.5,
            sigma_accel: 0.2,
            sigma_yaw_rate: 0.01,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            process: [0.0; 4],
            sigma_gps: 0.0,
            sigma_accel: 0.0,
            sigma_yaw_rate: 0.0,
        }
    }

    /// Discrete process noise for a step of `dt`, including IMU input noise.
    pub fn discrete_q(&self, dt: f64) -> Matrix4<f64> {
        let mut q = Matrix4::from_diagonal(&Vector4::from(self.process)) * dt;
        q[(2, 2)] += (self.sigma_yaw_rate * dt).powi(2);
        q[(3, 3)] += (self.sigma_accel * dt).powi(2);
        q
    }
}

/// Propagates the estimate through one IMU-driven step.
pub fn kf_predict(
    est: &GaussianEstimate,
    imu: &ImuMeasurement,
    dt: f64,
    noise: &NoiseConfig,
) -> GaussianEstimate {
    let (x, y, yaw, v) = (est.x(), est.y(), est.yaw(), est.v());
    let (s, c) = yaw.sin_cos();
    let mean = Vector4::new(
        x + v * c * dt,
        y + v * s * dt,
        normalize_angle(yaw + imu.yaw_rate * dt),
        v + imu.accel * dt,
    );
    #[rustfmt::skip]
    let f = Matrix4::new(
        1.0, 0.0, -v * s * dt, c * dt,
        0.0, 1.0,  v * c * dt, s * dt,
        0.0, 0.0,  1.0,        0.0,
        0.0, 0.0,  0.0,        1.0,
    );
    let p = f * est.covariance * f.transpose() + noise.discrete_q(dt);
    GaussianEstimate {
        mean,
        covariance: 0.5 * (p + p.transpose()),
    }
}

/// Fuses one GPS position fix (Joseph-form covariance update).
pub fn kf_update(est: &GaussianEstimate, gps: &GpsMeasurement) -> Result<GaussianEstimate> {
    if !(gps.sigma >= 0.0) {
        return Err(Error::domain("GPS sigma must be non-negative"));
    }
    #[rustfmt::skip]
    let h = Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    );
    let r = Matrix2::identity() * gps.sigma * gps.sigma;
    let p = &est.covariance;
    let s = h * p * h.transpose() + r;
    let innovation = Vector2::new(gps.x - est.x(), gps.y - est.y());
    let s_inv = match s.try_inverse() {
        Some(inv) if s.determinant().abs() > 1e-30 && inv.iter().all(|v| v.is_finite()) => inv,
        _ if innovation.amax() <= 1e-12 => {
            // Exact prior meets an exact, agreeing fix: nothing to learn.
            return Ok(est.clone());
        }
        _ => return Err(Error::Numeric("singular innovation covariance".into())),
    };
    let k: Matrix4x2<f64> = p * h.transpose() * s_inv;
    let mut mean = est.mean + k * innovation;
    mean[2] = normalize_angle(mean[2]);
    let i_kh = Matrix4::identity() - k * h;
    let cov = i_kh * p * i_kh.transpose() + k * r * k.transpose();
    let mut post = GaussianEstimate {
        mean,
        covariance: 0.5 * (cov + cov.transpose()),
    };
    if gps.sigma == 0.0 {
        // Perfect fix: the measured components are known exactly.
        post.mean[0] = gps.x;
        post.mean[1] = gps.y;
    }
    Ok(post)
}
