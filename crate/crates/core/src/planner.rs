//! Racket strike planning: required outgoing ball velocity under linear drag,
//! then racket normal and normal speed from a frictionless restitution impact.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::LINEAR_DRAG_EPS;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("flight time must be positive, got {0}")]
    NonPositiveFlightTime(f64),
    #[error("outgoing and incoming velocities coincide; no collision normal is defined")]
    DegenerateCollision,
    #[error("racket normal must be unit length, got norm {0}")]
    NonUnitNormal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerParams {
    /// Linear drag coefficient, 1/s.
    pub k: f64,
    /// Signed vertical gravity component, z up.
    pub g_z: f64,
    /// Desired flight time to the landing target.
    pub flight_time: f64,
    /// Racket restitution.
    pub restitution: f64,
    /// Landing target in the table frame.
    pub target: Vector3<f64>,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            k: 0.3,
            g_z: -9.81,
            flight_time: 0.7,
            restitution: 0.82,
            // Centre of the opponent half at ball-contact height.
            target: Vector3::new(0.685, 0.0, 0.02),
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.k >= 0.0) {
            return Err(("planner.k", ">= 0"));
        }
        if !(self.flight_time > 0.0) {
            return Err(("planner.flight_time", "> 0"));
        }
        if !(self.restitution > 0.0 && self.restitution <= 1.0) {
            return Err(("planner.restitution", "(0, 1]"));
        }
        if !(self.g_z.is_finite() && self.target.iter().all(|x| x.is_finite())) {
            return Err(("planner", "finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrikePlan {
    /// Racket face normal.
    pub n_hat: Vector3<f64>,
    /// Signed racket speed along `n_hat`.
    pub v_n: f64,
    /// Planned outgoing ball velocity.
    pub v_out: Vector3<f64>,
}

impl StrikePlan {
    pub fn racket_velocity(&self) -> Vector3<f64> {
        self.n_hat * self.v_n
    }
}

/// Launch velocity that reaches `p_target` after `flight_time` under
/// `v̇ = -k v + (0, 0, g_z)`.
pub fn desired_outgoing_velocity(
    p_hit: &Vector3<f64>,
    p_target: &Vector3<f64>,
    flight_time: f64,
    k: f64,
    g_z: f64,
) -> Result<Vector3<f64>, PlanError> {
    if !(flight_time > 0.0) {
        return Err(PlanError::NonPositiveFlightTime(flight_time));
    }
    let dp = p_target - p_hit;
    if k < LINEAR_DRAG_EPS {
        return Ok(Vector3::new(
            dp.x / flight_time,
            dp.y / flight_time,
            dp.z / flight_time - 0.5 * g_z * flight_time,
        ));
    }
    // 1 - e^{-k T_f}
    let decay = -(-k * flight_time).exp_m1();
    Ok(Vector3::new(
        dp.x * k / decay,
        dp.y * k / decay,
        g_z / k + (dp.z - g_z * flight_time / k) / (decay / k),
    ))
}

/// Racket normal along the required velocity change and the racket speed
/// that produces it.
pub fn racket_plan(
    v_in: &Vector3<f64>,
    v_out: &Vector3<f64>,
    restitution: f64,
) -> Result<StrikePlan, PlanError> {
    let dv = v_out - v_in;
    let norm = dv.norm();
    if norm < 1e-9 {
        return Err(PlanError::DegenerateCollision);
    }
    let n_hat = dv / norm;
    let v_in_n = v_in.dot(&n_hat);
    let v_out_n = v_out.dot(&n_hat);
    let v_n = v_in_n - (v_in_n - v_out_n) / (1.0 + restitution);
    Ok(StrikePlan {
        n_hat,
        v_n,
        v_out: *v_out,
    })
}

/// Forward impact model: the normal component follows the restitution law,
/// tangential components pass through.
pub fn apply_racket_collision(
    v_in: &Vector3<f64>,
    n_hat: &Vector3<f64>,
    v_n: f64,
    restitution: f64,
) -> Result<Vector3<f64>, PlanError> {
    let n = n_hat.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(PlanError::NonUnitNormal(n));
    }
    let v_in_n = v_in.dot(n_hat);
    let v_out_n = v_in_n - (1.0 + restitution) * (v_in_n - v_n);
    Ok(v_in + n_hat * (v_out_n - v_in_n))
}

/// Full strike plan for a predicted contact; `p_target` must be expressed
/// in the same frame as `p_hit`.
pub fn plan_strike(
    p_hit: &Vector3<f64>,
    v_in: &Vector3<f64>,
    p_target: &Vector3<f64>,
    params: &PlannerParams,
) -> Result<StrikePlan, PlanError> {
    let v_out = desired_outgoing_velocity(p_hit, p_target, params.flight_time, params.k, params.g_z)?;
    racket_plan(v_in, &v_out, params.restitution)
}
