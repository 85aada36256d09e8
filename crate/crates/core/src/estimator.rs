//! Adaptive extended Kalman filter for position-only ball measurements.
//!
//! The process model is the drag flight map followed by the table bounce
//! check; measurement noise is isotropic with a variance that grows linearly
//! in the camera-to-ball distance. Update order:
//!
//! 1. uninitialized: state from the measurement and the velocity prior;
//! 2. gap since the last accepted update above `dt_max`: re-initialize;
//! 3. predict (flight + bounce), `P ← F P Fᵀ + Q`;
//! 4. return detected (`p̂_x - z_x > τ_x` and `v̂_x > 0` on the predicted
//!    state): re-initialize;
//! 5. Kalman correction with `R(d)`.
//!
//! Predictions over gaps longer than [`EstimatorParams::max_substep`] are
//! split into equal substeps with the Jacobians chained.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, BallState, DragModel, PhysicsParams};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EstimatorError {
    #[error("stale measurement at t = {t} (last accepted update at {t_last})")]
    StaleMeasurement { t: f64, t_last: f64 },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("camera distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("measurement contains non-finite values")]
    NonFinite,
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorParams {
    /// Base position process variance per nominal step, m².
    pub q_pos_base: f64,
    /// Base velocity process variance per nominal step, (m/s)².
    pub q_vel_base: f64,
    /// Nominal step, the inverse of the camera capture rate.
    pub dt0: f64,
    /// Baseline observation variance per axis, m².
    pub r_base: f64,
    /// Distance gain of the observation variance, 1/m.
    pub beta: f64,
    /// Gap after which the filter re-initializes.
    pub dt_max: f64,
    /// Return-detection threshold on `p̂_x - z_x`.
    pub tau_x: f64,
    pub v_init: Vector3<f64>,
    /// Diagonal of the initial covariance (position then velocity).
    pub p_init_diag: [f64; 6],
    /// Longest single prediction step; longer gaps are substepped.
    pub max_substep: f64,
    pub model: DragModel,
    /// Table bounce inside the process model.
    pub bounce_model: bool,
    /// Chain the reflection derivative into the covariance transition when
    /// a bounce fires inside a prediction.
    pub bounce_jacobian: bool,
    /// Distance-dependent observation noise; when off, `R = R_base I`.
    pub adaptive_noise: bool,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            q_pos_base: 3e-7,
            q_vel_base: 3e-5,
            dt0: 1.0 / 60.0,
            r_base: 1e-5,
            beta: 3.0,
            dt_max: 0.2,
            tau_x: 0.3,
            v_init: Vector3::new(-4.5, 0.0, 1.0),
            p_init_diag: [1e-2, 1e-2, 1e-2, 4.0, 4.0, 4.0],
            max_substep: 0.002,
            model: DragModel::Quadratic,
            bounce_model: true,
            bounce_jacobian: false,
            adaptive_noise: true,
        }
    }
}

impl EstimatorParams {
    pub fn p_init(&self) -> Matrix6<f64> {
        Matrix6::from_diagonal(&Vector6::from_column_slice(&self.p_init_diag))
    }

    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.q_pos_base > 0.0) {
            return Err(("estimator.q_pos_base", "> 0"));
        }
        if !(self.q_vel_base > 0.0) {
            return Err(("estimator.q_vel_base", "> 0"));
        }
        if !(self.dt0 > 0.0) {
            return Err(("estimator.dt0", "> 0"));
        }
        if !(self.r_base > 0.0) {
            return Err(("estimator.r_base", "> 0"));
        }
        if !(self.beta >= 0.0) {
            return Err(("estimator.beta", ">= 0"));
        }
        if !(self.dt_max > self.dt0) {
            return Err(("estimator.dt_max", "> dt0"));
        }
        if !self.tau_x.is_finite() {
            return Err(("estimator.tau_x", "finite"));
        }
        if !self.v_init.iter().all(|x| x.is_finite()) {
            return Err(("estimator.v_init", "finite"));
        }
        if !self.p_init_diag.iter().all(|&x| x > 0.0 && x.is_finite()) {
            return Err(("estimator.p_init_diag", "> 0"));
        }
        if !(self.max_substep > 0.0) {
            return Err(("estimator.max_substep", "> 0"));
        }
        Ok(())
    }
}

/// Position measurement in the table frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub z: Vector3<f64>,
    pub t: f64,
    /// Camera-to-ball distance, m.
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
    pub t_last: f64,
    pub initialized: bool,
}

impl Default for FilterState {
    fn default() -> Self {
        Self {
            x: Vector6::zeros(),
            p: Matrix6::zeros(),
            t_last: f64::NEG_INFINITY,
            initialized: false,
        }
    }
}

impl FilterState {
    pub fn ball(&self) -> BallState {
        BallState::in_table(self.x.fixed_rows::<3>(0).into(), self.x.fixed_rows::<3>(3).into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterEvent {
    Initialized,
    ResetStale,
    ResetReturn,
    Corrected,
}

impl FilterEvent {
    pub fn is_reinit(self) -> bool {
        !matches!(self, FilterEvent::Corrected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub estimate: BallState,
    pub event: FilterEvent,
    /// Normalized innovation squared of the correction step.
    pub nis: Option<f64>,
}

fn checked_ratio(dt: f64, params: &EstimatorParams) -> Result<f64, EstimatorError> {
    if !(dt > 0.0) {
        return Err(EstimatorError::NonPositiveStep(dt));
    }
    Ok(dt / params.dt0)
}

/// `diag(q_pos×3, q_vel×3)` scaled to the step `dt`.
pub fn process_noise(dt: f64, params: &EstimatorParams) -> Result<Matrix6<f64>, EstimatorError> {
    let ratio = checked_ratio(dt, params)?;
    let q_pos = params.q_pos_base * ratio * ratio;
    let q_vel = params.q_vel_base * ratio;
    Ok(Matrix6::from_diagonal(&Vector6::new(
        q_pos, q_pos, q_pos, q_vel, q_vel, q_vel,
    )))
}

/// `R_base (1 + β d) I₃`.
pub fn measurement_noise(d: f64, params: &EstimatorParams) -> Result<Matrix3<f64>, EstimatorError> {
    if d < 0.0 {
        return Err(EstimatorError::NegativeDistance(d));
    }
    Ok(Matrix3::identity() * (params.r_base * (1.0 + params.beta * d)))
}

/// Jacobian of the acceleration with respect to velocity.
fn accel_jacobian(v: &Vector3<f64>, k: f64, model: DragModel) -> Matrix3<f64> {
    match model {
        DragModel::Linear => -k * Matrix3::identity(),
        DragModel::Quadratic => {
            let speed = v.norm();
            if speed == 0.0 {
                Matrix3::zeros()
            } else {
                -k * (Matrix3::identity() * speed + v * v.transpose() / speed)
            }
        }
    }
}

/// Analytic Jacobian of the one-step flight map (no bounce branch).
pub fn jacobian(
    x: &Vector6<f64>,
    dt: f64,
    model: DragModel,
    physics: &PhysicsParams,
) -> Matrix6<f64> {
    let v: Vector3<f64> = x.fixed_rows::<3>(3).into();
    let ja = accel_jacobian(&v, physics.drag(model), model);
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * dt + ja * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() + ja * dt));
    f
}

/// Derivative of the table reflection map.
pub fn bounce_jacobian(physics: &PhysicsParams) -> Matrix6<f64> {
    Matrix6::from_diagonal(&Vector6::new(
        1.0,
        1.0,
        -1.0,
        physics.c_h,
        physics.c_h,
        -physics.c_v,
    ))
}

fn to_state(x: &Vector6<f64>) -> BallState {
    BallState::in_table(x.fixed_rows::<3>(0).into(), x.fixed_rows::<3>(3).into())
}

fn from_state(s: &BallState) -> Vector6<f64> {
    Vector6::new(s.p.x, s.p.y, s.p.z, s.v.x, s.v.y, s.v.z)
}

fn substeps(dt: f64, params: &EstimatorParams) -> (usize, f64) {
    let n = ((dt / params.max_substep) - 1e-9).ceil().max(1.0) as usize;
    (n, dt / n as f64)
}

/// Process-model mean over `dt`, returning the chained Jacobian and whether
/// a bounce was applied.
pub fn predict_mean(
    x: &Vector6<f64>,
    dt: f64,
    params: &EstimatorParams,
    physics: &PhysicsParams,
) -> (Vector6<f64>, Matrix6<f64>, bool) {
    let (n, h) = substeps(dt, params);
    let mut state = to_state(x);
    let mut f_total = Matrix6::identity();
    let mut bounced = false;
    for _ in 0..n {
        let f = jacobian(&from_state(&state), h, params.model, physics);
        f_total = f * f_total;
        state = dynamics::step_free_flight(&state, h, physics, params.model);
        if params.bounce_model {
            let (s, b) = dynamics::apply_bounce(&state, physics);
            state = s;
            bounced |= b;
            if b && params.bounce_jacobian {
                f_total = bounce_jacobian(physics) * f_total;
            }
        }
    }
    (from_state(&state), f_total, bounced)
}

fn reinit(m: &Measurement, params: &EstimatorParams, event: FilterEvent) -> (FilterState, UpdateOutcome) {
    let x = Vector6::new(
        m.z.x,
        m.z.y,
        m.z.z,
        params.v_init.x,
        params.v_init.y,
        params.v_init.z,
    );
    let state = FilterState {
        x,
        p: params.p_init(),
        t_last: m.t,
        initialized: true,
    };
    let outcome = UpdateOutcome {
        estimate: state.ball(),
        event,
        nis: None,
    };
    (state, outcome)
}

const H: Matrix3x6<f64> = Matrix3x6::new(
    1.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
    0.0, 1.0, 0.0, 0.0, 0.0, 0.0, //
    0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
);

/// One filter step. On error the caller's state is left untouched.
pub fn update(
    f: &FilterState,
    m: &Measurement,
    params: &EstimatorParams,
    physics: &PhysicsParams,
) -> Result<(FilterState, UpdateOutcome), EstimatorError> {
    if !(m.z.iter().all(|x| x.is_finite()) && m.t.is_finite() && m.d.is_finite()) {
        return Err(EstimatorError::NonFinite);
    }
    if m.d < 0.0 {
        return Err(EstimatorError::NegativeDistance(m.d));
    }
    if !f.initialized {
        return Ok(reinit(m, params, FilterEvent::Initialized));
    }
    if m.t <= f.t_last {
        return Err(EstimatorError::StaleMeasurement {
            t: m.t,
            t_last: f.t_last,
        });
    }
    let dt = m.t - f.t_last;
    if dt > params.dt_max {
        return Ok(reinit(m, params, FilterEvent::ResetStale));
    }

    let (x_pred, f_jac, _) = predict_mean(&f.x, dt, params, physics);
    let p_pred = f_jac * f.p * f_jac.transpose() + process_noise(dt, params)?;

    if x_pred[0] - m.z.x > params.tau_x && x_pred[3] > 0.0 {
        return Ok(reinit(m, params, FilterEvent::ResetReturn));
    }

    let d = if params.adaptive_noise { m.d } else { 0.0 };
    let r = measurement_noise(d, params)?;
    let innovation = m.z - H * x_pred;
    let s = H * p_pred * H.transpose() + r;
    let s_chol = s.cholesky().ok_or(EstimatorError::SingularInnovation)?;
    let s_inv = s_chol.inverse();
    let k = p_pred * H.transpose() * s_inv;
    let x_new = x_pred + k * innovation;
    let i_kh = Matrix6::identity() - k * H;
    let p_joseph = i_kh * p_pred * i_kh.transpose() + k * r * k.transpose();
    let p_new = (p_joseph + p_joseph.transpose()) * 0.5;
    let nis = (innovation.transpose() * s_inv * innovation)[(0, 0)];

    let state = FilterState {
        x: x_new,
        p: p_new,
        t_last: m.t,
        initialized: true,
    };
    Ok((
        state,
        UpdateOutcome {
            estimate: state.ball(),
            event: FilterEvent::Corrected,
            nis: Some(nis),
        },
    ))
}

/// Owned filter instance.
#[derive(Debug, Clone)]
pub struct AdaptiveEkf {
    params: EstimatorParams,
    physics: PhysicsParams,
    state: FilterState,
}

impl AdaptiveEkf {
    pub fn new(params: EstimatorParams, physics: PhysicsParams) -> Self {
        Self {
            params,
            physics,
            state: FilterState::default(),
        }
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn update(&mut self, m: &Measurement) -> Result<UpdateOutcome, EstimatorError> {
        let (state, outcome) = update(&self.state, m, &self.params, &self.physics)?;
        self.state = state;
        Ok(outcome)
    }

    pub fn reset(&mut self) {
        self.state = FilterState::default();
    }
}

/// Filter output for one replayed measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    pub t: f64,
    /// Estimate after this row; the previous one when the row was rejected.
    pub estimate: Option<BallState>,
    pub event: Option<FilterEvent>,
    pub rejected: Option<EstimatorError>,
}

/// Runs a fresh filter over a measurement log, one output per input row.
pub fn replay(
    params: EstimatorParams,
    physics: PhysicsParams,
    measurements: &[Measurement],
) -> Vec<ReplayStep> {
    let mut ekf = AdaptiveEkf::new(params, physics);
    measurements
        .iter()
        .map(|m| match ekf.update(m) {
            Ok(out) => ReplayStep {
                t: m.t,
                estimate: Some(out.estimate),
                event: Some(out.event),
                rejected: None,
            },
            Err(e) => ReplayStep {
                t: m.t,
                estimate: ekf.state().initialized.then(|| ekf.state().ball()),
                event: None,
                rejected: Some(e),
            },
        })
        .collect()
}
