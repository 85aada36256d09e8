//! Strike-point prediction: a coarse arrival-time search over the detection
//! window, local refinement on each new estimate, and decay of the
//! time-to-strike between measurements.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, BallState, DragModel, PhysicsParams, Trajectory};
use crate::frames::RigidTransform;

/// Axis-aligned admissible contact box in the origin frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrikeVolume {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for StrikeVolume {
    fn default() -> Self {
        Self {
            x_min: -0.15,
            x_max: 0.25,
            y_min: -0.8,
            y_max: 0.8,
            z_min: 0.3,
            z_max: 1.25,
        }
    }
}

impl StrikeVolume {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (self.x_min..=self.x_max).contains(&p.x)
            && (self.y_min..=self.y_max).contains(&p.y)
            && (self.z_min..=self.z_max).contains(&p.z)
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.x_min, self.x_max),
            p.y.clamp(self.y_min, self.y_max),
            p.z.clamp(self.z_min, self.z_max),
        )
    }

    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.x_min < self.x_max) {
            return Err(("predictor.volume.x_min", "< x_max"));
        }
        if !(self.y_min < self.y_max) {
            return Err(("predictor.volume.y_min", "< y_max"));
        }
        if !(self.z_min < self.z_max) {
            return Err(("predictor.volume.z_min", "< z_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub t_det_min: f64,
    pub t_det_max: f64,
    pub coarse_step: f64,
    /// Half-width of the refinement window.
    pub refine_half_window: f64,
    pub refine_step: f64,
    /// Strike-plane x in the origin frame.
    pub strike_plane_x: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Propagation step.
    pub sim_dt: f64,
    /// Per-axis bound on the predicted ball velocity when clipping.
    pub v_bound: f64,
    /// Clip decayed outputs to the strike volume and velocity bounds.
    pub clip_outputs: bool,
    pub model: DragModel,
    /// Table impacts in the propagation model.
    pub bounce_model: bool,
    pub volume: StrikeVolume,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            t_det_min: 0.1,
            t_det_max: 1.2,
            coarse_step: 0.01,
            refine_half_window: 0.05,
            refine_step: 0.002,
            strike_plane_x: 0.0,
            tau_min: 0.0,
            tau_max: 1.5,
            sim_dt: 0.001,
            v_bound: 12.0,
            clip_outputs: true,
            model: DragModel::Quadratic,
            bounce_model: true,
            volume: StrikeVolume::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.coarse_step > 0.0) {
            return Err(("predictor.coarse_step", "> 0"));
        }
        if !(self.refine_step > 0.0 && self.refine_step <= self.coarse_step) {
            return Err(("predictor.refine_step", "(0, coarse_step]"));
        }
        if !(self.t_det_min >= 0.0 && self.t_det_min <= self.t_det_max) {
            return Err(("predictor.t_det_min", "[0, t_det_max]"));
        }
        if !(self.tau_min >= 0.0 && self.tau_min <= self.tau_max) {
            return Err(("predictor.tau_min", "[0, tau_max]"));
        }
        if !(self.refine_half_window >= 0.0) {
            return Err(("predictor.refine_half_window", ">= 0"));
        }
        if !(self.sim_dt > 0.0) {
            return Err(("predictor.sim_dt", "> 0"));
        }
        if !(self.v_bound > 0.0) {
            return Err(("predictor.v_bound", "> 0"));
        }
        self.volume.validate()
    }
}

/// Strike command: time-to-strike and the predicted ball position and
/// incoming velocity at that time, in the origin frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrikePrediction {
    pub tau: f64,
    pub p_hit: Vector3<f64>,
    pub v_hit: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionStage {
    Initial,
    Refine,
    Decay,
}

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("ball is not on the incoming side of the strike plane (x = {x:.3} <= {plane:.3})")]
    PastStrikePlane { x: f64, plane: f64 },
    #[error("refinement requires a positive time-to-strike, got {0}")]
    NonPositiveTau(f64),
}

fn time_grid(start: f64, end: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((end - start) / step + 1e-9).floor().max(-1.0) as i64;
    (0..=n).map(move |j| start + j as f64 * step)
}

fn sample_in_origin(
    traj: &Trajectory,
    tau: f64,
    origin_t_table: &RigidTransform,
) -> (Vector3<f64>, Vector3<f64>) {
    let s = traj.at(tau).state;
    (
        origin_t_table.transform_point(&s.p),
        origin_t_table.transform_vector(&s.v),
    )
}

/// Coarse search for the feasible arrival time closest to the strike plane.
///
/// Gated on the ball approaching: `v_x < 0` and `p_x > c_s,x` in the origin
/// frame. Ties go to the earlier time.
pub fn initial_search(
    ball: &BallState,
    origin_t_table: &RigidTransform,
    cfg: &PredictorConfig,
    physics: &PhysicsParams,
) -> Option<StrikePrediction> {
    let p_o = origin_t_table.transform_point(&ball.p);
    let v_o = origin_t_table.transform_vector(&ball.v);
    if !(v_o.x < 0.0 && p_o.x > cfg.strike_plane_x) {
        return None;
    }
    let traj = dynamics::propagate_with(ball, cfg.t_det_max, cfg.sim_dt, physics, cfg.model, cfg.bounce_model);
    let mut best: Option<(f64, StrikePrediction)> = None;
    for tau in time_grid(cfg.t_det_min, cfg.t_det_max, cfg.coarse_step) {
        let (p, v) = sample_in_origin(&traj, tau, origin_t_table);
        if !cfg.volume.contains(&p) {
            continue;
        }
        let residual = (p.x - cfg.strike_plane_x).abs();
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((
                residual,
                StrikePrediction {
                    tau,
                    p_hit: p,
                    v_hit: v,
                },
            ));
        }
    }
    best.map(|(_, pred)| pred)
}

/// Re-solves the arrival time on `[τ - W, τ + W]` from a fresh estimate.
/// Volume membership is not enforced here.
pub fn refine(
    prev: &StrikePrediction,
    ball: &BallState,
    origin_t_table: &RigidTransform,
    cfg: &PredictorConfig,
    physics: &PhysicsParams,
) -> Result<StrikePrediction, PredictorError> {
    if !(prev.tau > 0.0) {
        return Err(PredictorError::NonPositiveTau(prev.tau));
    }
    let x = origin_t_table.transform_point(&ball.p).x;
    if x <= cfg.strike_plane_x {
        return Err(PredictorError::PastStrikePlane {
            x,
            plane: cfg.strike_plane_x,
        });
    }
    let lo = prev.tau - cfg.refine_half_window;
    let hi = prev.tau + cfg.refine_half_window;
    let traj = dynamics::propagate_with(ball, hi, cfg.sim_dt, physics, cfg.model, cfg.bounce_model);
    let mut best: Option<(f64, StrikePrediction)> = None;
    for tau in time_grid(lo, hi, cfg.refine_step).filter(|t| *t >= 0.0) {
        let (p, v) = sample_in_origin(&traj, tau, origin_t_table);
        let residual = (p.x - cfg.strike_plane_x).abs();
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((
                residual,
                StrikePrediction {
                    tau,
                    p_hit: p,
                    v_hit: v,
                },
            ));
        }
    }
    // The window always holds at least τ itself.
    Ok(best.map(|(_, p)| p).unwrap_or(*prev))
}

/// Advances the time-to-strike by one control tick. `None` once it turns
/// negative, which ends the strike phase.
pub fn decay_and_clip(
    prev: &StrikePrediction,
    control_dt: f64,
    cfg: &PredictorConfig,
) -> Option<StrikePrediction> {
    let tau = prev.tau - control_dt;
    if tau < 0.0 {
        return None;
    }
    let mut out = StrikePrediction {
        tau: tau.clamp(cfg.tau_min, cfg.tau_max),
        ..*prev
    };
    if cfg.clip_outputs {
        out.p_hit = cfg.volume.clamp(&out.p_hit);
        out.v_hit = out.v_hit.map(|c| c.clamp(-cfg.v_bound, cfg.v_bound));
    }
    Some(out)
}
