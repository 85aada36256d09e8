//! Ball flight and table bounce models.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::frames::FrameId;

/// Kinematic ball state in a named frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub frame: FrameId,
}

impl BallState {
    pub fn new(p: Vector3<f64>, v: Vector3<f64>, frame: FrameId) -> Self {
        Self { p, v, frame }
    }

    pub fn in_table(p: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self::new(p, v, FrameId::Table)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DragModel {
    /// `a = -k‖v‖v - g ẑ`
    #[default]
    Quadratic,
    /// `a = -k v - g ẑ`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    /// Quadratic drag coefficient, 1/m.
    pub k_quadratic: f64,
    /// Linear drag coefficient, 1/s.
    pub k_linear: f64,
    /// Gravity magnitude, acting along -z.
    pub g: f64,
    /// Horizontal restitution at the table.
    pub c_h: f64,
    /// Vertical restitution at the table.
    pub c_v: f64,
    /// Height of the ball centre at table contact.
    pub z_c: f64,
    /// Table half-length along x.
    pub half_length: f64,
    /// Table half-width along y.
    pub half_width: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            k_quadratic: 0.14,
            k_linear: 0.3,
            g: 9.81,
            c_h: 0.75,
            c_v: 0.87,
            z_c: 0.02,
            half_length: 1.37,
            half_width: 0.7625,
        }
    }
}

impl PhysicsParams {
    pub fn drag(&self, model: DragModel) -> f64 {
        match model {
            DragModel::Quadratic => self.k_quadratic,
            DragModel::Linear => self.k_linear,
        }
    }

    /// Same parameters with both drag coefficients zeroed.
    pub fn drag_free(mut self) -> Self {
        self.k_quadratic = 0.0;
        self.k_linear = 0.0;
        self
    }

    /// Checks the parameter invariants, returning `(field, bound)` on failure.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        let finite = [
            self.k_quadratic,
            self.k_linear,
            self.g,
            self.c_h,
            self.c_v,
            self.z_c,
            self.half_length,
            self.half_width,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(("physics", "finite values"));
        }
        if self.k_quadratic < 0.0 {
            return Err(("physics.k_quadratic", ">= 0"));
        }
        if self.k_linear < 0.0 {
            return Err(("physics.k_linear", ">= 0"));
        }
        if self.g < 0.0 {
            return Err(("physics.g", ">= 0"));
        }
        if !(self.c_h > 0.0 && self.c_h <= 1.0) {
            return Err(("physics.c_h", "(0, 1]"));
        }
        if !(self.c_v > 0.0 && self.c_v <= 1.0) {
            return Err(("physics.c_v", "(0, 1]"));
        }
        if self.half_length <= 0.0 {
            return Err(("physics.half_length", "> 0"));
        }
        if self.half_width <= 0.0 {
            return Err(("physics.half_width", "> 0"));
        }
        Ok(())
    }
}

pub fn accel(model: DragModel, v: &Vector3<f64>, params: &PhysicsParams) -> Vector3<f64> {
    let gravity = Vector3::new(0.0, 0.0, -params.g);
    match model {
        DragModel::Quadratic => -params.k_quadratic * v.norm() * v + gravity,
        DragModel::Linear => -params.k_linear * v + gravity,
    }
}

/// One step of the flight map with acceleration frozen at the pre-step
/// velocity. No bounce check.
pub fn step_free_flight(
    s: &BallState,
    dt: f64,
    params: &PhysicsParams,
    model: DragModel,
) -> BallState {
    let a = accel(model, &s.v, params);
    BallState {
        p: s.p + s.v * dt + 0.5 * a * dt * dt,
        v: s.v + a * dt,
        frame: s.frame,
    }
}

/// Whether the table-collision gate holds for `s`.
pub fn bounce_gate(s: &BallState, params: &PhysicsParams) -> bool {
    s.p.x.abs() < params.half_length
        && s.p.y.abs() < params.half_width
        && s.p.z <= params.z_c
        && s.v.z < 0.0
}

/// Reflects the ball off the table if the collision gate holds.
pub fn apply_bounce(s: &BallState, params: &PhysicsParams) -> (BallState, bool) {
    if !bounce_gate(s, params) {
        return (*s, false);
    }
    let out = BallState {
        p: Vector3::new(s.p.x, s.p.y, 2.0 * params.z_c - s.p.z),
        v: Vector3::new(params.c_h * s.v.x, params.c_h * s.v.y, -params.c_v * s.v.z),
        frame: s.frame,
    };
    (out, true)
}

/// Free-flight step followed by the bounce check.
pub fn step(s: &BallState, dt: f64, params: &PhysicsParams, model: DragModel) -> (BallState, bool) {
    apply_bounce(&step_free_flight(s, dt, params, model), params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub state: BallState,
    /// A table bounce was applied on the step that produced this sample.
    pub bounced: bool,
}

/// Uniformly sampled propagated flight.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples produced by a bounce step.
    pub fn bounce_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.bounced)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn first_bounce(&self) -> Option<&TrajectorySample> {
        self.samples.iter().find(|s| s.bounced)
    }

    /// Sample nearest to time `t` (clamped to the trajectory span).
    pub fn at(&self, t: f64) -> &TrajectorySample {
        let i = ((t / self.dt).round().max(0.0) as usize).min(self.samples.len() - 1);
        &self.samples[i]
    }

    /// Samples whose ball centre is below the table surface plane.
    pub fn below_table(&self) -> impl Iterator<Item = &TrajectorySample> {
        self.samples.iter().filter(|s| s.state.p.z < 0.0)
    }
}

/// Repeated flight step plus bounce from `t = 0` to `horizon`;
/// `floor(horizon/dt) + 1` samples.
pub fn propagate(
    s: &BallState,
    horizon: f64,
    dt: f64,
    params: &PhysicsParams,
    model: DragModel,
) -> Trajectory {
    propagate_with(s, horizon, dt, params, model, true)
}

/// [`propagate`] with the table impact optionally disabled.
pub fn propagate_with(
    s: &BallState,
    horizon: f64,
    dt: f64,
    params: &PhysicsParams,
    model: DragModel,
    bounce: bool,
) -> Trajectory {
    assert!(dt > 0.0, "propagation step must be positive");
    let steps = (horizon.max(0.0) / dt + 1e-9).floor() as usize;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut cur = *s;
    samples.push(TrajectorySample {
        t: 0.0,
        state: cur,
        bounced: false,
    });
    for i in 1..=steps {
        let (next, bounced) = if bounce {
            step(&cur, dt, params, model)
        } else {
            (step_free_flight(&cur, dt, params, model), false)
        };
        cur = next;
        samples.push(TrajectorySample {
            t: i as f64 * dt,
            state: cur,
            bounced,
        });
    }
    Trajectory { dt, samples }
}

/// Below this linear drag coefficient the drag-free limit formulas are used.
pub const LINEAR_DRAG_EPS: f64 = 1e-6;

/// Exact position after `t` seconds of `v̇ = -k v + g`, `g = (0, 0, g_z)`.
pub fn analytic_linear_flight(
    p0: &Vector3<f64>,
    v0: &Vector3<f64>,
    t: f64,
    k: f64,
    g_z: f64,
) -> Vector3<f64> {
    let g = Vector3::new(0.0, 0.0, g_z);
    if k < LINEAR_DRAG_EPS {
        return p0 + v0 * t + 0.5 * g * t * t;
    }
    // (1 - e^{-kt}) / k
    let decay = -(-k * t).exp_m1() / k;
    p0 + g * (t / k) + (v0 - g / k) * decay
}
