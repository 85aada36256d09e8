//! Closed-loop synthetic rally harness.
//!
//! Each episode launches a ball from the far side, senses it at the camera
//! rate with distance-dependent noise, filters, predicts and plans at the
//! control rate, executes the strike with Gaussian execution error and then
//! flies the returned ball to its first bounce.
//!
//! Table-frame quantities are used for the ground truth and the filter;
//! prediction and planning happen in the origin frame.

use std::ops::Range;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, BallState, DragModel, PhysicsParams, Trajectory};
use crate::estimator::{AdaptiveEkf, EstimatorParams, FilterEvent, Measurement};
use crate::frames::{CalibrationSet, RigidTransform};
use crate::motionlib::{self, MotionLibrary};
use crate::planner::{self, PlannerParams, StrikePlan};
use crate::predictor::{self, PredictionStage, PredictorConfig, StrikePrediction};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("no feasible launch after {0} attempts")]
    NoFeasibleLaunch(usize),
    #[error("invalid scenario: {field} must be {bound}")]
    InvalidConfig {
        field: &'static str,
        bound: &'static str,
    },
}

/// Inclusive sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

/// Launch distribution in the table frame. The launch velocity is aimed at a
/// landing point drawn from the window with the drag-free ballistic solution;
/// the drag-affected truth is then accepted or rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaunchConfig {
    pub x0: Span,
    pub y0: Span,
    pub z0: Span,
    pub vx: Span,
    pub landing_x: Span,
    pub landing_y: Span,
    pub max_attempts: usize,
    /// Length of the ground-truth trajectory.
    pub horizon: f64,
    /// Launches whose ball passes this close to a table edge below
    /// `z_c + edge_clearance` are rejected; edge impacts are not modelled.
    pub edge_clearance: f64,
}

impl Default for LaunchConfig {
    fn default() -> Self {
        Self {
            x0: Span::new(1.4, 1.8),
            y0: Span::new(-0.3, 0.3),
            z0: Span::new(0.25, 0.45),
            vx: Span::new(-5.5, -3.5),
            landing_x: Span::new(-1.2, -0.3),
            landing_y: Span::new(-0.6, 0.6),
            max_attempts: 1000,
            horizon: 3.0,
            edge_clearance: 0.02,
        }
    }
}

/// Camera model used to emulate egocentric sensing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub rate_hz: f64,
    pub drop_prob: f64,
    /// Camera centre in the table frame; the optical axis is +x.
    pub camera: Vector3<f64>,
    /// Half-angle of the viewing cone, rad.
    pub fov_half_angle: f64,
    pub min_range: f64,
    pub r_base: f64,
    pub beta: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            rate_hz: 60.0,
            drop_prob: 0.02,
            camera: Vector3::new(-1.9, 0.0, 0.55),
            fov_half_angle: 55f64.to_radians(),
            min_range: 0.1,
            r_base: 1e-5,
            beta: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecError {
    pub sigma_p: f64,
    pub sigma_v: f64,
    pub sigma_angle: f64,
}

impl Default for ExecError {
    fn default() -> Self {
        Self {
            sigma_p: 0.01,
            sigma_v: 0.1,
            sigma_angle: 0.005,
        }
    }
}

impl ExecError {
    pub const fn zero() -> Self {
        Self {
            sigma_p: 0.0,
            sigma_v: 0.0,
            sigma_angle: 0.0,
        }
    }

    /// Error level of an on-board camera deployment.
    pub const fn ego() -> Self {
        Self {
            sigma_p: 0.065,
            sigma_v: 0.3,
            sigma_angle: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommandNoise {
    pub sigma_max: f64,
    pub tau_ref: f64,
}

impl Default for CommandNoise {
    fn default() -> Self {
        Self {
            sigma_max: 0.0,
            tau_ref: 0.5,
        }
    }
}

impl CommandNoise {
    /// `σ(τ) = σ_max · min(τ / τ_ref, 1)`
    pub fn sigma(&self, tau: f64) -> f64 {
        self.sigma_max * (tau.max(0.0) / self.tau_ref).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_collision: bool,
    pub no_adaptive_noise: bool,
    pub zero_init: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoCollision,
    NoAdaptiveNoise,
    ZeroInit,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [
        Ablation::NoCollision,
        Ablation::NoAdaptiveNoise,
        Ablation::ZeroInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoCollision => "no-collision",
            Ablation::NoAdaptiveNoise => "no-adaptive-noise",
            Ablation::ZeroInit => "zero-init",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s || a.name().replace('-', "_") == s)
    }
}

impl Ablations {
    pub fn with(mut self, a: Ablation) -> Self {
        match a {
            Ablation::NoCollision => self.no_collision = true,
            Ablation::NoAdaptiveNoise => self.no_adaptive_noise = true,
            Ablation::ZeroInit => self.zero_init = true,
        }
        self
    }

    pub fn apply(&self, mut est: EstimatorParams) -> EstimatorParams {
        if self.no_collision {
            est.bounce_model = false;
        }
        if self.no_adaptive_noise {
            est.adaptive_noise = false;
        }
        if self.zero_init {
            est.v_init = Vector3::zeros();
        }
        est
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuccessThresholds {
    pub e_p: f64,
    pub e_o: f64,
    pub e_v: f64,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        Self {
            e_p: 0.04,
            e_o: 0.05,
            e_v: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_episodes: usize,
    pub launch: LaunchConfig,
    pub sensor: SensorConfig,
    pub control_rate_hz: f64,
    /// World integration substeps per control tick.
    pub world_substeps: usize,
    /// Flight model of the simulated world.
    pub world_model: DragModel,
    pub exec_error: ExecError,
    pub command_noise: CommandNoise,
    pub ablations: Ablations,
    pub contact_radius: f64,
    /// Added to the commanded contact time.
    pub latency: f64,
    /// Minimum corrected updates before the first prediction.
    pub min_corrections: usize,
    /// Time-to-strike bin width of the convergence curves.
    pub bin_width: f64,
    pub thresholds: SuccessThresholds,
    /// Body anchor in the origin frame used for motion matching.
    pub motion_anchor: Vector3<f64>,
    /// Radius of the matching perturbation ball.
    pub match_eps: f64,
    /// Time past the strike plane after which a missed episode ends.
    pub miss_timeout: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_episodes: 200,
            launch: LaunchConfig::default(),
            sensor: SensorConfig::default(),
            control_rate_hz: 120.0,
            world_substeps: 20,
            world_model: DragModel::Quadratic,
            exec_error: ExecError::default(),
            command_noise: CommandNoise::default(),
            ablations: Ablations::default(),
            contact_radius: 0.09,
            latency: 0.0,
            min_corrections: 3,
            bin_width: 0.1,
            thresholds: SuccessThresholds::default(),
            motion_anchor: Vector3::new(-0.3, 0.0, 0.95),
            match_eps: 0.02,
            miss_timeout: 0.1,
        }
    }
}

impl ScenarioConfig {
    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn world_dt(&self) -> f64 {
        self.control_dt() / self.world_substeps as f64
    }

    /// Control ticks per camera frame.
    pub fn sense_every(&self) -> usize {
        (self.control_rate_hz / self.sensor.rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field, bound| Err(SimError::InvalidConfig { field, bound });
        if !(self.control_rate_hz > 0.0 && self.control_rate_hz.is_finite()) {
            return bad("scenario.control_rate_hz", "> 0");
        }
        if !(self.sensor.rate_hz > 0.0 && self.sensor.rate_hz <= self.control_rate_hz) {
            return bad("scenario.sensor.rate_hz", "(0, control_rate_hz]");
        }
        let ratio = self.control_rate_hz / self.sensor.rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("scenario.sensor.rate_hz", "an integer divisor of control_rate_hz");
        }
        if self.world_substeps == 0 {
            return bad("scenario.world_substeps", ">= 1");
        }
        if !(0.0..=1.0).contains(&self.sensor.drop_prob) {
            return bad("scenario.sensor.drop_prob", "[0, 1]");
        }
        if !(self.sensor.r_base >= 0.0) {
            return bad("scenario.sensor.r_base", ">= 0");
        }
        if !(self.sensor.beta >= 0.0) {
            return bad("scenario.sensor.beta", ">= 0");
        }
        if !(self.sensor.fov_half_angle > 0.0 && self.sensor.fov_half_angle <= std::f64::consts::PI) {
            return bad("scenario.sensor.fov_half_angle", "(0, pi]");
        }
        let e = &self.exec_error;
        if !(e.sigma_p >= 0.0 && e.sigma_v >= 0.0 && e.sigma_angle >= 0.0) {
            return bad("scenario.exec_error", "non-negative deviations");
        }
        if !(self.command_noise.sigma_max >= 0.0) {
            return bad("scenario.command_noise.sigma_max", ">= 0");
        }
        if !(self.command_noise.tau_ref > 0.0) {
            return bad("scenario.command_noise.tau_ref", "> 0");
        }
        if !(self.contact_radius > 0.0) {
            return bad("scenario.contact_radius", "> 0");
        }
        if !(self.latency.is_finite()) {
            return bad("scenario.latency", "finite");
        }
        if !(self.bin_width > 0.0) {
            return bad("scenario.bin_width", "> 0");
        }
        if !(self.match_eps >= 0.0) {
            return bad("scenario.match_eps", ">= 0");
        }
        if !(self.miss_timeout >= 0.0) {
            return bad("scenario.miss_timeout", ">= 0");
        }
        let l = &self.launch;
        let spans = [
            (l.x0, "scenario.launch.x0"),
            (l.y0, "scenario.launch.y0"),
            (l.z0, "scenario.launch.z0"),
            (l.vx, "scenario.launch.vx"),
            (l.landing_x, "scenario.launch.landing_x"),
            (l.landing_y, "scenario.launch.landing_y"),
        ];
        for (span, field) in spans {
            if !span.is_valid() {
                return bad(field, "a finite range with min <= max");
            }
        }
        if !(l.vx.max < 0.0) {
            return bad("scenario.launch.vx", "< 0 (toward the robot)");
        }
        if l.max_attempts == 0 {
            return bad("scenario.launch.max_attempts", ">= 1");
        }
        if !(l.horizon > 0.0) {
            return bad("scenario.launch.horizon", "> 0");
        }
        if !(l.edge_clearance >= 0.0) {
            return bad("scenario.launch.edge_clearance", ">= 0");
        }
        Ok(())
    }
}

/// Everything an episode needs besides its index.
#[derive(Debug, Clone)]
pub struct SimSetup {
    pub seed: u64,
    pub physics: PhysicsParams,
    pub calibration: CalibrationSet,
    pub estimator: EstimatorParams,
    pub predictor: PredictorConfig,
    pub planner: PlannerParams,
    pub scenario: ScenarioConfig,
}

impl SimSetup {
    pub fn new(seed: u64, scenario: ScenarioConfig) -> Self {
        let physics = PhysicsParams::default();
        Self {
            seed,
            physics,
            calibration: CalibrationSet::nominal(crate::frames::DEFAULT_D_ORIG, physics.half_length),
            estimator: EstimatorParams::default(),
            predictor: PredictorConfig::default(),
            planner: PlannerParams::default(),
            scenario,
        }
    }

    /// Filter parameters after the scenario's ablation switches.
    pub fn effective_estimator(&self) -> EstimatorParams {
        self.scenario.ablations.apply(self.estimator)
    }

    /// The predictor shares the filter's flight model, so removing the
    /// table impact removes it from both.
    pub fn effective_predictor(&self) -> PredictorConfig {
        PredictorConfig {
            bounce_model: self.predictor.bounce_model && !self.scenario.ablations.no_collision,
            ..self.predictor
        }
    }

    fn rng(&self, index: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 * 2 + purpose);
        rng
    }

    /// Independent random stream for the launch of episode `index`.
    pub fn launch_rng(&self, index: usize) -> ChaCha8Rng {
        self.rng(index, 0)
    }

    /// Independent random stream for sensing and execution of episode `index`.
    pub fn noise_rng(&self, index: usize) -> ChaCha8Rng {
        self.rng(index, 1)
    }
}

/// Accepted launch with its ground truth.
#[derive(Debug, Clone)]
pub struct Launch {
    pub initial: BallState,
    pub truth: Trajectory,
    pub bounce: Vector3<f64>,
    /// Time and state at which the truth crosses the strike plane.
    pub crossing_time: f64,
    pub crossing: BallState,
}

fn to_origin(o_t_t: &RigidTransform, s: &BallState) -> (Vector3<f64>, Vector3<f64>) {
    (o_t_t.transform_point(&s.p), o_t_t.transform_vector(&s.v))
}

/// First incoming crossing of the strike plane, linearly interpolated.
fn plane_crossing(
    truth: &Trajectory,
    o_t_t: &RigidTransform,
    plane_x: f64,
) -> Option<(f64, BallState)> {
    truth.samples.windows(2).find_map(|w| {
        let (p0, v0) = to_origin(o_t_t, &w[0].state);
        let (p1, _) = to_origin(o_t_t, &w[1].state);
        if v0.x < 0.0 && p0.x > plane_x && p1.x <= plane_x {
            let a = (p0.x - plane_x) / (p0.x - p1.x);
            let s0 = &w[0].state;
            let s1 = &w[1].state;
            let state = BallState::in_table(s0.p + (s1.p - s0.p) * a, s0.v + (s1.v - s0.v) * a);
            Some((w[0].t + a * (w[1].t - w[0].t), state))
        } else {
            None
        }
    })
}

const AIM_ITERATIONS: usize = 3;

/// Ball low and within `clearance` of the table outline, where the outcome
/// hinges on which side of the edge it is.
fn grazes_table_edge(p: &Vector3<f64>, physics: &PhysicsParams, clearance: f64) -> bool {
    if clearance <= 0.0 || p.z >= physics.z_c + clearance {
        return false;
    }
    let (ax, ay) = (p.x.abs(), p.y.abs());
    let (hl, hw) = (physics.half_length, physics.half_width);
    let near_end = (ax - hl).abs() < clearance && ay < hw + clearance;
    let near_side = (ay - hw).abs() < clearance && ax < hl + clearance;
    near_end || near_side
}

/// Rejection-samples a launch whose only bounce before the strike plane
/// lands in the window and whose plane crossing lies in the strike volume.
pub fn launch_ball<R: Rng + ?Sized>(rng: &mut R, setup: &SimSetup) -> Result<Launch, SimError> {
    let cfg = &setup.scenario;
    let l = &cfg.launch;
    let physics = &setup.physics;
    let o_t_t = setup.calibration.origin_t_table();
    let vol = &setup.predictor.volume;
    for _ in 0..l.max_attempts {
        let p0 = Vector3::new(l.x0.sample(rng), l.y0.sample(rng), l.z0.sample(rng));
        let land = Vector3::new(l.landing_x.sample(rng), l.landing_y.sample(rng), physics.z_c);
        let vx = l.vx.sample(rng);
        // Drag-free aim, then shift the aim point by the observed miss so the
        // dragged ball bounces near the drawn landing point.
        let mut aim = land;
        let mut shot = None;
        for _ in 0..AIM_ITERATIONS {
            let t_f = (aim.x - p0.x) / vx;
            if !(t_f > 0.0) {
                break;
            }
            let v0 = Vector3::new(
                vx,
                (aim.y - p0.y) / t_f,
                (aim.z - p0.z + 0.5 * physics.g * t_f * t_f) / t_f,
            );
            let initial = BallState::in_table(p0, v0);
            let truth = dynamics::propagate(&initial, l.horizon, cfg.world_dt(), physics, cfg.world_model);
            let Some(bounce) = truth.first_bounce().map(|s| s.state.p) else {
                break;
            };
            aim.x += land.x - bounce.x;
            aim.y += land.y - bounce.y;
            shot = Some((initial, truth, bounce));
        }
        let Some((initial, truth, bounce)) = shot else {
            continue;
        };
        if !(l.landing_x.contains(bounce.x) && l.landing_y.contains(bounce.y)) {
            continue;
        }
        let Some((crossing_time, crossing)) =
            plane_crossing(&truth, o_t_t, setup.predictor.strike_plane_x)
        else {
            continue;
        };
        // Exactly one table bounce before the ball reaches the strike plane,
        // and the crossing itself inside the strike volume.
        let bounces_before = truth
            .samples
            .iter()
            .filter(|s| s.bounced && s.t <= crossing_time)
            .count();
        if bounces_before != 1 || !vol.contains(&o_t_t.transform_point(&crossing.p)) {
            continue;
        }
        let grazes_edge = truth
            .samples
            .iter()
            .take_while(|s| s.t <= crossing_time)
            .any(|s| grazes_table_edge(&s.state.p, physics, l.edge_clearance));
        if grazes_edge {
            continue;
        }
        return Ok(Launch {
            initial,
            truth,
            bounce,
            crossing_time,
            crossing,
        });
    }
    Err(SimError::NoFeasibleLaunch(l.max_attempts))
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    let mut draw = || -> f64 { StandardNormal.sample(rng) };
    Vector3::new(draw(), draw(), draw()) * sigma
}

/// Whether the camera sees a ball at `p` (table frame).
pub fn in_fov(p: &Vector3<f64>, sensor: &SensorConfig) -> bool {
    let rel = p - sensor.camera;
    let d = rel.norm();
    if d < sensor.min_range || rel.x <= 0.0 {
        return false;
    }
    rel.x / d >= sensor.fov_half_angle.cos()
}

/// Noisy camera measurement or `None` (dropout, out of view).
pub fn sense<R: Rng + ?Sized>(
    truth: &BallState,
    t: f64,
    sensor: &SensorConfig,
    rng: &mut R,
) -> Option<Measurement> {
    let dropped = sensor.drop_prob > 0.0 && rng.random::<f64>() < sensor.drop_prob;
    if dropped || !in_fov(&truth.p, sensor) {
        return None;
    }
    let d = (truth.p - sensor.camera).norm();
    let var = sensor.r_base * (1.0 + sensor.beta * d);
    let z = if var > 0.0 {
        truth.p + gaussian3(rng, var.sqrt())
    } else {
        truth.p
    };
    Some(Measurement { z, t, d })
}

/// Adds phase-dependent Gaussian noise to the hit position and velocity.
pub fn perturb_command<R: Rng + ?Sized>(
    cmd: &StrikePrediction,
    tau: f64,
    noise: &CommandNoise,
    rng: &mut R,
) -> StrikePrediction {
    let sigma = noise.sigma(tau);
    if sigma <= 0.0 {
        return *cmd;
    }
    StrikePrediction {
        p_hit: cmd.p_hit + gaussian3(rng, sigma),
        v_hit: cmd.v_hit + gaussian3(rng, sigma),
        ..*cmd
    }
}

/// Racket state at contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RacketState {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub n_hat: Vector3<f64>,
}

impl RacketState {
    pub fn commanded(plan: &StrikePlan, pred: &StrikePrediction) -> Self {
        Self {
            pos: pred.p_hit,
            vel: plan.racket_velocity(),
            n_hat: plan.n_hat,
        }
    }
}

/// Commanded racket state perturbed by Gaussian execution error.
pub fn execute_strike<R: Rng + ?Sized>(
    plan: &StrikePlan,
    pred: &StrikePrediction,
    err: &ExecError,
    rng: &mut R,
) -> RacketState {
    let cmd = RacketState::commanded(plan, pred);
    let pos = if err.sigma_p > 0.0 {
        cmd.pos + gaussian3(rng, err.sigma_p)
    } else {
        cmd.pos
    };
    let vel = if err.sigma_v > 0.0 {
        cmd.vel + gaussian3(rng, err.sigma_v)
    } else {
        cmd.vel
    };
    let n_hat = if err.sigma_angle > 0.0 {
        (Rotation3::new(gaussian3(rng, err.sigma_angle)) * cmd.n_hat).normalize()
    } else {
        cmd.n_hat
    };
    RacketState { pos, vel, n_hat }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrikeScore {
    pub e_p: f64,
    pub e_v: f64,
    pub e_o: f64,
    pub success: bool,
}

/// Angle between two lines, in `[0, π/2]`.
fn line_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b).abs())
}

/// Position, velocity and orientation errors of the realized racket state.
/// The commanded velocity direction is the commanded face normal.
pub fn score_strike(
    realized: &RacketState,
    commanded: &RacketState,
    th: &SuccessThresholds,
) -> StrikeScore {
    let e_p = (realized.pos - commanded.pos).norm();
    let e_v = (realized.vel - commanded.vel).norm();
    let e_o = 100.0 * line_angle(&realized.n_hat, &commanded.n_hat);
    StrikeScore {
        e_p,
        e_v,
        e_o,
        success: e_p < th.e_p && e_o < th.e_o && e_v < th.e_v,
    }
}

/// Prediction error at one control tick against the strike-plane crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionErrorSample {
    /// True remaining time to the strike-plane crossing.
    pub time_to_strike: f64,
    pub dp: f64,
    pub dv: f64,
    pub dtau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RallyOutcome {
    pub episode: usize,
    pub detected: bool,
    pub hit: bool,
    pub returned: bool,
    pub strike: Option<StrikeScore>,
    pub prediction_errors: Vec<PredictionErrorSample>,
    /// First bounce of the returned ball, table frame.
    pub landing: Option<Vector3<f64>>,
    /// Landing of the same outgoing ball under the planner's linear model.
    pub landing_linear_model: Option<Vector3<f64>>,
    pub matched_clip: Option<usize>,
}

impl RallyOutcome {
    fn mean_of(&self, f: impl Fn(&PredictionErrorSample) -> f64) -> Option<f64> {
        let n = self.prediction_errors.len();
        (n > 0).then(|| self.prediction_errors.iter().map(f).sum::<f64>() / n as f64)
    }

    pub fn e_predpos(&self) -> Option<f64> {
        self.mean_of(|s| s.dp)
    }

    pub fn e_predvel(&self) -> Option<f64> {
        self.mean_of(|s| s.dv)
    }

    pub fn e_predtau(&self) -> Option<f64> {
        self.mean_of(|s| s.dtau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl From<&BallState> for StateRecord {
    fn from(s: &BallState) -> Self {
        Self { p: s.p, v: s.v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
/// Strike command issued at one tick, origin frame.
pub struct PredictionRecord {
    pub t: f64,
    pub tau: f64,
    pub phx: f64,
    pub phy: f64,
    pub phz: f64,
    pub vhx: f64,
    pub vhy: f64,
    pub vhz: f64,
    pub stage: PredictionStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrikeRecord {
    pub t_contact: f64,
    pub plan: StrikePlan,
    pub commanded: RacketState,
    pub realized: RacketState,
    pub ball_at_contact: StateRecord,
    pub score: StrikeScore,
    pub hit: bool,
}

/// One control tick of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub episode: usize,
    pub tick: usize,
    pub t: f64,
    pub truth: StateRecord,
    pub measurement: Option<Vector3<f64>>,
    pub event: Option<FilterEvent>,
    pub estimate: Option<StateRecord>,
    pub prediction: Option<PredictionRecord>,
    pub strike: Option<StrikeRecord>,
}

fn truth_at(launch: &Launch, t: f64, setup: &SimSetup) -> BallState {
    let dt = launch.truth.dt;
    let i = ((t / dt + 1e-9).floor().max(0.0) as usize).min(launch.truth.len() - 1);
    let base = launch.truth.samples[i];
    let rest = t - base.t;
    if rest <= 1e-12 {
        return base.state;
    }
    dynamics::step(&base.state, rest, &setup.physics, setup.scenario.world_model).0
}

/// Flies the struck ball to its first bounce or until it falls away.
fn fly_to_bounce(s: &BallState, dt: f64, physics: &PhysicsParams, model: DragModel) -> Option<Vector3<f64>> {
    let mut cur = *s;
    let steps = (3.0 / dt) as usize;
    for _ in 0..steps {
        let (next, bounced) = dynamics::step(&cur, dt, physics, model);
        if bounced {
            return Some(next.p);
        }
        if next.p.z < -1.0 {
            return None;
        }
        cur = next;
    }
    None
}

/// Runs episode `index`. Returns the outcome and the per-tick trace.
pub fn run_episode(
    setup: &SimSetup,
    library: Option<&MotionLibrary>,
    index: usize,
) -> Result<(RallyOutcome, Vec<TickRecord>), SimError> {
    let cfg = &setup.scenario;
    let launch = launch_ball(&mut setup.launch_rng(index), setup)?;
    let mut rng = setup.noise_rng(index);
    let o_t_t = setup.calibration.origin_t_table();
    let t_t_o = o_t_t.inverse();
    let physics = &setup.physics;
    let control_dt = cfg.control_dt();
    let sense_every = cfg.sense_every();
    let (p_cross, v_cross) = to_origin(o_t_t, &launch.crossing);

    let mut ekf = AdaptiveEkf::new(setup.effective_estimator(), *physics);
    let pcfg = setup.effective_predictor();
    let mut corrections = 0usize;
    let mut detected = false;
    let mut prediction: Option<StrikePrediction> = None;
    let mut errors = Vec::new();
    let mut trace = Vec::new();
    let mut strike: Option<StrikeRecord> = None;
    let mut landing = None;
    let mut landing_linear = None;
    let mut matched_clip = None;

    let end_time = (launch.crossing_time + cfg.miss_timeout).min(launch.truth.samples.last().map_or(0.0, |s| s.t));
    let n_ticks = (end_time / control_dt).floor() as usize;

    for tick in 0..=n_ticks {
        let t = tick as f64 * control_dt;
        let truth = launch.truth.samples[(tick * cfg.world_substeps).min(launch.truth.len() - 1)].state;
        let mut record = TickRecord {
            episode: index,
            tick,
            t,
            truth: StateRecord::from(&truth),
            measurement: None,
            event: None,
            estimate: None,
            prediction: None,
            strike: None,
        };

        let mut fresh = false;
        if tick % sense_every == 0 {
            if let Some(m) = sense(&truth, t, &cfg.sensor, &mut rng) {
                record.measurement = Some(m.z);
                if let Ok(out) = ekf.update(&m) {
                    record.event = Some(out.event);
                    if out.event.is_reinit() {
                        corrections = 0;
                        prediction = None;
                    } else {
                        corrections += 1;
                    }
                    if t < launch.crossing_time {
                        detected = true;
                    }
                    fresh = true;
                }
            }
        }
        if ekf.state().initialized {
            record.estimate = Some(StateRecord::from(&ekf.state().ball()));
        }

        let before_plane = t < launch.crossing_time;
        let mut stage = None;
        match prediction {
            None if fresh && before_plane && corrections >= cfg.min_corrections => {
                prediction = predictor::initial_search(&ekf.state().ball(), o_t_t, &pcfg, physics);
                stage = prediction.map(|_| PredictionStage::Initial);
            }
            Some(prev) => {
                let refined = fresh
                    .then(|| predictor::refine(&prev, &ekf.state().ball(), o_t_t, &pcfg, physics).ok())
                    .flatten();
                match refined {
                    Some(p) => {
                        prediction = Some(p);
                        stage = Some(PredictionStage::Refine);
                    }
                    None => {
                        prediction = predictor::decay_and_clip(&prev, control_dt, &pcfg);
                        stage = prediction.map(|_| PredictionStage::Decay);
                    }
                }
            }
            None => {}
        }

        if let (Some(pred), Some(stage)) = (prediction, stage) {
            record.prediction = Some(PredictionRecord {
                t,
                tau: pred.tau,
                phx: pred.p_hit.x,
                phy: pred.p_hit.y,
                phz: pred.p_hit.z,
                vhx: pred.v_hit.x,
                vhy: pred.v_hit.y,
                vhz: pred.v_hit.z,
                stage,
            });
            let tts = launch.crossing_time - t;
            errors.push(PredictionErrorSample {
                time_to_strike: tts,
                dp: (pred.p_hit - p_cross).norm(),
                dv: (pred.v_hit - v_cross).norm(),
                dtau: (pred.tau - tts).abs(),
            });

            if pred.tau < control_dt {
                let cmd = perturb_command(&pred, pred.tau, &cfg.command_noise, &mut rng);
                let target_o = o_t_t.transform_point(&setup.planner.target);
                if let Ok(plan) = planner::plan_strike(&cmd.p_hit, &cmd.v_hit, &target_o, &setup.planner) {
                    if let Some(lib) = library.filter(|l| !l.is_empty()) {
                        matched_clip =
                            motionlib::match_clip(lib, &cmd.p_hit, &cfg.motion_anchor, cfg.match_eps, &mut rng).ok();
                    }
                    let commanded = RacketState::commanded(&plan, &cmd);
                    let realized = execute_strike(&plan, &cmd, &cfg.exec_error, &mut rng);
                    let score = score_strike(&realized, &commanded, &cfg.thresholds);
                    let t_contact = t + pred.tau + cfg.latency;
                    let ball = truth_at(&launch, t_contact.max(0.0), setup);
                    let racket_pos = t_t_o.transform_point(&realized.pos);
                    let hit = detected && (racket_pos - ball.p).norm() < cfg.contact_radius;
                    if hit {
                        let n = t_t_o.transform_vector(&realized.n_hat);
                        let v_n = t_t_o.transform_vector(&realized.vel).dot(&n);
                        if let Ok(v_out) =
                            planner::apply_racket_collision(&ball.v, &n, v_n, setup.planner.restitution)
                        {
                            let out = BallState::in_table(ball.p, v_out);
                            landing = fly_to_bounce(&out, cfg.world_dt(), physics, cfg.world_model);
                            landing_linear = fly_to_bounce(&out, cfg.world_dt(), physics, DragModel::Linear);
                        }
                    }
                    strike = Some(StrikeRecord {
                        t_contact,
                        plan,
                        commanded,
                        realized,
                        ball_at_contact: StateRecord::from(&ball),
                        score,
                        hit,
                    });
                    record.strike = strike;
                }
                trace.push(record);
                break;
            }
        }
        trace.push(record);
    }

    let hit = strike.is_some_and(|s| s.hit);
    // The first bounce of a return must be on the opponent half; a bounce on
    // the robot half fails the gate by having x <= 0.
    let returned = hit && landing.is_some_and(|p| p.x > 0.0);
    Ok((
        RallyOutcome {
            episode: index,
            detected,
            hit,
            returned,
            strike: strike.map(|s| s.score),
            prediction_errors: errors,
            landing,
            landing_linear_model: landing_linear,
            matched_clip,
        },
        trace,
    ))
}

/// Runs episodes in parallel; results come back in index order.
pub fn run_episodes(
    setup: &SimSetup,
    library: Option<&MotionLibrary>,
    range: Range<usize>,
) -> Result<Vec<RallyOutcome>, SimError> {
    range
        .into_par_iter()
        .map(|i| run_episode(setup, library, i).map(|(o, _)| o))
        .collect()
}

/// Traces of a batch, in index order.
pub fn run_traces(
    setup: &SimSetup,
    library: Option<&MotionLibrary>,
    range: Range<usize>,
) -> Result<Vec<(RallyOutcome, Vec<TickRecord>)>, SimError> {
    range
        .into_par_iter()
        .map(|i| run_episode(setup, library, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub center: f64,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurves {
    pub bin_width: f64,
    pub position: Vec<BinStat>,
    pub velocity: Vec<BinStat>,
    pub timing: Vec<BinStat>,
}

impl ConvergenceCurves {
    /// Bin centred at `t` (bins are centred on multiples of the width).
    pub fn bin_index(&self, t: f64) -> usize {
        (t / self.bin_width).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_episodes: usize,
    pub sr_det: f64,
    pub sr_hit: f64,
    pub sr_return: f64,
    pub sr_strike: f64,
    pub e_predpos: Option<f64>,
    pub e_predvel: Option<f64>,
    pub e_predtau: Option<f64>,
    pub convergence: ConvergenceCurves,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = xs.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

impl MetricsReport {
    /// Aggregates outcomes in episode order, so any partition of a batch
    /// merges to the same report.
    pub fn from_outcomes(outcomes: &[RallyOutcome], bin_width: f64) -> Self {
        let mut sorted: Vec<&RallyOutcome> = outcomes.iter().collect();
        sorted.sort_by_key(|o| o.episode);
        let n = sorted.len();
        let ratio = |f: &dyn Fn(&RallyOutcome) -> bool| {
            if n == 0 {
                0.0
            } else {
                sorted.iter().filter(|o| f(o)).count() as f64 / n as f64
            }
        };

        let n_bins = sorted
            .iter()
            .flat_map(|o| &o.prediction_errors)
            .filter(|s| s.time_to_strike >= -0.5 * bin_width)
            .map(|s| (s.time_to_strike / bin_width).round() as usize + 1)
            .max()
            .unwrap_or(0);
        let mut buckets: Vec<[Vec<f64>; 3]> = (0..n_bins).map(|_| Default::default()).collect();
        for s in sorted.iter().flat_map(|o| &o.prediction_errors) {
            if s.time_to_strike < -0.5 * bin_width {
                continue;
            }
            let b = &mut buckets[(s.time_to_strike / bin_width).round() as usize];
            b[0].push(s.dp);
            b[1].push(s.dv);
            b[2].push(s.dtau);
        }
        let curve = |k: usize| {
            buckets
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let (mean, std) = mean_std(&b[k]);
                    BinStat {
                        center: i as f64 * bin_width,
                        count: b[k].len(),
                        mean,
                        std,
                    }
                })
                .collect::<Vec<_>>()
        };

        Self {
            n_episodes: n,
            sr_det: ratio(&|o| o.detected),
            sr_hit: ratio(&|o| o.hit),
            sr_return: ratio(&|o| o.returned),
            sr_strike: ratio(&|o| o.strike.is_some_and(|s| s.success)),
            e_predpos: mean_opt(sorted.iter().map(|o| o.e_predpos())),
            e_predvel: mean_opt(sorted.iter().map(|o| o.e_predvel())),
            e_predtau: mean_opt(sorted.iter().map(|o| o.e_predtau())),
            convergence: ConvergenceCurves {
                bin_width,
                position: curve(0),
                velocity: curve(1),
                timing: curve(2),
            },
        }
    }
}

/// Runs the configured number of episodes and aggregates them.
pub fn run_batch(
    setup: &SimSetup,
    library: Option<&MotionLibrary>,
) -> Result<(Vec<RallyOutcome>, MetricsReport), SimError> {
    setup.scenario.validate()?;
    let outcomes = run_episodes(setup, library, 0..setup.scenario.n_episodes)?;
    let report = MetricsReport::from_outcomes(&outcomes, setup.scenario.bin_width);
    Ok((outcomes, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_grazing_band() {
        let ph = PhysicsParams::default();
        let low = ph.z_c - 0.004;
        assert!(grazes_table_edge(&Vector3::new(-1.373, -0.39, low), &ph, 0.02));
        assert!(grazes_table_edge(&Vector3::new(-1.36, 0.0, low), &ph, 0.02));
        assert!(grazes_table_edge(&Vector3::new(0.5, 0.77, low), &ph, 0.02));
        assert!(!grazes_table_edge(&Vector3::new(-1.373, 0.0, ph.z_c + 0.03), &ph, 0.02));
        assert!(!grazes_table_edge(&Vector3::new(-0.8, 0.0, low), &ph, 0.02));
        assert!(!grazes_table_edge(&Vector3::new(-1.373, 0.0, low), &ph, 0.0));
    }

    fn setup() -> SimSetup {
        SimSetup::new(1, ScenarioConfig::default())
    }

    #[test]
    fn default_scenario_is_valid() {
        ScenarioConfig::default().validate().unwrap();
        assert_eq!(ScenarioConfig::default().sense_every(), 2);
    }

    #[test]
    fn rejects_bad_rates_and_probabilities() {
        let mut c = ScenarioConfig::default();
        c.sensor.drop_prob = 1.5;
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig { field: "scenario.sensor.drop_prob", .. })));
        let mut c = ScenarioConfig::default();
        c.sensor.rate_hz = 50.0;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::default();
        c.control_rate_hz = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn launch_is_deterministic_and_feasible() {
        let s = setup();
        let a = launch_ball(&mut s.launch_rng(4), &s).unwrap();
        let b = launch_ball(&mut s.launch_rng(4), &s).unwrap();
        assert_eq!(a.truth, b.truth);
        let o_t_t = s.calibration.origin_t_table();
        assert!(a
            .truth
            .samples
            .iter()
            .any(|x| s.predictor.volume.contains(&o_t_t.transform_point(&x.state.p))));
        assert!(a.crossing_time > 0.0);
    }

    #[test]
    fn infeasible_launch_window_errors() {
        let mut c = ScenarioConfig::default();
        c.launch.landing_x = Span::new(5.0, 6.0);
        c.launch.max_attempts = 20;
        let s = SimSetup::new(0, c);
        assert_eq!(
            launch_ball(&mut s.launch_rng(0), &s).unwrap_err(),
            SimError::NoFeasibleLaunch(20)
        );
    }

    #[test]
    fn noiseless_sensor_returns_truth() {
        let sensor = SensorConfig {
            drop_prob: 0.0,
            beta: 0.0,
            r_base: 0.0,
            ..Default::default()
        };
        let ball = BallState::in_table(Vector3::new(0.5, 0.1, 0.3), Vector3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sense(&ball, 0.1, &sensor, &mut rng).unwrap();
        assert_eq!(m.z, ball.p);
        let behind = BallState::in_table(Vector3::new(-2.5, 0.0, 0.3), Vector3::zeros());
        assert!(sense(&behind, 0.1, &sensor, &mut rng).is_none());
    }

    #[test]
    fn command_noise_schedule() {
        let n = CommandNoise {
            sigma_max: 0.1,
            tau_ref: 0.4,
        };
        assert_eq!(n.sigma(0.0), 0.0);
        assert_eq!(n.sigma(0.2), 0.05);
        assert_eq!(n.sigma(1.0), 0.1);
        let cmd = StrikePrediction {
            tau: 0.0,
            p_hit: Vector3::new(0.0, 0.1, 0.9),
            v_hit: Vector3::new(-3.0, 0.0, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb_command(&cmd, 0.0, &n, &mut rng), cmd);
    }

    #[test]
    fn exact_execution_scores_zero() {
        let plan = planner::racket_plan(&Vector3::new(-4.0, 0.5, 1.0), &Vector3::new(5.0, 0.0, 1.5), 0.82).unwrap();
        let pred = StrikePrediction {
            tau: 0.0,
            p_hit: Vector3::new(0.0, 0.2, 0.9),
            v_hit: Vector3::new(-4.0, 0.5, 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let real = execute_strike(&plan, &pred, &ExecError::zero(), &mut rng);
        let cmd = RacketState::commanded(&plan, &pred);
        assert_eq!(real, cmd);
        let s = score_strike(&real, &cmd, &SuccessThresholds::default());
        assert_eq!((s.e_p, s.e_v, s.e_o, s.success), (0.0, 0.0, 0.0, true));
    }

    #[test]
    fn antiparallel_normal_has_zero_orientation_error() {
        let cmd = RacketState {
            pos: Vector3::zeros(),
            vel: Vector3::new(1.0, 0.0, 0.0),
            n_hat: Vector3::new(0.6, 0.8, 0.0),
        };
        let flipped = RacketState {
            n_hat: -cmd.n_hat,
            ..cmd
        };
        assert_eq!(score_strike(&flipped, &cmd, &SuccessThresholds::default()).e_o, 0.0);
    }

    #[test]
    fn blind_episode() {
        let mut c = ScenarioConfig::default();
        c.sensor.drop_prob = 1.0;
        let s = SimSetup::new(3, c);
        let (o, trace) = run_episode(&s, None, 0).unwrap();
        assert!(!o.detected && !o.hit && !o.returned);
        assert!(trace.iter().all(|r| r.measurement.is_none()));
    }

    #[test]
    fn singleton_report_matches_outcome() {
        let s = setup();
        let (o, _) = run_episode(&s, None, 2).unwrap();
        let r = MetricsReport::from_outcomes(std::slice::from_ref(&o), 0.1);
        assert_eq!(r.n_episodes, 1);
        assert_eq!(r.sr_det, o.detected as u8 as f64);
        assert_eq!(r.sr_hit, o.hit as u8 as f64);
        assert_eq!(r.sr_return, o.returned as u8 as f64);
        assert_eq!(r.e_predpos, o.e_predpos());
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()), Some(a));
        }
        assert_eq!(Ablation::parse("zero_init"), Some(Ablation::ZeroInit));
        assert_eq!(Ablation::parse("bogus"), None);
    }
}
