//! Strike-motion library: clips, strike-target features, nearest-neighbour
//! matching and clip-quality metrics.
//!
//! A clip's strike feature is the racket position at the contact frame
//! relative to the torso position at the first frame. Matching subtracts an
//! anchor from the (optionally perturbed) hit target and returns the clip
//! whose feature is closest in Euclidean distance, lowest index on ties.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground threshold for the foot penetration penalty.
pub const FOOT_GROUND_Z: f64 = 0.035;
/// Nominal clip length: contact at the midpoint of a 1.08 s window.
pub const CLIP_DURATION: f64 = 1.08;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("strike index {index} out of range for clip with {len} frames")]
    StrikeIndexOutOfRange { index: usize, len: usize },
    #[error("motion library is empty")]
    EmptyLibrary,
    #[error("sequence length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("target {0:?} is outside the reachable box")]
    Unreachable([f64; 3]),
    #[error("clip timestamps must be strictly increasing")]
    NonMonotonicTime,
    #[error("cached feature of clip {0} differs from the recomputed one")]
    StaleFeature(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub t: f64,
    pub dof_pos: Vec<f64>,
    pub dof_vel: Vec<f64>,
    pub racket_pos: Vector3<f64>,
    pub torso_pos: Vector3<f64>,
    /// Heights of the tracked foot points.
    pub foot_z: Vec<f64>,
    /// Strike phase in radians.
    pub phase: f64,
}

impl MotionFrame {
    /// Kinematic state vector used by the boundary smoothness term.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.dof_pos.len() + self.dof_vel.len() + 6);
        s.extend_from_slice(&self.dof_pos);
        s.extend_from_slice(&self.dof_vel);
        s.extend(self.racket_pos.iter());
        s.extend(self.torso_pos.iter());
        s
    }

    pub fn phase_code(&self) -> [f64; 2] {
        phase_code(self.phase)
    }
}

/// `[sin φ, cos φ]`
pub fn phase_code(phase: f64) -> [f64; 2] {
    [phase.sin(), phase.cos()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub dt: f64,
    pub frames: Vec<MotionFrame>,
    pub strike_index: usize,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    pub fn check(&self) -> Result<(), MotionError> {
        if self.strike_index >= self.frames.len() {
            return Err(MotionError::StrikeIndexOutOfRange {
                index: self.strike_index,
                len: self.frames.len(),
            });
        }
        if self.frames.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(MotionError::NonMonotonicTime);
        }
        Ok(())
    }

    /// Same clip rigidly translated.
    pub fn translated(&self, offset: &Vector3<f64>) -> MotionClip {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.racket_pos += offset;
            f.torso_pos += offset;
        }
        out
    }
}

/// Racket position at contact relative to the torso at the first frame.
pub fn extract_feature(clip: &MotionClip) -> Result<Vector3<f64>, MotionError> {
    let strike = clip
        .frames
        .get(clip.strike_index)
        .ok_or(MotionError::StrikeIndexOutOfRange {
            index: clip.strike_index,
            len: clip.frames.len(),
        })?;
    Ok(strike.racket_pos - clip.frames[0].torso_pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipQuality {
    pub l_phase: f64,
    pub l_smooth: f64,
    pub l_foot: f64,
}

/// Foot penetration penalty `Σ_t Σ_j ReLU(z_g - z)`.
pub fn foot_penalty(frames: &[MotionFrame], z_g: f64) -> f64 {
    frames
        .iter()
        .flat_map(|f| f.foot_z.iter())
        .map(|z| (z_g - z).max(0.0))
        .sum()
}

/// Phase reconstruction error: position term over every frame plus the
/// velocity term over consecutive differences.
pub fn phase_loss(pred: &[f64], reference: &[f64]) -> Result<f64, MotionError> {
    if pred.len() != reference.len() {
        return Err(MotionError::LengthMismatch(pred.len(), reference.len()));
    }
    let c_hat: Vec<[f64; 2]> = pred.iter().map(|&p| phase_code(p)).collect();
    let c: Vec<[f64; 2]> = reference.iter().map(|&p| phase_code(p)).collect();
    let sq = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let position: f64 = c_hat.iter().zip(&c).map(|(a, b)| sq(*a, *b)).sum();
    let velocity: f64 = c_hat
        .windows(2)
        .zip(c.windows(2))
        .map(|(a, b)| {
            let da = [a[1][0] - a[0][0], a[1][1] - a[0][1]];
            let db = [b[1][0] - b[0][0], b[1][1] - b[0][1]];
            sq(da, db)
        })
        .sum();
    Ok(position + velocity)
}

/// Reconstruction metrics of `pred` against `reference`.
///
/// Both sequences start at the generation boundary; the reference's first
/// frame is the conditioning state and the smoothness term compares the
/// predicted first frame against it. The foot penalty is taken on `pred`.
pub fn clip_quality(
    pred: &MotionClip,
    reference: &MotionClip,
    z_g: f64,
) -> Result<ClipQuality, MotionError> {
    if pred.len() != reference.len() {
        return Err(MotionError::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Ok(ClipQuality {
            l_phase: 0.0,
            l_smooth: 0.0,
            l_foot: 0.0,
        });
    }
    let phases = |c: &MotionClip| c.frames.iter().map(|f| f.phase).collect::<Vec<_>>();
    let l_phase = phase_loss(&phases(pred), &phases(reference))?;
    let s_hat = pred.frames[0].state_vector();
    let s_cond = reference.frames[0].state_vector();
    if s_hat.len() != s_cond.len() {
        return Err(MotionError::LengthMismatch(s_hat.len(), s_cond.len()));
    }
    let l_smooth = s_hat.iter().zip(&s_cond).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(ClipQuality {
        l_phase,
        l_smooth,
        l_foot: foot_penalty(&pred.frames, z_g),
    })
}

/// Mean squared distance of the phase codes from the best-fit constant-rate
/// cycle (least-squares line through the unwrapped phase).
pub fn phase_deviation(clip: &MotionClip) -> f64 {
    let n = clip.frames.len();
    if n < 2 {
        return 0.0;
    }
    let mut unwrapped = Vec::with_capacity(n);
    let mut prev = clip.frames[0].phase;
    let mut acc = prev;
    unwrapped.push(acc);
    for f in &clip.frames[1..] {
        let [s, c] = f.phase_code();
        let [ps, pc] = phase_code(prev);
        // Signed angle between consecutive phase codes.
        let delta = (pc * s - ps * c).atan2(pc * c + ps * s);
        acc += delta;
        prev = f.phase;
        unwrapped.push(acc);
    }
    let ts: Vec<f64> = clip.frames.iter().map(|f| f.t).collect();
    let mean_t = ts.iter().sum::<f64>() / n as f64;
    let mean_p = unwrapped.iter().sum::<f64>() / n as f64;
    let sxx: f64 = ts.iter().map(|t| (t - mean_t).powi(2)).sum();
    let sxy: f64 = ts
        .iter()
        .zip(&unwrapped)
        .map(|(t, p)| (t - mean_t) * (p - mean_p))
        .sum();
    let rate = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let offset = mean_p - rate * mean_t;
    clip.frames
        .iter()
        .map(|f| {
            let [s, c] = f.phase_code();
            let [fs, fc] = phase_code(offset + rate * f.t);
            (s - fs).powi(2) + (c - fc).powi(2)
        })
        .sum::<f64>()
        / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityThresholds {
    /// Allowed distance of the contact frame from the clip centre, as a
    /// fraction of the clip length.
    pub center_window: f64,
    pub z_g: f64,
    pub max_phase_deviation: f64,
    pub max_foot_penalty: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            center_window: 0.15,
            z_g: FOOT_GROUND_Z,
            max_phase_deviation: 0.05,
            max_foot_penalty: 0.01,
        }
    }
}

impl QualityThresholds {
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.center_window > 0.0 && self.center_window < 0.5) {
            return Err(("motionlib.thresholds.center_window", "(0, 0.5)"));
        }
        if !(self.max_phase_deviation >= 0.0) {
            return Err(("motionlib.thresholds.max_phase_deviation", ">= 0"));
        }
        if !(self.max_foot_penalty >= 0.0) {
            return Err(("motionlib.thresholds.max_foot_penalty", ">= 0"));
        }
        if !self.z_g.is_finite() {
            return Err(("motionlib.thresholds.z_g", "finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ContactOffCenter,
    PhaseDeviation,
    FootPenetration,
    InvalidClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipVerdict {
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
    pub center_offset: f64,
    pub phase_deviation: f64,
    pub foot_penalty: f64,
}

/// Contact-centering, phase-consistency and foot checks.
pub fn validate_clip(clip: &MotionClip, th: &QualityThresholds) -> ClipVerdict {
    let mut reasons = Vec::new();
    if clip.check().is_err() {
        reasons.push(RejectReason::InvalidClip);
    }
    let center_offset = if clip.is_empty() {
        f64::INFINITY
    } else {
        (clip.strike_index as f64 / clip.len() as f64 - 0.5).abs()
    };
    if !(center_offset <= th.center_window) {
        reasons.push(RejectReason::ContactOffCenter);
    }
    let deviation = phase_deviation(clip);
    if !(deviation <= th.max_phase_deviation) {
        reasons.push(RejectReason::PhaseDeviation);
    }
    let foot = foot_penalty(&clip.frames, th.z_g);
    if !(foot <= th.max_foot_penalty) {
        reasons.push(RejectReason::FootPenetration);
    }
    ClipVerdict {
        accepted: reasons.is_empty(),
        reasons,
        center_offset,
        phase_deviation: deviation,
        foot_penalty: foot,
    }
}

/// Shape parameters of the synthetic swing generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwingStyle {
    pub dt: f64,
    pub n_dof: usize,
    pub n_foot_points: usize,
    pub foot_height: f64,
    /// Torso position at the first frame.
    pub torso_start: Vector3<f64>,
    /// Fraction of the target offset the torso travels toward by contact.
    pub torso_lunge: f64,
    /// Peak sideways bulge of the racket arc.
    pub arc_height: f64,
    /// Lower and upper corners of the reachable target box.
    pub reach_min: Vector3<f64>,
    pub reach_max: Vector3<f64>,
}

impl Default for SwingStyle {
    fn default() -> Self {
        Self {
            dt: 0.02,
            n_dof: 6,
            n_foot_points: 4,
            foot_height: 0.05,
            torso_start: Vector3::new(0.0, 0.0, 0.75),
            torso_lunge: 0.15,
            arc_height: 0.1,
            reach_min: Vector3::new(-0.2, -1.0, -0.7),
            reach_max: Vector3::new(0.9, 1.0, 0.8),
        }
    }
}

fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Deterministic parametric swing whose racket passes through
/// `torso_start + target` at the clip midpoint.
pub fn synth_swing(
    target: &Vector3<f64>,
    style: &SwingStyle,
    seed: u64,
) -> Result<MotionClip, MotionError> {
    let inside = (0..3).all(|i| target[i] >= style.reach_min[i] && target[i] <= style.reach_max[i]);
    if !inside || !target.iter().all(|x| x.is_finite()) {
        return Err(MotionError::Unreachable([target.x, target.y, target.z]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arc = style.arc_height * rng.random_range(0.5..1.5);
    let backswing = Vector3::new(
        rng.random_range(-0.35..-0.15),
        target.y.signum() * rng.random_range(0.05..0.2),
        rng.random_range(-0.15..0.05),
    );
    let follow = Vector3::new(rng.random_range(0.15..0.35), -target.y * 0.3, rng.random_range(0.0..0.2));
    let amps: Vec<f64> = (0..style.n_dof).map(|_| rng.random_range(0.1..0.8)).collect();
    let offsets: Vec<f64> = (0..style.n_dof).map(|_| rng.random_range(-0.3..0.3)).collect();

    let n = (CLIP_DURATION / style.dt).round() as usize + 1;
    let strike_index = (n - 1) / 2;
    let t_strike = strike_index as f64 * style.dt;
    let t_end = (n - 1) as f64 * style.dt;
    let torso0 = style.torso_start;
    let contact = torso0 + target;
    let start = contact + backswing;
    let end = contact + follow;
    let lunge = Vector3::new(target.x, target.y, 0.0) * style.torso_lunge;

    let frames = (0..n)
        .map(|i| {
            let t = i as f64 * style.dt;
            let (racket, torso_s) = if i <= strike_index {
                let u = t / t_strike;
                let s = min_jerk(u);
                let bulge = Vector3::new(0.0, 0.0, arc * (PI * s).sin());
                (start + (contact - start) * s + bulge, s)
            } else {
                let u = (t - t_strike) / (t_end - t_strike);
                let s = min_jerk(u);
                let bulge = Vector3::new(0.0, 0.0, 0.5 * arc * (PI * s).sin());
                (contact + (end - contact) * s + bulge, 1.0 - 0.5 * s)
            };
            let phase = TAU * t / t_end;
            let dof_pos = amps
                .iter()
                .zip(&offsets)
                .map(|(a, o)| o + a * phase.sin())
                .collect();
            let dof_vel = amps.iter().map(|a| a * phase.cos() * TAU / t_end).collect();
            MotionFrame {
                t,
                dof_pos,
                dof_vel,
                racket_pos: racket,
                torso_pos: torso0 + lunge * torso_s,
                foot_z: vec![style.foot_height; style.n_foot_points],
                phase,
            }
        })
        .collect();
    Ok(MotionClip {
        dt: style.dt,
        frames,
        strike_index,
    })
}

/// Static k-d tree over 3-D features.
#[derive(Debug, Clone, Default)]
pub struct FeatureIndex {
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct KdNode {
    point: Vector3<f64>,
    index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl FeatureIndex {
    pub fn build(features: &[Vector3<f64>]) -> Self {
        let mut items: Vec<(usize, Vector3<f64>)> = features.iter().copied().enumerate().collect();
        let mut nodes = Vec::with_capacity(items.len());
        let root = Self::build_rec(&mut items, 0, &mut nodes);
        Self { nodes, root }
    }

    fn build_rec(
        items: &mut [(usize, Vector3<f64>)],
        depth: usize,
        nodes: &mut Vec<KdNode>,
    ) -> Option<usize> {
        if items.is_empty() {
            return None;
        }
        let axis = depth % 3;
        items.sort_by(|a, b| a.1[axis].total_cmp(&b.1[axis]).then(a.0.cmp(&b.0)));
        let mid = items.len() / 2;
        let (index, point) = items[mid];
        let slot = nodes.len();
        nodes.push(KdNode {
            point,
            index,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = items.split_at_mut(mid);
        let left = Self::build_rec(lo, depth + 1, nodes);
        let right = Self::build_rec(&mut rest[1..], depth + 1, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        Some(slot)
    }

    /// Nearest feature to `q` as `(index, squared distance)`; lowest index
    /// among equidistant features.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        if let Some(root) = self.root {
            self.search(root, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &Vector3<f64>, best: &mut Option<(usize, f64)>) {
        let n = &self.nodes[node];
        let d2 = (n.point - q).norm_squared();
        let better = match *best {
            None => true,
            Some((bi, bd)) => d2 < bd || (d2 == bd && n.index < bi),
        };
        if better {
            *best = Some((n.index, d2));
        }
        let diff = q[n.axis] - n.point[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            // Visit on equality too so ties resolve to the lowest index.
            if best.is_none_or(|(_, bd)| diff * diff <= bd) {
                self.search(c, q, best);
            }
        }
    }
}

/// Clips with their strike features and quality verdicts.
#[derive(Debug, Clone, Default)]
pub struct MotionLibrary {
    clips: Vec<MotionClip>,
    features: Vec<Vector3<f64>>,
    quality: Vec<ClipVerdict>,
    index: FeatureIndex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryIndexFile {
    pub clips: Vec<String>,
    pub features: Vec<Vector3<f64>>,
}

impl MotionLibrary {
    pub fn new(clips: Vec<MotionClip>, thresholds: &QualityThresholds) -> Result<Self, MotionError> {
        let features = clips.iter().map(extract_feature).collect::<Result<Vec<_>, _>>()?;
        let quality = clips.iter().map(|c| validate_clip(c, thresholds)).collect();
        let index = FeatureIndex::build(&features);
        Ok(Self {
            clips,
            features,
            quality,
            index,
        })
    }

    /// Library of synthetic swings on a regular grid of targets.
    pub fn synthetic_grid(
        per_axis: [usize; 3],
        lo: Vector3<f64>,
        hi: Vector3<f64>,
        style: &SwingStyle,
        seed: u64,
        thresholds: &QualityThresholds,
    ) -> Result<Self, MotionError> {
        let lerp = |i: usize, n: usize, a: f64, b: f64| {
            if n <= 1 {
                0.5 * (a + b)
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        let mut clips = Vec::with_capacity(per_axis.iter().product());
        for ix in 0..per_axis[0] {
            for iy in 0..per_axis[1] {
                for iz in 0..per_axis[2] {
                    let target = Vector3::new(
                        lerp(ix, per_axis[0], lo.x, hi.x),
                        lerp(iy, per_axis[1], lo.y, hi.y),
                        lerp(iz, per_axis[2], lo.z, hi.z),
                    );
                    let clip_seed = seed.wrapping_add(clips.len() as u64);
                    clips.push(synth_swing(&target, style, clip_seed)?);
                }
            }
        }
        Self::new(clips, thresholds)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[MotionClip] {
        &self.clips
    }

    pub fn features(&self) -> &[Vector3<f64>] {
        &self.features
    }

    pub fn quality(&self) -> &[ClipVerdict] {
        &self.quality
    }

    /// Nearest clip to the relative query `p_rel` (no perturbation).
    pub fn nearest(&self, p_rel: &Vector3<f64>) -> Result<usize, MotionError> {
        self.index
            .nearest(p_rel)
            .map(|(i, _)| i)
            .ok_or(MotionError::EmptyLibrary)
    }

    /// Writes `index.json` plus one JSON document per clip into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), MotionError> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::with_capacity(self.clips.len());
        for (i, clip) in self.clips.iter().enumerate() {
            let name = format!("clip_{i:05}.json");
            fs::write(dir.join(&name), serde_json::to_vec(clip)?)?;
            names.push(name);
        }
        let index = LibraryIndexFile {
            clips: names,
            features: self.features.clone(),
        };
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    /// Loads a saved library, recomputing features and checking them against
    /// the cached copies bit for bit.
    pub fn load(dir: &Path, thresholds: &QualityThresholds) -> Result<Self, MotionError> {
        let index: LibraryIndexFile = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let clips = index
            .clips
            .iter()
            .map(|name| Ok(serde_json::from_slice(&fs::read(dir.join(name))?)?))
            .collect::<Result<Vec<MotionClip>, MotionError>>()?;
        let lib = Self::new(clips, thresholds)?;
        for (i, (cached, fresh)) in index.features.iter().zip(&lib.features).enumerate() {
            if cached != fresh {
                return Err(MotionError::StaleFeature(i));
            }
        }
        Ok(lib)
    }
}

/// Draws the target perturbation: uniform in a ball of radius `scale`.
pub fn sample_perturbation<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Vector3<f64> {
    if scale <= 0.0 {
        return Vector3::zeros();
    }
    let [x, y, z]: [f64; 3] = UnitBall.sample(rng);
    Vector3::new(x, y, z) * scale
}

/// Task-conditioned nearest-neighbour lookup:
/// `argmin_i ‖p_hit + ε - p_anchor - feature_i‖`.
pub fn match_clip<R: Rng + ?Sized>(
    lib: &MotionLibrary,
    p_hit: &Vector3<f64>,
    p_anchor: &Vector3<f64>,
    eps_scale: f64,
    rng: &mut R,
) -> Result<usize, MotionError> {
    if lib.is_empty() {
        return Err(MotionError::EmptyLibrary);
    }
    let eps = sample_perturbation(eps_scale, rng);
    lib.nearest(&(p_hit + eps - p_anchor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_clip(n: usize, strike: usize) -> MotionClip {
        let frames = (0..n)
            .map(|i| MotionFrame {
                t: i as f64 * 0.02,
                dof_pos: vec![0.0; 2],
                dof_vel: vec![0.0; 2],
                racket_pos: Vector3::zeros(),
                torso_pos: Vector3::zeros(),
                foot_z: vec![0.05, 0.05],
                phase: TAU * i as f64 / (n - 1) as f64,
            })
            .collect();
        MotionClip {
            dt: 0.02,
            frames,
            strike_index: strike,
        }
    }

    #[test]
    fn feature_identity_anchor() {
        let mut clip = flat_clip(5, 2);
        clip.frames[2].racket_pos = Vector3::new(0.4, -0.3, 1.1);
        assert_eq!(extract_feature(&clip).unwrap(), Vector3::new(0.4, -0.3, 1.1));
        let moved = clip.translated(&Vector3::new(1.0, 2.0, 0.0));
        assert!((extract_feature(&moved).unwrap() - Vector3::new(0.4, -0.3, 1.1)).norm() < 1e-15);
    }

    #[test]
    fn feature_out_of_range() {
        let clip = flat_clip(5, 9);
        assert!(matches!(
            extract_feature(&clip),
            Err(MotionError::StrikeIndexOutOfRange { index: 9, len: 5 })
        ));
    }

    #[test]
    fn synth_round_trip_and_determinism() {
        let style = SwingStyle::default();
        let target = Vector3::new(0.35, 0.1, 0.95 - 0.75);
        let a = synth_swing(&target, &style, 11).unwrap();
        let b = synth_swing(&target, &style, 11).unwrap();
        assert_eq!(a, b);
        assert!((extract_feature(&a).unwrap() - target).norm() < 1e-6);
        assert_eq!(a.len(), 55);
        assert_eq!(a.strike_index, 27);
        assert!((a.frames[27].t - 0.54).abs() < 1e-12);
        assert!((a.duration() - CLIP_DURATION).abs() < 1e-12);
        assert!(validate_clip(&a, &QualityThresholds::default()).accepted);
        assert!(matches!(
            synth_swing(&Vector3::new(3.0, 0.0, 0.0), &style, 1),
            Err(MotionError::Unreachable(_))
        ));
    }

    #[test]
    fn two_clip_match_hand_distances() {
        let mut a = flat_clip(3, 1);
        a.frames[1].racket_pos = Vector3::new(0.3, 0.2, 1.0);
        let mut b = flat_clip(3, 1);
        b.frames[1].racket_pos = Vector3::new(0.5, -0.2, 0.9);
        let lib = MotionLibrary::new(vec![a, b], &QualityThresholds::default()).unwrap();
        let q = Vector3::new(0.45, -0.1, 0.95);
        let d0 = (q - lib.features()[0]).norm();
        let d1 = (q - lib.features()[1]).norm();
        assert!((d0 - 0.339).abs() < 1e-3 && (d1 - 0.122).abs() < 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(match_clip(&lib, &q, &Vector3::zeros(), 0.0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn singleton_and_empty_library() {
        let lib = MotionLibrary::new(vec![flat_clip(3, 1)], &QualityThresholds::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Vector3::new(5.0, -3.0, 2.0);
        assert_eq!(match_clip(&lib, &q, &Vector3::zeros(), 0.02, &mut rng).unwrap(), 0);
        let empty = MotionLibrary::new(vec![], &QualityThresholds::default()).unwrap();
        assert!(matches!(
            match_clip(&empty, &q, &Vector3::zeros(), 0.0, &mut rng),
            Err(MotionError::EmptyLibrary)
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut a = flat_clip(3, 1);
        a.frames[1].racket_pos = Vector3::new(1.0, 0.0, 0.0);
        let mut b = a.clone();
        b.frames[1].racket_pos = Vector3::new(-1.0, 0.0, 0.0);
        let lib = MotionLibrary::new(vec![a.clone(), b, a], &QualityThresholds::default()).unwrap();
        assert_eq!(lib.nearest(&Vector3::zeros()).unwrap(), 0);
        assert_eq!(lib.nearest(&Vector3::new(-1.0, 0.0, 0.0)).unwrap(), 1);
    }

    #[test]
    fn perturbation_stays_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert!(sample_perturbation(0.02, &mut rng).norm() <= 0.02);
        }
        assert_eq!(sample_perturbation(0.0, &mut rng), Vector3::zeros());
    }

    #[test]
    fn perfect_reconstruction_zero_losses() {
        let clip = synth_swing(&Vector3::new(0.3, 0.2, 0.1), &SwingStyle::default(), 2).unwrap();
        let q = clip_quality(&clip, &clip, FOOT_GROUND_Z).unwrap();
        assert_eq!(q, ClipQuality { l_phase: 0.0, l_smooth: 0.0, l_foot: 0.0 });
    }

    #[test]
    fn single_foot_point_penalty() {
        let mut clip = flat_clip(4, 2);
        clip.frames[1].foot_z[0] = 0.02;
        let q = clip_quality(&clip, &clip, FOOT_GROUND_Z).unwrap();
        assert!((q.l_foot - 0.015).abs() < 1e-15);
        assert_eq!(q.l_foot, FOOT_GROUND_Z - 0.02);
    }

    #[test]
    fn constant_phase_offset() {
        let reference = flat_clip(20, 10);
        let delta = 0.3;
        let mut pred = reference.clone();
        for f in &mut pred.frames {
            f.phase += delta;
        }
        let q = clip_quality(&pred, &reference, FOOT_GROUND_Z).unwrap();
        // Direct summation of both terms.
        let code = |p: f64| [p.sin(), p.cos()];
        let mut pos = 0.0;
        let mut vel = 0.0;
        for i in 0..20 {
            let a = code(pred.frames[i].phase);
            let b = code(reference.frames[i].phase);
            pos += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
            if i + 1 < 20 {
                let a1 = code(pred.frames[i + 1].phase);
                let b1 = code(reference.frames[i + 1].phase);
                let da = [a1[0] - a[0], a1[1] - a[1]];
                let db = [b1[0] - b[0], b1[1] - b[1]];
                vel += (da[0] - db[0]).powi(2) + (da[1] - db[1]).powi(2);
            }
        }
        assert!((q.l_phase - (pos + vel)).abs() < 1e-12);
        assert!((pos - 20.0 * (2.0 - 2.0 * delta.cos())).abs() < 1e-12);

        // With a frozen phase the velocity term vanishes.
        let mut frozen = reference.clone();
        for f in &mut frozen.frames {
            f.phase = 1.0;
        }
        let mut frozen_pred = frozen.clone();
        for f in &mut frozen_pred.frames {
            f.phase += delta;
        }
        let q = clip_quality(&frozen_pred, &frozen, FOOT_GROUND_Z).unwrap();
        assert!((q.l_phase - 20.0 * (2.0 - 2.0 * delta.cos())).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            clip_quality(&flat_clip(4, 2), &flat_clip(5, 2), FOOT_GROUND_Z),
            Err(MotionError::LengthMismatch(4, 5))
        ));
    }

    #[test]
    fn validate_ideal_and_off_center() {
        let th = QualityThresholds::default();
        let ideal = flat_clip(55, 27);
        let v = validate_clip(&ideal, &th);
        assert!(v.accepted, "{v:?}");
        let early = flat_clip(55, 0);
        let v = validate_clip(&early, &th);
        assert!(!v.accepted);
        assert_eq!(v.reasons, vec![RejectReason::ContactOffCenter]);
    }

    #[test]
    fn validate_foot_ramp() {
        let th = QualityThresholds::default();
        let mut clip = flat_clip(55, 27);
        let mut expected = 0.0;
        for k in 0..10 {
            let z = 0.05 * (1.0 - (k + 1) as f64 / 10.0);
            for fz in &mut clip.frames[30 + k].foot_z {
                *fz = z;
                expected += (FOOT_GROUND_Z - z).max(0.0);
            }
        }
        let v = validate_clip(&clip, &th);
        assert_eq!(v.reasons, vec![RejectReason::FootPenetration]);
        assert!((v.foot_penalty - expected).abs() < 1e-12);
    }

    #[test]
    fn validate_scrambled_phase() {
        let th = QualityThresholds::default();
        let mut clip = flat_clip(55, 27);
        for (i, f) in clip.frames.iter_mut().enumerate() {
            if i % 3 == 0 {
                f.phase += 2.0;
            }
        }
        let v = validate_clip(&clip, &th);
        assert!(v.reasons.contains(&RejectReason::PhaseDeviation));
    }

    #[test]
    fn save_load_is_bit_identical() {
        let lib = MotionLibrary::synthetic_grid(
            [2, 2, 2],
            Vector3::new(0.1, -0.5, -0.3),
            Vector3::new(0.6, 0.5, 0.4),
            &SwingStyle::default(),
            7,
            &QualityThresholds::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        lib.save(dir.path()).unwrap();
        let back = MotionLibrary::load(dir.path(), &QualityThresholds::default()).unwrap();
        assert_eq!(back.features(), lib.features());
        assert_eq!(back.clips(), lib.clips());
    }
}
