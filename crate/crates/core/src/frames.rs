//! Rigid transforms between the named reference frames and the calibration
//! chains that bring MoCap and head-camera observations into the table frame
//! and the robot origin frame.
//!
//! A transform written `ᴬT_B` has `parent = A` and `child = B`: it maps
//! coordinates expressed in `B` into `A`. Composition `ᴬT_B · ᴮT_C` requires the
//! inner labels to agree and yields `ᴬT_C`.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Drift in `RᵀR - I` above which a rotation is re-orthonormalized.
pub const ORTHO_REPAIR_TOL: f64 = 1e-6;
/// Drift above which a rotation is rejected outright.
pub const ORTHO_REJECT_TOL: f64 = 1e-3;

/// Standard table surface height above the floor, in metres.
pub const TABLE_HEIGHT: f64 = 0.76;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameId {
    /// MoCap world frame.
    World,
    /// Table centre, x toward the opponent, z up.
    Table,
    /// Robot origin on the floor, axes aligned with the table.
    Origin,
    /// Head stereo camera used for ball triangulation.
    CamBall,
    /// Downward-tilted camera used for tag-based localization.
    CamPose,
    Tracker,
    Torso,
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FrameId::World => "world",
            FrameId::Table => "table",
            FrameId::Origin => "origin",
            FrameId::CamBall => "cam_ball",
            FrameId::CamPose => "cam_pose",
            FrameId::Tracker => "tracker",
            FrameId::Torso => "torso",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameError {
    #[error("frame chain mismatch: left transform ends in `{left}` but right transform starts at `{right}`")]
    ChainMismatch { left: FrameId, right: FrameId },
    #[error("transform `{name}` must map {expected_child} into {expected_parent}, got {child} into {parent}")]
    WrongLabels {
        name: &'static str,
        expected_parent: FrameId,
        expected_child: FrameId,
        parent: FrameId,
        child: FrameId,
    },
    #[error("rotation is not orthonormal (drift {drift:.3e} exceeds {ORTHO_REJECT_TOL:e})")]
    NotOrthonormal { drift: f64 },
    #[error("rotation has negative determinant ({det:.6})")]
    Reflection { det: f64 },
    #[error("non-finite value in transform")]
    NonFinite,
    #[error("missing calibration entry `{0}`")]
    MissingEntry(&'static str),
    #[error("egocentric ball localization requires the table-to-camera pose")]
    MissingCameraPose,
    #[error("calibration file: {0}")]
    Parse(String),
}

/// Proper rigid transform stored as rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    parent: FrameId,
    child: FrameId,
}

fn orthonormal_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Closest rotation in the Frobenius sense (polar factor).
fn polar_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut rot = u * v_t;
    if rot.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        rot = u * v_t;
    }
    rot
}

impl RigidTransform {
    /// Builds a transform, repairing small orthonormality drift and rejecting
    /// anything that is not close to a proper rotation.
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        parent: FrameId,
        child: FrameId,
    ) -> Result<Self, FrameError> {
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return Err(FrameError::NonFinite);
        }
        let det = rotation.determinant();
        if det <= 0.0 {
            return Err(FrameError::Reflection { det });
        }
        let drift = orthonormal_drift(&rotation);
        if drift > ORTHO_REJECT_TOL {
            return Err(FrameError::NotOrthonormal { drift });
        }
        let rotation = if drift > ORTHO_REPAIR_TOL {
            polar_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
            parent,
            child,
        })
    }

    pub fn identity(parent: FrameId, child: FrameId) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            parent,
            child,
        }
    }

    pub fn from_translation(translation: Vector3<f64>, parent: FrameId, child: FrameId) -> Self {
        Self {
            translation,
            ..Self::identity(parent, child)
        }
    }

    /// Rotation about `axis` (need not be unit) by `angle` radians.
    pub fn from_axis_angle(
        axis: Vector3<f64>,
        angle: f64,
        translation: Vector3<f64>,
        parent: FrameId,
        child: FrameId,
    ) -> Self {
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
            parent,
            child,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn parent(&self) -> FrameId {
        self.parent
    }

    pub fn child(&self) -> FrameId {
        self.child
    }

    /// Same numbers under different frame labels.
    pub fn relabel(mut self, parent: FrameId, child: FrameId) -> Self {
        self.parent = parent;
        self.child = child;
        self
    }

    /// `self · other`; fails unless `self.child == other.parent`.
    pub fn compose(&self, other: &RigidTransform) -> Result<RigidTransform, FrameError> {
        if self.child != other.parent {
            return Err(FrameError::ChainMismatch {
                left: self.child,
                right: other.parent,
            });
        }
        Ok(RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            parent: self.parent,
            child: other.child,
        })
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
            parent: self.child,
            child: self.parent,
        }
    }

    /// Maps a point from `child` into `parent` coordinates.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a free vector (velocity, direction) from `child` into `parent`.
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensingMode {
    Mocap,
    Egocam,
}

/// Fixed extrinsics calibrated once per session.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    world_t_table: RigidTransform,
    world_t_origin: RigidTransform,
    cam_pose_t_cam_ball: RigidTransform,
    torso_t_cam_pose: RigidTransform,
    /// The tracker extrinsic `ᵀʳᵃᶜᵏᵉʳT_Torso` as used in the MoCap torso
    /// chain, labelled so that its inverse continues `ᵂT_Tracker` into the
    /// torso: it maps tracker coordinates into the torso frame.
    tracker_t_torso: RigidTransform,
    origin_t_table: RigidTransform,
    d_orig: f64,
}

fn check_labels(
    name: &'static str,
    t: &RigidTransform,
    parent: FrameId,
    child: FrameId,
) -> Result<(), FrameError> {
    if t.parent != parent || t.child != child {
        return Err(FrameError::WrongLabels {
            name,
            expected_parent: parent,
            expected_child: child,
            parent: t.parent,
            child: t.child,
        });
    }
    Ok(())
}

impl CalibrationSet {
    pub fn new(
        world_t_table: RigidTransform,
        world_t_origin: RigidTransform,
        cam_pose_t_cam_ball: RigidTransform,
        torso_t_cam_pose: RigidTransform,
        tracker_t_torso: RigidTransform,
        d_orig: f64,
    ) -> Result<Self, FrameError> {
        check_labels("wTt", &world_t_table, FrameId::World, FrameId::Table)?;
        check_labels("wTo", &world_t_origin, FrameId::World, FrameId::Origin)?;
        check_labels("c2Tc1", &cam_pose_t_cam_ball, FrameId::CamPose, FrameId::CamBall)?;
        check_labels("torsoTc2", &torso_t_cam_pose, FrameId::Torso, FrameId::CamPose)?;
        check_labels("trackerTtorso", &tracker_t_torso, FrameId::Torso, FrameId::Tracker)?;
        let origin_t_table = world_t_origin.inverse().compose(&world_t_table)?;
        Ok(Self {
            world_t_table,
            world_t_origin,
            cam_pose_t_cam_ball,
            torso_t_cam_pose,
            tracker_t_torso,
            origin_t_table,
            d_orig,
        })
    }

    /// Nominal lab layout: world on the floor under the table centre, origin
    /// on the floor `d_orig` behind the robot-side edge on the table midline.
    pub fn nominal(d_orig: f64, table_half_length: f64) -> Self {
        let w_t_t = RigidTransform::from_translation(
            Vector3::new(0.0, 0.0, TABLE_HEIGHT),
            FrameId::World,
            FrameId::Table,
        );
        let w_t_o = RigidTransform::from_translation(
            Vector3::new(-(table_half_length + d_orig), 0.0, 0.0),
            FrameId::World,
            FrameId::Origin,
        );
        let c2_t_c1 = RigidTransform::from_translation(
            Vector3::new(0.05, 0.0, 0.12),
            FrameId::CamPose,
            FrameId::CamBall,
        );
        let torso_t_c2 = RigidTransform::from_translation(
            Vector3::new(0.10, 0.0, 0.35),
            FrameId::Torso,
            FrameId::CamPose,
        );
        let tracker = RigidTransform::from_translation(
            Vector3::new(-0.05, 0.0, 0.20),
            FrameId::Torso,
            FrameId::Tracker,
        );
        Self::new(w_t_t, w_t_o, c2_t_c1, torso_t_c2, tracker, d_orig)
            .expect("nominal calibration labels are consistent")
    }

    pub fn world_t_table(&self) -> &RigidTransform {
        &self.world_t_table
    }

    pub fn world_t_origin(&self) -> &RigidTransform {
        &self.world_t_origin
    }

    pub fn cam_pose_t_cam_ball(&self) -> &RigidTransform {
        &self.cam_pose_t_cam_ball
    }

    pub fn torso_t_cam_pose(&self) -> &RigidTransform {
        &self.torso_t_cam_pose
    }

    pub fn tracker_t_torso(&self) -> &RigidTransform {
        &self.tracker_t_torso
    }

    /// Cached `(ᵂT_O)⁻¹ · ᵂT_T`.
    pub fn origin_t_table(&self) -> &RigidTransform {
        &self.origin_t_table
    }

    pub fn d_orig(&self) -> f64 {
        self.d_orig
    }

    pub fn from_json_str(text: &str) -> Result<Self, FrameError> {
        let file: CalibrationFile =
            serde_json::from_str(text).map_err(|e| FrameError::Parse(e.to_string()))?;
        file.into_calibration()
    }

    pub fn load(path: &Path) -> Result<Self, FrameError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FrameError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_file(&self) -> CalibrationFile {
        CalibrationFile {
            w_t_t: Some(TransformEntry::from(&self.world_t_table)),
            w_t_o: Some(TransformEntry::from(&self.world_t_origin)),
            c2_t_c1: Some(TransformEntry::from(&self.cam_pose_t_cam_ball)),
            torso_t_c2: Some(TransformEntry::from(&self.torso_t_cam_pose)),
            tracker_t_torso: Some(TransformEntry::from(&self.tracker_t_torso)),
            d_orig: Some(self.d_orig),
        }
    }
}

/// Default robot-side offset of the origin frame, metres.
pub const DEFAULT_D_ORIG: f64 = 0.3;

/// One transform in the calibration file: row-major rotation and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformEntry {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformEntry {
    fn from(t: &RigidTransform) -> Self {
        let r = t.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[3 * i + j] = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TransformEntry {
    fn to_transform(&self, parent: FrameId, child: FrameId) -> Result<RigidTransform, FrameError> {
        RigidTransform::new(
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from_column_slice(&self.translation),
            parent,
            child,
        )
    }
}

/// On-disk calibration schema.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    #[serde(rename = "wTt", default, skip_serializing_if = "Option::is_none")]
    pub w_t_t: Option<TransformEntry>,
    #[serde(rename = "wTo", default, skip_serializing_if = "Option::is_none")]
    pub w_t_o: Option<TransformEntry>,
    #[serde(rename = "c2Tc1", default, skip_serializing_if = "Option::is_none")]
    pub c2_t_c1: Option<TransformEntry>,
    #[serde(rename = "torsoTc2", default, skip_serializing_if = "Option::is_none")]
    pub torso_t_c2: Option<TransformEntry>,
    #[serde(rename = "trackerTtorso", default, skip_serializing_if = "Option::is_none")]
    pub tracker_t_torso: Option<TransformEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_orig: Option<f64>,
}

impl CalibrationFile {
    pub fn into_calibration(self) -> Result<CalibrationSet, FrameError> {
        fn need<'a>(
            e: &'a Option<TransformEntry>,
            name: &'static str,
        ) -> Result<&'a TransformEntry, FrameError> {
            e.as_ref().ok_or(FrameError::MissingEntry(name))
        }
        use FrameId::*;
        CalibrationSet::new(
            need(&self.w_t_t, "wTt")?.to_transform(World, Table)?,
            need(&self.w_t_o, "wTo")?.to_transform(World, Origin)?,
            need(&self.c2_t_c1, "c2Tc1")?.to_transform(CamPose, CamBall)?,
            need(&self.torso_t_c2, "torsoTc2")?.to_transform(Torso, CamPose)?,
            need(&self.tracker_t_torso, "trackerTtorso")?.to_transform(Torso, Tracker)?,
            self.d_orig.unwrap_or(DEFAULT_D_ORIG),
        )
    }
}

/// Torso pose in the origin frame, `ᴼT_Torso`.
///
/// MoCap: `obs = ᵂT_Tracker`, result `(ᵂT_O)⁻¹ · ᵂT_Tracker · (ᵀʳᵃᶜᵏᵉʳT_Torso)⁻¹`.
/// Egocam: `obs = ᵀT_C2`, result `ᴼT_T · ᵀT_C2 · (ᵀᵒʳˢᵒT_C2)⁻¹`.
pub fn localize_torso(
    mode: SensingMode,
    calib: &CalibrationSet,
    obs: &RigidTransform,
) -> Result<RigidTransform, FrameError> {
    match mode {
        SensingMode::Mocap => {
            check_labels("world_t_tracker", obs, FrameId::World, FrameId::Tracker)?;
            calib
                .world_t_origin
                .inverse()
                .compose(obs)?
                .compose(&calib.tracker_t_torso.inverse())
        }
        SensingMode::Egocam => {
            check_labels("table_t_cam_pose", obs, FrameId::Table, FrameId::CamPose)?;
            calib
                .origin_t_table
                .compose(obs)?
                .compose(&calib.torso_t_cam_pose.inverse())
        }
    }
}

/// Ball position in the table frame.
///
/// MoCap: `obs_point` is in the world frame. Egocam: `obs_point` is in the
/// ball camera frame and `cam_pose` must carry `ᵀT_C2`.
pub fn ball_to_table(
    mode: SensingMode,
    calib: &CalibrationSet,
    obs_point: &Vector3<f64>,
    cam_pose: Option<&RigidTransform>,
) -> Result<Vector3<f64>, FrameError> {
    match mode {
        SensingMode::Mocap => Ok(calib.world_t_table.inverse().transform_point(obs_point)),
        SensingMode::Egocam => {
            let pose = cam_pose.ok_or(FrameError::MissingCameraPose)?;
            check_labels("table_t_cam_pose", pose, FrameId::Table, FrameId::CamPose)?;
            let chain = pose.compose(&calib.cam_pose_t_cam_ball)?;
            Ok(chain.transform_point(obs_point))
        }
    }
}
