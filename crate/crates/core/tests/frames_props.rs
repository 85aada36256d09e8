use nalgebra::Vector3;
use proptest::prelude::*;

use rallykit::frames::{
    ball_to_table, localize_torso, CalibrationSet, FrameId, RigidTransform, SensingMode,
};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn transform(parent: FrameId, child: FrameId) -> impl Strategy<Value = RigidTransform> {
    (vec3(1.0), -6.0..6.0f64, vec3(3.0)).prop_filter_map("degenerate axis", move |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| RigidTransform::from_axis_angle(axis, angle, t, parent, child))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn inverse_round_trip(t in transform(FrameId::World, FrameId::Table), p in vec3(5.0)) {
        let back = t.inverse().transform_point(&t.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn composition_is_associative(
        a in transform(FrameId::World, FrameId::Table),
        b in transform(FrameId::Table, FrameId::CamPose),
        c in transform(FrameId::CamPose, FrameId::CamBall),
        p in vec3(5.0),
    ) {
        let left = a.compose(&b).unwrap().compose(&c).unwrap();
        let right = a.compose(&b.compose(&c).unwrap()).unwrap();
        prop_assert!((left.rotation() - right.rotation()).norm() < 1e-9);
        prop_assert!((left.translation() - right.translation()).norm() < 1e-9);
        prop_assert!((left.transform_point(&p) - right.transform_point(&p)).norm() < 1e-9);
    }

    #[test]
    fn egocam_chain_reprojects(
        pose in transform(FrameId::Table, FrameId::CamPose),
        q in vec3(4.0),
    ) {
        let calib = CalibrationSet::nominal(0.3, 1.37);
        let p_table = ball_to_table(SensingMode::Egocam, &calib, &q, Some(&pose)).unwrap();
        let o_t_torso = localize_torso(SensingMode::Egocam, &calib, &pose).unwrap();
        // Table → origin → torso → pose camera → ball camera.
        let p_origin = calib.origin_t_table().transform_point(&p_table);
        let p_torso = o_t_torso.inverse().transform_point(&p_origin);
        let p_c2 = calib.torso_t_cam_pose().inverse().transform_point(&p_torso);
        let q_back = calib.cam_pose_t_cam_ball().inverse().transform_point(&p_c2);
        prop_assert!((q_back - q).norm() < 1e-9);
    }
}

#[test]
fn mocap_ball_maps_through_table_pose() {
    let calib = CalibrationSet::nominal(0.3, 1.37);
    let p_world = Vector3::new(0.2, -0.1, 1.0);
    let p_table = ball_to_table(SensingMode::Mocap, &calib, &p_world, None).unwrap();
    assert!((p_table - Vector3::new(0.2, -0.1, 0.24)).norm() < 1e-12);
}
