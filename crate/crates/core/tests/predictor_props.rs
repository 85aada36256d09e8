use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rallykit::dynamics::{BallState, PhysicsParams};
use rallykit::estimator::{AdaptiveEkf, EstimatorParams};
use rallykit::frames::{CalibrationSet, FrameId, RigidTransform};
use rallykit::predictor::{initial_search, refine, PredictorConfig, StrikePrediction};
use rallykit::simulator::{launch_ball, sense, ScenarioConfig, SensorConfig, SimSetup};

fn nominal() -> CalibrationSet {
    CalibrationSet::nominal(0.3, 1.37)
}

fn incoming_ball() -> impl Strategy<Value = BallState> {
    (
        (-1.2..1.6f64, -0.7..0.7f64, 0.0..0.6f64),
        (-7.0..-1.0f64, -1.5..1.5f64, -3.0..3.0f64),
    )
        .prop_map(|((x, y, z), (vx, vy, vz))| {
            BallState::in_table(Vector3::new(x, y, z), Vector3::new(vx, vy, vz))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn initial_prediction_lies_in_volume(ball in incoming_ball()) {
        let cfg = PredictorConfig::default();
        let calib = nominal();
        if let Some(pred) = initial_search(&ball, calib.origin_t_table(), &cfg, &PhysicsParams::default()) {
            prop_assert!(cfg.volume.contains(&pred.p_hit));
            prop_assert!(pred.tau >= cfg.t_det_min && pred.tau <= cfg.t_det_max + 1e-12);
        }
    }

    #[test]
    fn refine_stays_in_window(ball in incoming_ball(), tau in 0.01..1.0f64) {
        let cfg = PredictorConfig::default();
        let calib = nominal();
        let prev = StrikePrediction { tau, p_hit: Vector3::zeros(), v_hit: Vector3::zeros() };
        if let Ok(next) = refine(&prev, &ball, calib.origin_t_table(), &cfg, &PhysicsParams::default()) {
            prop_assert!(next.tau >= tau - cfg.refine_half_window - 1e-12);
            prop_assert!(next.tau <= tau + cfg.refine_half_window + 1e-12);
        }
    }

    #[test]
    fn drag_free_search_hits_plane_within_half_step(
        x in 0.3..1.5f64,
        y in -0.3..0.3f64,
        z in 0.2..0.6f64,
        vx in -7.0..-2.0f64,
        vz in 0.0..3.0f64,
    ) {
        let physics = PhysicsParams::default().drag_free();
        let cfg = PredictorConfig { bounce_model: false, ..Default::default() };
        let identity = RigidTransform::identity(FrameId::Origin, FrameId::Table);
        // Origin-frame state directly; z kept well above the floor.
        let ball = BallState::in_table(Vector3::new(x, y, z + 0.6), Vector3::new(vx, 0.0, vz));
        let wide = PredictorConfig {
            volume: rallykit::predictor::StrikeVolume { z_min: -50.0, z_max: 50.0, ..cfg.volume },
            ..cfg
        };
        let pred = initial_search(&ball, &identity, &wide, &physics);
        // Crossing time inside the search horizon.
        if x / -vx <= wide.t_det_max - wide.coarse_step && x / -vx >= wide.t_det_min {
            let pred = pred.expect("crossing inside the horizon");
            prop_assert!(
                (pred.p_hit.x - wide.strike_plane_x).abs() <= vx.abs() * wide.coarse_step / 2.0 + 1e-9
            );
        }
    }
}

#[test]
fn refined_prediction_converges_as_noise_shrinks() {
    let setup = SimSetup::new(51, ScenarioConfig::default());
    let launch = launch_ball(&mut setup.launch_rng(0), &setup).unwrap();
    let o_t_t = setup.calibration.origin_t_table();
    let p_cross = o_t_t.transform_point(&launch.crossing.p);
    let cfg = PredictorConfig {
        sim_dt: 2e-4,
        refine_step: 2e-4,
        ..setup.predictor
    };
    let mut previous = f64::INFINITY;
    for sigma in [2e-2, 1e-2, 5e-3] {
        let sensor = SensorConfig {
            drop_prob: 0.0,
            r_base: sigma * sigma,
            beta: 0.0,
            ..SensorConfig::default()
        };
        let params = EstimatorParams { r_base: sigma * sigma, beta: 0.0, ..setup.estimator };
        let mut total = 0.0;
        let runs = 10;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ekf = AdaptiveEkf::new(params, setup.physics);
            let mut pred: Option<StrikePrediction> = None;
            let mut k = 0;
            loop {
                let t = k as f64 / 60.0;
                if t >= launch.crossing_time {
                    break;
                }
                k += 1;
                let Some(m) = sense(&launch.truth.at(t).state, t, &sensor, &mut rng) else {
                    continue;
                };
                let est = ekf.update(&m).unwrap().estimate;
                pred = match pred {
                    None => initial_search(&est, o_t_t, &cfg, &setup.physics),
                    Some(p) => {
                        let prev = StrikePrediction { tau: p.tau - 1.0 / 60.0, ..p };
                        refine(&prev, &est, o_t_t, &cfg, &setup.physics).ok().or(Some(prev))
                    }
                };
            }
            total += (pred.unwrap().p_hit - p_cross).norm();
        }
        let mean = total / runs as f64;
        assert!(mean < sigma, "σ = {sigma}: final error {mean}");
        assert!(mean < previous, "σ = {sigma}: error {mean} did not shrink from {previous}");
        previous = mean;
    }
}
