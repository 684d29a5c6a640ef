#![allow(dead_code)]

use rigvo::geometry::{unproject, Pose, RigConfig};
use rigvo::loop_closure::KeyframeFeature;
use rigvo::sim::{derive_seed, generate_trajectory, sample_landmarks, Scenario, SimOutput};

/// Simulated run with the landmark cloud regenerated from the scenario seed.
pub struct SimRun {
    pub rig: RigConfig,
    pub out: SimOutput,
    pub landmarks: Vec<nalgebra::Vector3<f64>>,
}

pub fn simulate(rig: &RigConfig, sc: &Scenario) -> SimRun {
    let out = sc.simulate(rig);
    let traj = generate_trajectory(&sc.trajectory);
    let cloud = sample_landmarks(sc.landmark_count, &traj, sc.depth_range, derive_seed(sc.trajectory.seed, 2000));
    SimRun {
        rig: rig.clone(),
        out,
        landmarks: cloud.points,
    }
}

pub fn cameras_in_body(rig: &RigConfig) -> Vec<Pose> {
    rig.cameras().iter().map(|c| c.extrinsic.cam_in_body).collect()
}

/// Keyframe bundle features at `frame`: noisy rays, ground-truth points in the body frame.
pub fn keyframe_features(run: &SimRun, frame: usize) -> Vec<KeyframeFeature> {
    let body = run.out.gt_body_trajectory[frame];
    run.out
        .observations
        .iter()
        .filter(|o| o.frame == frame)
        .filter_map(|o| {
            let lm = run.out.track_landmarks[o.camera][&o.track_id];
            let ray = unproject(&o.pixel, &run.rig.camera(o.camera).intrinsic).ok()?;
            Some(KeyframeFeature {
                camera: o.camera,
                descriptor: o.descriptor?,
                ray: ray.into_inner(),
                point: Some(body.inverse_transform_point(&run.landmarks[lm])),
            })
        })
        .collect()
}

/// Relative poses along `poses` with 1% of each edge's translation length and
/// rotation angle added as error.
pub fn drifted_chain(poses: &[Pose], rate: f64) -> Vec<Pose> {
    let mut out = vec![poses[0]];
    for w in poses.windows(2) {
        let rel = w[0].inverse().compose(&w[1]);
        let step = rel.translation.norm();
        let angle = rigvo::geometry::rotation_angle(&rel.rotation);
        let dt = nalgebra::Vector3::new(0.0, rate * step, 0.0);
        let dr = nalgebra::Vector3::new(0.0, 0.0, rate * angle.max(step * 0.01));
        let noisy = rel.retract(&dr, &dt);
        out.push(out.last().unwrap().compose(&noisy));
    }
    out
}
