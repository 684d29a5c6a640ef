use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigvo::backend::{CameraParams, OptimizeOptions, SlidingWindowState, TriangulationOptions};
use rigvo::geometry::{CameraIntrinsic, Pose, RigConfig};
use rigvo::sim::Scenario;

fn window(seed: u64) -> (SlidingWindowState, Vec<Pose>) {
    let rig = RigConfig::vehicle_four_camera();
    let out = Scenario::circle(30.0, 60, 0.5, 0.0, seed).simulate(&rig);
    let params: Vec<CameraParams> = rig.cameras().iter().map(|c| CameraParams::new(&c.extrinsic, c.intrinsic.focal())).collect();
    let intr: Vec<CameraIntrinsic> = rig.cameras().iter().map(|c| c.intrinsic).collect();
    let poses: Vec<(usize, Pose)> = (0..=10).map(|f| (f, out.gt_body_trajectory[f])).collect();
    let st = SlidingWindowState::from_poses(params, &poses, 10.0, &out.tracks, &intr, &TriangulationOptions::default());
    (st, out.gt_body_trajectory[..=10].to_vec())
}

fn max_error(st: &SlidingWindowState, gt: &[Pose]) -> f64 {
    st.frames.iter().map(|f| (f.pose.translation - gt[f.frame].translation).norm()).fold(0.0, f64::max)
}

#[test]
fn huber_limits_outlier_damage() {
    let (mut base, gt) = window(14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // Corrupt 5% of the observations by 40 px in normalized units.
    for o in base.observations.iter_mut() {
        if rng.random_bool(0.05) {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            o.uv += Vector2::new(a.cos(), a.sin()) * 40.0 * o.sigma / 1.5;
        }
    }
    let opts = OptimizeOptions {
        max_iters: 30,
        ..Default::default()
    };
    let mut robust = base.clone();
    robust.optimize(&opts);
    let mut plain = base;
    plain.optimize(&OptimizeOptions { huber: None, ..opts });
    let (r, p) = (max_error(&robust, &gt), max_error(&plain, &gt));
    assert!(r < p, "huber {r} vs plain {p}");
}

#[test]
fn fixed_frame_is_bitwise_unchanged() {
    let (mut st, _) = window(15);
    let first = st.frames[0].pose;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for f in st.frames.iter_mut().skip(1) {
        let d = nalgebra::Vector3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05));
        f.pose = f.pose.retract(&(d * 0.2), &d);
    }
    let rep = st.optimize(&OptimizeOptions::default());
    assert_eq!(st.frames[0].pose, first);
    assert!(rep.cost_trace.windows(2).all(|w| w[1] <= w[0]));
}
