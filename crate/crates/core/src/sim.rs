//! Deterministic synthetic multi-camera rig: trajectories, landmarks, noisy
//! feature tracks and binary descriptors with ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Observation};
use crate::descriptor::Descriptor;
use crate::frontend::FeatureTrackTable;
use crate::geometry::{project, Pose, RigConfig};
use crate::init::CameraSfmTrajectory;

/// Derives an independent stream seed; used for per-camera streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrajectoryKind {
    /// Planar circle traversed `laps` times, yaw tangent to the path.
    Circle { laps: f64 },
    /// Figure-eight (lemniscate of Gerono) traversed `laps` times.
    Lemniscate { laps: f64 },
    /// Constant heading and orientation along body `x`.
    StraightLine,
    /// Forward motion with a smoothly varying random heading.
    SmoothRandom,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration_frames: usize,
    pub frame_rate: f64,
    /// Meters per second.
    pub speed: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn step_length(&self) -> f64 {
        self.speed / self.frame_rate
    }

    /// Total path length in meters.
    pub fn path_length(&self) -> f64 {
        self.step_length() * self.duration_frames as f64
    }
}

fn yaw_pose(x: f64, y: f64, yaw: f64) -> Pose {
    Pose::new(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        Vector3::new(x, y, 0.0),
    )
}

/// Body poses (`world_T_body`) for every frame of the spec.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Vec<Pose> {
    let n = spec.duration_frames;
    let step = spec.step_length();
    match spec.kind {
        TrajectoryKind::Circle { laps } => {
            let radius = step * n as f64 / (2.0 * PI * laps);
            (0..n)
                .map(|i| {
                    let a = 2.0 * PI * laps * i as f64 / n as f64;
                    yaw_pose(radius * a.sin(), radius * (1.0 - a.cos()), a)
                })
                .collect()
        }
        TrajectoryKind::Lemniscate { laps } => {
            // Unit-size curve length by fine quadrature, then scale to the path length.
            let samples = 20_000;
            let unit_len: f64 = (0..samples)
                .map(|k| {
                    let p = 2.0 * PI * (k as f64 + 0.5) / samples as f64;
                    p.cos().hypot((2.0 * p).cos())
                })
                .sum::<f64>()
                * 2.0
                * PI
                / samples as f64;
            let amp = step * n as f64 / (laps * unit_len);
            (0..n)
                .map(|i| {
                    let p = 2.0 * PI * laps * i as f64 / n as f64;
                    let (dx, dy) = (p.cos(), (2.0 * p).cos());
                    yaw_pose(amp * p.sin(), 0.5 * amp * (2.0 * p).sin(), dy.atan2(dx))
                })
                .collect()
        }
        TrajectoryKind::StraightLine => (0..n)
            .map(|i| Pose::from_translation(Vector3::new(step * i as f64, 0.0, 0.0)))
            .collect(),
        TrajectoryKind::SmoothRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let terms: Vec<(f64, f64, f64)> = (0..3)
                .map(|k| {
                    let amp = rng.random_range(0.2..0.6) / (k + 1) as f64;
                    let freq = rng.random_range(0.5..1.5) * (k + 1) as f64 * 2.0 * PI / n as f64;
                    (amp, freq, rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            let heading = |t: f64| -> f64 {
                terms
                    .iter()
                    .map(|(a, w, ph)| a * ((w * t + ph).sin() - ph.sin()))
                    .sum()
            };
            let mut pos = Vector2::zeros();
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(yaw_pose(pos.x, pos.y, heading(i as f64)));
                let mid = heading(i as f64 + 0.5);
                pos += Vector2::new(mid.cos(), mid.sin()) * step;
            }
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkCloud {
    /// World-frame positions; the landmark id is the index.
    pub points: Vec<Vector3<f64>>,
    pub descriptors: Vec<Descriptor>,
    pub depth_range: (f64, f64),
}

impl LandmarkCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn nearest_distance(p: &Vector3<f64>, trajectory: &[Pose]) -> f64 {
    trajectory
        .iter()
        .map(|t| (t.translation - p).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Samples `count` landmarks whose distance to the nearest trajectory point
/// lies within `depth_range`. Directions stay within +-35 degrees of the
/// horizontal plane so that horizontally mounted cameras see them.
pub fn sample_landmarks(
    count: usize,
    trajectory: &[Pose],
    depth_range: (f64, f64),
    seed: u64,
) -> LandmarkCloud {
    assert!(count > 0 && !trajectory.is_empty());
    assert!(0.0 < depth_range.0 && depth_range.0 < depth_range.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut descriptors = Vec::with_capacity(count);
    let max_elev = 35f64.to_radians();
    while points.len() < count {
        let origin = trajectory[rng.random_range(0..trajectory.len())].translation;
        let az = rng.random_range(-PI..PI);
        let el = rng.random_range(-max_elev.sin()..max_elev.sin()).asin();
        let d = rng.random_range(depth_range.0..depth_range.1);
        let p = origin + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * d;
        let nearest = nearest_distance(&p, trajectory);
        if nearest < depth_range.0 || nearest > depth_range.1 {
            continue;
        }
        points.push(p);
        descriptors.push(Descriptor::random(&mut rng));
    }
    LandmarkCloud {
        points,
        descriptors,
        depth_range,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub dropout_prob: f64,
    pub descriptor_flip_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            pixel_sigma: 0.0,
            dropout_prob: 0.0,
            descriptor_flip_rate: 0.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub gt_body_trajectory: Vec<Pose>,
    pub frame_rate: f64,
    pub tracks: FeatureTrackTable,
    /// Sorted by `(frame, camera, track_id)`, each with its descriptor.
    pub observations: Vec<Observation>,
    /// Per camera: track id to source landmark index.
    pub track_landmarks: Vec<BTreeMap<u64, usize>>,
    /// Exact (noise-free) pixel of every observation, parallel to `observations`.
    pub exact_pixels: Vec<Vector2<f64>>,
    pub gt_scales: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl SimOutput {
    pub fn to_dataset(&self) -> Dataset {
        Dataset::new(
            self.frame_rate,
            self.observations.clone(),
            self.gt_body_trajectory.iter().copied().map(Some).collect(),
        )
    }
}

struct CameraRender {
    observations: Vec<Observation>,
    exact: Vec<Vector2<f64>>,
    track_landmarks: BTreeMap<u64, usize>,
    empty_frames: usize,
}

fn render_camera(
    rig: &RigConfig,
    cam_idx: usize,
    trajectory: &[Pose],
    cloud: &LandmarkCloud,
    noise: &NoiseSpec,
) -> CameraRender {
    let cam = rig.camera(cam_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, cam_idx as u64));
    let normal = Normal::new(0.0, noise.pixel_sigma.max(0.0)).expect("finite sigma");
    let mut next_id: u64 = 0;
    // landmark -> (track id, last frame seen)
    let mut active: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    let mut out = CameraRender {
        observations: Vec::new(),
        exact: Vec::new(),
        track_landmarks: BTreeMap::new(),
        empty_frames: 0,
    };
    for (frame, body) in trajectory.iter().enumerate() {
        let world_t_cam = body.compose(&cam.extrinsic.cam_in_body);
        let mut seen = 0;
        for (lm, p_world) in cloud.points.iter().enumerate() {
            let p_cam = world_t_cam.inverse_transform_point(p_world);
            let dist = p_cam.norm();
            if dist < cloud.depth_range.0 * 0.5 || dist > cloud.depth_range.1 {
                continue;
            }
            let Ok(exact) = project(&p_cam, &cam.intrinsic) else {
                continue;
            };
            if !cam.intrinsic.contains(&exact) {
                continue;
            }
            let pixel = if noise.pixel_sigma > 0.0 {
                exact + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                exact
            };
            if !cam.intrinsic.contains(&pixel) {
                continue;
            }
            let continuing = match active.get(&lm) {
                Some(&(_, last)) if last + 1 == frame => rng.random::<f64>() >= noise.dropout_prob,
                _ => false,
            };
            let id = if continuing {
                active[&lm].0
            } else {
                let id = next_id;
                next_id += 1;
                out.track_landmarks.insert(id, lm);
                id
            };
            active.insert(lm, (id, frame));
            let descriptor = cloud.descriptors[lm].with_bit_flips(noise.descriptor_flip_rate, &mut rng);
            out.observations.push(Observation {
                frame,
                camera: cam_idx,
                track_id: id,
                pixel,
                descriptor: Some(descriptor),
            });
            out.exact.push(exact);
            seen += 1;
        }
        if seen == 0 {
            out.empty_frames += 1;
        }
    }
    out
}

/// Renders every landmark visible to every camera at every frame.
///
/// Cameras draw from independent seeded streams, so the result does not
/// depend on the order in which cameras are processed.
pub fn render_observations(
    rig: &RigConfig,
    trajectory: &[Pose],
    cloud: &LandmarkCloud,
    noise: &NoiseSpec,
    frame_rate: f64,
) -> SimOutput {
    let renders: Vec<CameraRender> = (0..rig.len())
        .map(|c| render_camera(rig, c, trajectory, cloud, noise))
        .collect();
    let mut warnings = Vec::new();
    let mut paired: Vec<(Observation, Vector2<f64>)> = Vec::new();
    let mut track_landmarks = Vec::with_capacity(rig.len());
    for (c, r) in renders.into_iter().enumerate() {
        if 2 * r.empty_frames > trajectory.len() {
            warnings.push(format!(
                "camera {c} sees no landmarks in {} of {} frames",
                r.empty_frames,
                trajectory.len()
            ));
        }
        paired.extend(r.observations.into_iter().zip(r.exact));
        track_landmarks.push(r.track_landmarks);
    }
    paired.sort_by(|(a, _), (b, _)| (a.frame, a.camera, a.track_id).cmp(&(b.frame, b.camera, b.track_id)));
    let (observations, exact_pixels): (Vec<_>, Vec<_>) = paired.into_iter().unzip();
    let tracks = FeatureTrackTable::from_observations(rig.len(), &observations);
    SimOutput {
        gt_body_trajectory: trajectory.to_vec(),
        frame_rate,
        tracks,
        observations,
        track_landmarks,
        exact_pixels,
        gt_scales: None,
        warnings,
    }
}

/// Per-camera monocular trajectories with the metric scale removed: each
/// camera's world trajectory is re-anchored to identity at frame 0, then its
/// translations are divided by `s_true[c]`.
pub fn make_scale_ambiguous_sfm(
    rig: &RigConfig,
    trajectory: &[Pose],
    s_true: &[f64],
) -> Vec<CameraSfmTrajectory> {
    assert_eq!(s_true.len(), rig.len());
    assert!(trajectory.len() >= 2);
    rig.cameras()
        .iter()
        .enumerate()
        .map(|(c, cam)| {
            assert!(s_true[c] > 0.0);
            let cams: Vec<Pose> = trajectory
                .iter()
                .map(|b| b.compose(&cam.extrinsic.cam_in_body))
                .collect();
            let anchor = cams[0].inverse();
            let poses = cams
                .iter()
                .map(|p| {
                    let mut rel = anchor.compose(p);
                    rel.translation /= s_true[c];
                    rel
                })
                .collect();
            CameraSfmTrajectory {
                camera: c,
                poses,
                inliers: 0,
                points: BTreeMap::new(),
            }
        })
        .collect()
}

/// A complete simulated scenario description.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub trajectory: TrajectorySpec,
    pub landmark_count: usize,
    pub depth_range: (f64, f64),
    pub noise: NoiseSpec,
}

impl Scenario {
    /// Circle with the given path length, frame count and noise, seeded throughout by `seed`.
    pub fn circle(path_length: f64, frames: usize, pixel_sigma: f64, dropout: f64, seed: u64) -> Self {
        let frame_rate = 10.0;
        Scenario {
            trajectory: TrajectorySpec {
                kind: TrajectoryKind::Circle { laps: 1.0 },
                duration_frames: frames,
                frame_rate,
                speed: path_length * frame_rate / frames as f64,
                seed,
            },
            landmark_count: 3000,
            depth_range: (3.0, 25.0),
            noise: NoiseSpec {
                pixel_sigma,
                dropout_prob: dropout,
                descriptor_flip_rate: 0.05,
                seed: derive_seed(seed, 1000),
            },
        }
    }

    pub fn simulate(&self, rig: &RigConfig) -> SimOutput {
        let traj = generate_trajectory(&self.trajectory);
        let cloud = sample_landmarks(
            self.landmark_count,
            &traj,
            self.depth_range,
            derive_seed(self.trajectory.seed, 2000),
        );
        render_observations(rig, &traj, &cloud, &self.noise, self.trajectory.frame_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(kind: TrajectoryKind, n: usize) -> TrajectorySpec {
        TrajectorySpec {
            kind,
            duration_frames: n,
            frame_rate: 10.0,
            speed: 5.0,
            seed: 3,
        }
    }

    #[test]
    fn circle_closes_within_one_step() {
        // radius 10 m over 100 frames
        let s = TrajectorySpec {
            speed: 2.0 * PI * 10.0 / 10.0,
            ..spec(TrajectoryKind::Circle { laps: 1.0 }, 100)
        };
        let traj = generate_trajectory(&s);
        let gap = (traj[0].translation - traj[99].translation).norm();
        assert!(gap <= s.step_length() + 1e-9, "gap {gap}");
        let r = traj.iter().map(|p| (p.translation - Vector3::new(0.0, 10.0, 0.0)).norm());
        for d in r {
            assert_relative_eq!(d, 10.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn straight_line_has_constant_rotation() {
        let traj = generate_trajectory(&spec(TrajectoryKind::StraightLine, 30));
        assert!(traj.iter().all(|p| p.rotation == traj[0].rotation));
    }

    #[test]
    fn yaw_is_tangent_on_curves() {
        for kind in [TrajectoryKind::Circle { laps: 1.0 }, TrajectoryKind::Lemniscate { laps: 1.0 }, TrajectoryKind::SmoothRandom] {
            let traj = generate_trajectory(&spec(kind, 400));
            for w in traj.windows(3) {
                let dir = (w[2].translation - w[0].translation).normalize();
                let fwd = w[1].rotation * Vector3::x();
                assert!(dir.dot(&fwd) > 0.99, "{kind:?}");
            }
        }
    }

    #[test]
    fn trajectory_is_deterministic() {
        for kind in [TrajectoryKind::SmoothRandom, TrajectoryKind::Lemniscate { laps: 2.0 }] {
            assert_eq!(generate_trajectory(&spec(kind, 50)), generate_trajectory(&spec(kind, 50)));
        }
    }

    #[test]
    fn landmarks_respect_depth_range_and_seed() {
        let traj = generate_trajectory(&spec(TrajectoryKind::Circle { laps: 1.0 }, 100));
        let a = sample_landmarks(1000, &traj, (2.0, 30.0), 1);
        assert_eq!(a.len(), 1000);
        assert_eq!(a.descriptors.len(), 1000);
        for p in &a.points {
            let d = nearest_distance(p, &traj);
            assert!((2.0..=30.0).contains(&d));
        }
        let b = sample_landmarks(1000, &traj, (2.0, 30.0), 2);
        assert_ne!(a.points, b.points);
        assert_eq!(a, sample_landmarks(1000, &traj, (2.0, 30.0), 1));
    }

    fn small_sim(noise: NoiseSpec) -> SimOutput {
        let rig = RigConfig::vehicle_four_camera();
        let s = spec(TrajectoryKind::Circle { laps: 1.0 }, 40);
        let traj = generate_trajectory(&s);
        let cloud = sample_landmarks(800, &traj, (3.0, 25.0), 9);
        render_observations(&rig, &traj, &cloud, &noise, s.frame_rate)
    }

    #[test]
    fn noiseless_observations_equal_projection() {
        let out = small_sim(NoiseSpec::noiseless(1));
        assert!(!out.observations.is_empty());
        for (o, e) in out.observations.iter().zip(&out.exact_pixels) {
            assert_eq!(o.pixel, *e);
        }
    }

    #[test]
    fn full_dropout_gives_unit_tracks() {
        let out = small_sim(NoiseSpec { dropout_prob: 1.0, ..NoiseSpec::noiseless(1) });
        for c in 0..4 {
            assert!(out.tracks.tracks(c).values().all(|t| t.len() == 1));
        }
    }

    #[test]
    fn pixel_noise_statistics() {
        let out = small_sim(NoiseSpec { pixel_sigma: 0.5, ..NoiseSpec::noiseless(4) });
        let residuals: Vec<f64> = out
            .observations
            .iter()
            .zip(&out.exact_pixels)
            .flat_map(|(o, e)| [o.pixel.x - e.x, o.pixel.y - e.y])
            .take(20_000)
            .collect();
        assert!(residuals.len() >= 10_000);
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.5).abs() < 0.05, "std {std}");
    }

    #[test]
    fn render_is_deterministic() {
        let noise = NoiseSpec { pixel_sigma: 0.7, dropout_prob: 0.05, descriptor_flip_rate: 0.1, seed: 5 };
        assert_eq!(small_sim(noise), small_sim(noise));
    }

    #[test]
    fn descriptor_noise_matches_expected_hamming() {
        let rate = 0.05;
        let out = small_sim(NoiseSpec { descriptor_flip_rate: rate, ..NoiseSpec::noiseless(8) });
        // Pair consecutive observations of the same landmark in camera 0.
        let mut by_landmark: BTreeMap<usize, Vec<Descriptor>> = BTreeMap::new();
        for o in out.observations.iter().filter(|o| o.camera == 0) {
            let lm = out.track_landmarks[0][&o.track_id];
            by_landmark.entry(lm).or_default().push(o.descriptor.unwrap());
        }
        let mut dists = Vec::new();
        for ds in by_landmark.values() {
            for w in ds.windows(2) {
                dists.push(w[0].hamming(&w[1]) as f64);
            }
        }
        assert!(dists.len() >= 2000, "{} pairs", dists.len());
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let expected = 2.0 * 256.0 * rate * (1.0 - rate);
        assert!((mean - expected).abs() < 0.15 * expected, "mean {mean} expected {expected}");
    }

    #[test]
    fn scale_ambiguous_sfm_divides_translations() {
        let rig = RigConfig::vehicle_four_camera();
        let traj = generate_trajectory(&spec(TrajectoryKind::Circle { laps: 1.0 }, 20));
        let one = make_scale_ambiguous_sfm(&rig, &traj, &[1.0; 4]);
        let two = make_scale_ambiguous_sfm(&rig, &traj, &[1.0, 2.0, 1.0, 1.0]);
        for (a, b) in one[1].poses.iter().zip(&two[1].poses) {
            assert_eq!(a.rotation, b.rotation);
            assert_relative_eq!(a.translation, b.translation * 2.0, epsilon = 1e-12);
        }
        assert_eq!(one[0].poses[0].translation, Vector3::zeros());
        // Exact re-anchored camera trajectory.
        let ext = rig.camera(2).extrinsic.cam_in_body;
        let expect = (traj[0] * ext).inverse() * (traj[7] * ext);
        assert!((one[2].poses[7].translation - expect.translation).norm() < 1e-12);
    }
}
