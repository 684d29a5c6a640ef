//! Initialization: window gating, per-camera monocular SfM and the
//! metric-scale solver built from rigid multi-camera motion consistency.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Unit, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{normalized_observation, CameraParams, Landmark, ReprojObservation, SlidingWindowState};
use crate::frontend::{track_stability, FeatureTrackTable};
use crate::geometry::{body_pose_from_camera, hat, unproject, CameraExtrinsic, CameraIntrinsic, Pose};

/// Frames spanned by the initialization window, not counting its first frame.
pub const WINDOW_SPAN: usize = 10;
/// Required mean parallax for every camera across the window (pixels).
pub const PARALLAX_THRESHOLD: f64 = 30.0;
/// Smallest accepted solved scale.
pub const MIN_SCALE: f64 = 1e-3;
/// Largest accepted condition number of the scale system.
pub const MAX_CONDITION: f64 = 1e8;
/// Minimum lever-arm excitation: RMS rotated-lever-arm offset relative to the
/// RMS inter-camera baseline (radians, small-angle equivalent).
pub const MIN_EXCITATION: f64 = 0.01;

pub const RANSAC_ITERATIONS: usize = 200;
const MIN_RAY_ANGLE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("rays are explained by a pure rotation; translation undetermined")]
    LowParallax,
    #[error("no pose hypothesis places the points in front of both views")]
    Cheirality,
    #[error("pose refinement did not converge")]
    PnpDiverged,
    #[error("camera {camera}: {reason}")]
    SfmFailed { camera: usize, reason: String },
    #[error("need at least two cameras with a reconstruction, got {0}")]
    TooFewCameras(usize),
    #[error("degenerate motion: metric scale unobservable (condition {:.3e})", .0.condition)]
    DegenerateMotion(ScaleEstimate),
    #[error("window not ready for initialization")]
    NotReady,
}

impl InitError {
    /// Scale diagnostics carried by a degenerate-motion error.
    pub fn scale_estimate(&self) -> Option<&ScaleEstimate> {
        match self {
            InitError::DegenerateMotion(e) => Some(e),
            _ => None,
        }
    }
}

/// Scale-ambiguous camera trajectory from monocular SfM. Pose `t` maps camera
/// frame `t` into camera frame 0, so pose 0 is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraSfmTrajectory {
    pub camera: usize,
    pub poses: Vec<Pose>,
    pub inliers: usize,
    /// Triangulated points in camera frame 0, same arbitrary scale as `poses`.
    pub points: BTreeMap<u64, Vector3<f64>>,
}

/// Body trajectory implied by one camera at a trial scale, identity at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTrajectoryHypothesis {
    pub camera: usize,
    pub poses: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSystem {
    /// Stacked observation matrix, three rows per frame and camera pair.
    pub f: DMatrix<f64>,
    /// Scale-independent offsets; the residual is `f * s + theta`.
    pub theta: DVector<f64>,
    /// Camera index of each column.
    pub cameras: Vec<usize>,
    /// RMS rotated lever-arm offset over RMS baseline, for pairwise systems.
    pub excitation: Option<f64>,
}

impl ScaleSystem {
    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    pub fn singular_values(&self) -> (f64, f64) {
        let sv = self.f.clone().svd(false, false).singular_values;
        (sv.min(), sv.max())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleEstimate {
    pub s: Vec<f64>,
    pub residual_rms: f64,
    pub condition: f64,
    pub singular_min: f64,
    pub singular_max: f64,
    pub excitation: Option<f64>,
    pub observable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolveMode {
    /// Normal equations.
    #[default]
    ClosedForm,
    /// Closed form followed by Levenberg-Marquardt iterations on the same cost.
    Damped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Readiness {
    pub ready: bool,
    pub principal: usize,
    pub parallax: Vec<f64>,
    pub stability: Vec<f64>,
}

/// Gates initialization on the window `[start, end]`.
///
/// Ready iff every camera's mean parallax across the window exceeds
/// [`PARALLAX_THRESHOLD`]. The principal camera has the highest track
/// stability (ties go to the lowest index).
pub fn check_initialization_ready(table: &FeatureTrackTable, start: usize, end: usize) -> Readiness {
    let n = table.num_cameras();
    let parallax: Vec<f64> = (0..n).map(|c| table.window_parallax(c, start, end)).collect();
    let stability: Vec<f64> = (0..n).map(|c| track_stability(table, c, start, end)).collect();
    let mut principal = 0;
    for c in 1..n {
        if stability[c] > stability[principal] {
            principal = c;
        }
    }
    Readiness {
        ready: n > 0 && parallax.iter().all(|&p| p > PARALLAX_THRESHOLD),
        principal,
        parallax,
        stability,
    }
}

/// Two-view geometry: `x2 ~ rotation * x1 + translation`, `|translation| = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub inliers: Vec<bool>,
}

impl RelativePose {
    /// Pose of the second view expressed in the first.
    pub fn second_in_first(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::from_matrix_parts(&rt, -(rt * self.translation))
    }

    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn eight_point(x1: &[Vector3<f64>], x2: &[Vector3<f64>], idx: &[usize]) -> Option<Matrix3<f64>> {
    let rows = idx.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (r, &i) in idx.iter().enumerate() {
        let (p, q) = (&x1[i], &x2[i]);
        for u in 0..3 {
            for v in 0..3 {
                a[(r, 3 * u + v)] = q[u] * p[v];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let k = svd.singular_values.imin();
    let e = Matrix3::from_row_slice(vt.row(k).transpose().as_slice());
    let esvd = e.svd(true, true);
    let (u, vt) = (esvd.u?, esvd.v_t?);
    Some(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt)
}

fn epipolar_error(e: &Matrix3<f64>, p: &Vector3<f64>, q: &Vector3<f64>) -> f64 {
    let l2 = e * p;
    let l1 = e.transpose() * q;
    let d = q.dot(&l2).abs();
    let n2 = l2.norm();
    let n1 = l1.norm();
    if n1 < 1e-15 || n2 < 1e-15 {
        return f64::INFINITY;
    }
    (d / n2).max(d / n1)
}

fn decompose_essential(e: &Matrix3<f64>) -> Option<[(Matrix3<f64>, Vector3<f64>); 4]> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Best-fit rotation mapping `x1` onto `x2`.
fn fit_rotation(x1: &[Vector3<f64>], x2: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (p, q) in x1.iter().zip(x2) {
        m += q * p.transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

fn cheirality_count(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &[Vector3<f64>], x2: &[Vector3<f64>], mask: &[bool]) -> usize {
    let second = Pose::from_matrix_parts(&r.transpose(), -(r.transpose() * t));
    let first = Pose::identity();
    (0..x1.len())
        .filter(|&i| mask[i])
        .filter(|&i| triangulate_midpoint(&first, &x1[i], &second, &x2[i]).is_some())
        .count()
}

/// Relative pose from matched unit rays by 8-point + RANSAC.
///
/// `threshold` is the angular inlier threshold in radians (one pixel over
/// the focal length is the usual choice).
pub fn estimate_relative_pose(
    x1: &[Vector3<f64>],
    x2: &[Vector3<f64>],
    threshold: f64,
    seed: u64,
) -> Result<RelativePose, InitError> {
    let n = x1.len().min(x2.len());
    if n < 8 {
        return Err(InitError::TooFewCorrespondences { needed: 8, got: n });
    }
    let (x1, x2) = (&x1[..n], &x2[..n]);

    let r_only = fit_rotation(x1, x2);
    let explained = (0..n)
        .filter(|&i| (r_only * x1[i]).angle(&x2[i]) < 2.0 * threshold)
        .count();
    if explained as f64 >= 0.8 * n as f64 {
        return Err(InitError::LowParallax);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..RANSAC_ITERATIONS {
        let idx = sample(&mut rng, n, 8).into_vec();
        let Some(e) = eight_point(x1, x2, &idx) else {
            continue;
        };
        let mask: Vec<bool> = (0..n).map(|i| epipolar_error(&e, &x1[i], &x2[i]) < threshold).collect();
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (_, mut mask) = best.ok_or(InitError::TooFewCorrespondences { needed: 8, got: 0 })?;
    let mut e = Matrix3::zeros();
    for _ in 0..2 {
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if idx.len() < 8 {
            return Err(InitError::TooFewCorrespondences { needed: 8, got: idx.len() });
        }
        e = eight_point(x1, x2, &idx).ok_or(InitError::Cheirality)?;
        mask = (0..n).map(|i| epipolar_error(&e, &x1[i], &x2[i]) < threshold).collect();
    }
    let inliers = mask.iter().filter(|&&b| b).count();
    if inliers < 8 {
        return Err(InitError::TooFewCorrespondences { needed: 8, got: inliers });
    }
    let hyps = decompose_essential(&e).ok_or(InitError::Cheirality)?;
    let (mut best_i, mut best_c) = (0, 0);
    for (i, (r, t)) in hyps.iter().enumerate() {
        let c = cheirality_count(r, t, x1, x2, &mask);
        if c > best_c {
            best_i = i;
            best_c = c;
        }
    }
    if best_c < inliers / 2 || best_c < 8 {
        return Err(InitError::Cheirality);
    }
    let (rotation, translation) = hyps[best_i];
    Ok(RelativePose {
        rotation,
        translation: translation.normalize(),
        inliers: mask,
    })
}

/// Midpoint triangulation of one correspondence. Poses map camera to world;
/// rays are in their camera frames. Returns the world point, or `None` for
/// zero baseline, near-parallel rays or a point behind either camera.
pub fn triangulate_midpoint(
    pose_a: &Pose,
    ray_a: &Vector3<f64>,
    pose_b: &Pose,
    ray_b: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let (ca, cb) = (pose_a.translation, pose_b.translation);
    let baseline = cb - ca;
    if baseline.norm() < 1e-12 {
        return None;
    }
    let da = (pose_a.rotation * ray_a).normalize();
    let db = (pose_b.rotation * ray_b).normalize();
    if da.angle(&db) < MIN_RAY_ANGLE {
        return None;
    }
    // Minimize |ca + la da - cb - lb db|.
    let b = da.dot(&db);
    let denom = 1.0 - b * b;
    let (p, q) = (da.dot(&baseline), db.dot(&baseline));
    let la = (p - b * q) / denom;
    let lb = (b * p - q) / denom;
    if la <= 0.0 || lb <= 0.0 {
        return None;
    }
    Some(0.5 * ((ca + da * la) + (cb + db * lb)))
}

/// Triangulates every correspondence between two views.
pub fn triangulate(
    pose_a: &Pose,
    pose_b: &Pose,
    rays: &[(Vector3<f64>, Vector3<f64>)],
) -> Vec<Option<Vector3<f64>>> {
    rays.iter()
        .map(|(a, b)| triangulate_midpoint(pose_a, a, pose_b, b))
        .collect()
}

fn ext_at(exts: &[Pose], i: usize) -> Pose {
    exts.get(i).copied().unwrap_or_default()
}

fn pnp_cost_and_normal(
    pose: &Pose,
    points: &[Vector3<f64>],
    rays: &[Vector3<f64>],
    exts: &[Pose],
) -> (f64, nalgebra::Matrix6<f64>, nalgebra::Vector6<f64>) {
    let rt = pose.rotation_matrix().transpose();
    let mut h = nalgebra::Matrix6::zeros();
    let mut g = nalgebra::Vector6::zeros();
    let mut cost = 0.0;
    for (i, (x, obs)) in points.iter().zip(rays).enumerate() {
        let ext = ext_at(exts, i);
        let ret = ext.rotation_matrix().transpose();
        let pb = rt * (x - pose.translation);
        let pc = ret * (pb - ext.translation);
        let n = pc.norm();
        let b = pc / n;
        let r = b - obs;
        cost += r.norm_squared();
        let db = (Matrix3::identity() - b * b.transpose()) / n * ret;
        let mut j = nalgebra::Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(db * hat(&pb)));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(db * -rt));
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    (cost, h, g)
}

fn pnp_cost(pose: &Pose, points: &[Vector3<f64>], rays: &[Vector3<f64>], exts: &[Pose]) -> f64 {
    points
        .iter()
        .zip(rays)
        .enumerate()
        .map(|(i, (x, obs))| {
            let pc = ext_at(exts, i).inverse_transform_point(&pose.inverse_transform_point(x));
            (pc.normalize() - obs).norm_squared()
        })
        .sum()
}

/// Refines a camera-to-world pose against world points and unit rays by
/// Levenberg-Marquardt on the ray residuals.
pub fn pnp_refine(points: &[Vector3<f64>], rays: &[Vector3<f64>], initial: &Pose) -> Result<Pose, InitError> {
    pnp_refine_rig(points, rays, &[], initial)
}

/// Multi-camera variant of [`pnp_refine`]: ray `i` lives in a camera whose
/// pose in the body frame is `cameras_in_body[i]`, and the refined pose is
/// the body pose. An empty `cameras_in_body` means every camera is the body.
pub fn pnp_refine_rig(
    points: &[Vector3<f64>],
    rays: &[Vector3<f64>],
    cameras_in_body: &[Pose],
    initial: &Pose,
) -> Result<Pose, InitError> {
    let n = points.len().min(rays.len());
    if n < 4 {
        return Err(InitError::TooFewCorrespondences { needed: 4, got: n });
    }
    let (points, rays) = (&points[..n], &rays[..n]);
    let exts = cameras_in_body;
    let mut pose = *initial;
    let (mut cost, mut h, mut g) = pnp_cost_and_normal(&pose, points, rays, exts);
    let mut mu = 1e-4 * (0..6).map(|i| h[(i, i)]).fold(0.0, f64::max).max(1e-12);
    let mut nu = 2.0;
    for _ in 0..100 {
        if cost == 0.0 {
            return Ok(pose);
        }
        let damped = h + nalgebra::Matrix6::identity() * mu;
        let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
            mu *= 10.0;
            continue;
        };
        if step.norm() < 1e-10 {
            return Ok(pose);
        }
        let cand = pose.retract(&step.fixed_rows::<3>(0).into(), &step.fixed_rows::<3>(3).into());
        let new_cost = pnp_cost(&cand, points, rays, exts);
        let predicted = -(step.dot(&g) + 0.5 * step.dot(&(h * step)));
        if new_cost < cost && predicted > 0.0 {
            let rho = (cost - new_cost) / predicted;
            pose = cand;
            (cost, h, g) = pnp_cost_and_normal(&pose, points, rays, exts);
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e16 {
                // No descent direction left at machine precision.
                return Ok(pose);
            }
        }
    }
    if cost.is_finite() && g.norm() < 1e-8 * (1.0 + cost) {
        Ok(pose)
    } else {
        Err(InitError::PnpDiverged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfmOptions {
    /// Angular RANSAC threshold in radians.
    pub threshold: f64,
    pub seed: u64,
}

impl SfmOptions {
    pub fn for_intrinsic(intr: &CameraIntrinsic, seed: u64) -> Self {
        Self {
            threshold: 1.0 / intr.focal(),
            seed,
        }
    }
}

/// Monocular reconstruction of one camera over frames `start..=end`.
///
/// The frame pair `(start, k)` with the largest parallax seeds a two-view
/// reconstruction, every other frame is registered by [`pnp_refine`], the
/// trajectory is re-anchored at `start` and scaled so that `|T_k| = 1`.
pub fn monocular_sfm_window(
    table: &FeatureTrackTable,
    camera: usize,
    intrinsic: &CameraIntrinsic,
    start: usize,
    end: usize,
    options: &SfmOptions,
) -> Result<CameraSfmTrajectory, InitError> {
    let fail = |reason: String| InitError::SfmFailed { camera, reason };
    let tracks = table.tracks(camera);
    let ray_at = |id: u64, f: usize| -> Option<Vector3<f64>> {
        let px = tracks.get(&id)?.at(f)?;
        unproject(&px, intrinsic).ok().map(Unit::into_inner)
    };
    let k = (start + 1..=end)
        .max_by(|&a, &b| {
            table
                .window_parallax(camera, start, a)
                .partial_cmp(&table.window_parallax(camera, start, b))
                .unwrap()
                .then(b.cmp(&a))
        })
        .ok_or_else(|| fail("empty window".into()))?;

    let mut ids = Vec::new();
    let (mut x1, mut x2) = (Vec::new(), Vec::new());
    for &id in tracks.keys() {
        if let (Some(a), Some(b)) = (ray_at(id, start), ray_at(id, k)) {
            ids.push(id);
            x1.push(a);
            x2.push(b);
        }
    }
    if ids.len() < 8 {
        return Err(fail(format!("only {} tracks shared by frames {start} and {k}", ids.len())));
    }
    let rel = estimate_relative_pose(&x1, &x2, options.threshold, options.seed)
        .map_err(|e| fail(e.to_string()))?;
    let pose_k = rel.second_in_first();
    let mut points = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if rel.inliers[i] {
            if let Some(p) = triangulate_midpoint(&Pose::identity(), &x1[i], &pose_k, &x2[i]) {
                points.insert(id, p);
            }
        }
    }

    let n = end - start + 1;
    let mut poses: Vec<Option<Pose>> = vec![None; n];
    poses[0] = Some(Pose::identity());
    poses[k - start] = Some(pose_k);
    let register = |f: usize, init: &Pose, points: &BTreeMap<u64, Vector3<f64>>| -> Result<Pose, InitError> {
        let (mut pts, mut rays) = (Vec::new(), Vec::new());
        for (&id, p) in points {
            if let Some(r) = ray_at(id, f) {
                pts.push(*p);
                rays.push(r);
            }
        }
        if pts.len() < 6 {
            return Err(fail(format!("frame {f}: {} registered points", pts.len())));
        }
        pnp_refine(&pts, &rays, init).map_err(|e| fail(format!("frame {f}: {e}")))
    };
    for f in start + 1..=end {
        if poses[f - start].is_none() {
            let init = poses[f - start - 1].unwrap();
            poses[f - start] = Some(register(f, &init, &points)?);
        }
    }
    let poses: Vec<Pose> = poses.into_iter().map(Option::unwrap).collect();

    // Triangulate the remaining tracks from their widest-baseline pair.
    for (&id, track) in tracks {
        if points.contains_key(&id) {
            continue;
        }
        let seen: Vec<usize> = (start..=end).filter(|&f| track.at(f).is_some()).collect();
        if seen.len() < 2 {
            continue;
        }
        let (fa, fb) = (seen[0], seen[seen.len() - 1]);
        if let (Some(a), Some(b)) = (ray_at(id, fa), ray_at(id, fb)) {
            if let Some(p) = triangulate_midpoint(&poses[fa - start], &a, &poses[fb - start], &b) {
                points.insert(id, p);
            }
        }
    }

    let (poses, mut points) = refine_monocular(table, camera, intrinsic, start, poses, points);

    let norm = poses[k - start].translation.norm();
    if !(norm > 0.0) {
        return Err(fail("zero baseline".into()));
    }
    let poses = poses
        .into_iter()
        .map(|p| Pose::new(p.rotation, p.translation / norm))
        .collect();
    for p in points.values_mut() {
        *p /= norm;
    }
    Ok(CameraSfmTrajectory {
        camera,
        poses,
        inliers: rel.inlier_count(),
        points,
    })
}

/// Joint refinement of a monocular reconstruction: poses and points are
/// re-optimized as a single-camera window with the first pose held fixed.
fn refine_monocular(
    table: &FeatureTrackTable,
    camera: usize,
    intrinsic: &CameraIntrinsic,
    start: usize,
    poses: Vec<Pose>,
    points: BTreeMap<u64, Vector3<f64>>,
) -> (Vec<Pose>, BTreeMap<u64, Vector3<f64>>) {
    let single = CameraParams {
        extrinsic: Pose::identity(),
        sigma: crate::backend::PIXEL_SIGMA / intrinsic.focal(),
    };
    let mut state = SlidingWindowState::new(vec![single]);
    for (i, p) in poses.iter().enumerate() {
        state.push_frame(start + i, (start + i) as f64, *p);
    }
    let tracks = table.tracks(camera);
    for (&id, p) in &points {
        let Some(track) = tracks.get(&id) else { continue };
        let seen: Vec<(usize, nalgebra::Vector2<f64>, f64)> = track
            .points
            .iter()
            .filter_map(|&(f, px)| {
                let pos = state.frame_position(f)?;
                let (uv, sigma) = normalized_observation(&px, intrinsic)?;
                Some((pos, uv, sigma))
            })
            .collect();
        if seen.len() < 2 {
            continue;
        }
        let (pa, uv, _) = seen[0];
        let ray = Vector3::new(uv.x, uv.y, 1.0).normalize();
        let depth = state.frames[pa].pose.inverse_transform_point(p).dot(&ray);
        if !(depth > 1e-6) {
            continue;
        }
        state.landmarks.insert(
            (0, id),
            Landmark { camera: 0, track_id: id, anchor_frame: start + pa, ray, inv_depth: 1.0 / depth },
        );
        for (pos, uv, sigma) in seen {
            state.observations.push(ReprojObservation { camera: 0, track_id: id, frame: start + pos, uv, sigma });
        }
    }
    state.optimize(&crate::backend::OptimizeOptions { max_iters: 30, ..Default::default() });
    let points = state
        .landmarks
        .keys()
        .filter_map(|k| state.landmark_point(k).map(|p| (k.1, p)))
        .collect();
    (state.frames.iter().map(|f| f.pose).collect(), points)
}

/// Body trajectory implied by a camera's SfM poses at scale `s`, re-anchored
/// to the identity at `t = 0`.
pub fn body_hypothesis(sfm: &CameraSfmTrajectory, ext: &CameraExtrinsic, s: f64) -> BodyTrajectoryHypothesis {
    let body: Vec<Pose> = sfm
        .poses
        .iter()
        .map(|p| body_pose_from_camera(p, ext, s).expect("positive scale"))
        .collect();
    let anchor = body.first().map(Pose::inverse).unwrap_or_default();
    BodyTrajectoryHypothesis {
        camera: sfm.camera,
        poses: body.iter().map(|b| anchor.compose(b)).collect(),
    }
}

/// Per-frame `(T~, theta)` of one camera: the re-anchored body translation is
/// `s * T~ + theta`.
fn scale_terms(sfm: &CameraSfmTrajectory, ext: &CameraExtrinsic) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let r = ext.cam_in_body.rotation_matrix();
    let t = ext.cam_in_body.translation;
    sfm.poses
        .iter()
        .map(|p| {
            let rc = p.rotation_matrix();
            (r * p.translation, t - r * rc * r.transpose() * t)
        })
        .collect()
}

/// Stacks the pairwise rigid-consistency rows for every frame `t >= 1` and
/// camera pair `i < j`.
pub fn build_scale_system(sfm: &[CameraSfmTrajectory], extrinsics: &[CameraExtrinsic]) -> Result<ScaleSystem, InitError> {
    let n = sfm.len();
    if n < 2 {
        return Err(InitError::TooFewCameras(n));
    }
    let frames = sfm.iter().map(|s| s.poses.len()).min().unwrap_or(0);
    let terms: Vec<_> = sfm.iter().map(|s| scale_terms(s, &extrinsics[s.camera])).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let rows = 3 * frames.saturating_sub(1) * pairs.len();
    let mut f = DMatrix::zeros(rows, n);
    let mut theta = DVector::zeros(rows);
    let (mut off_sq, mut base_sq) = (0.0, 0.0);
    let mut row = 0;
    for t in 1..frames {
        for &(i, j) in &pairs {
            let (ti, thi) = terms[i][t];
            let (tj, thj) = terms[j][t];
            f.view_mut((row, i), (3, 1)).copy_from(&ti);
            f.view_mut((row, j), (3, 1)).copy_from(&-tj);
            theta.rows_mut(row, 3).copy_from(&(thi - thj));
            off_sq += (thi - thj).norm_squared();
            base_sq += (extrinsics[sfm[i].camera].cam_in_body.translation
                - extrinsics[sfm[j].camera].cam_in_body.translation)
                .norm_squared();
            row += 3;
        }
    }
    let excitation = if base_sq > 0.0 { (off_sq / base_sq).sqrt() } else { 0.0 };
    Ok(ScaleSystem {
        f,
        theta,
        cameras: sfm.iter().map(|s| s.camera).collect(),
        excitation: Some(excitation),
    })
}

/// Rows tying each camera to a metric reference trajectory (scale fixed at 1):
/// `s_c * T~_c + theta_c - T_ref`. Used for online scale correction.
pub fn build_reference_scale_system(
    sfm: &[CameraSfmTrajectory],
    extrinsics: &[CameraExtrinsic],
    reference: &[Pose],
) -> ScaleSystem {
    let n = sfm.len();
    let frames = sfm.iter().map(|s| s.poses.len()).min().unwrap_or(0).min(reference.len());
    let anchor = reference.first().map(Pose::inverse).unwrap_or_default();
    let rows = 3 * frames.saturating_sub(1) * n;
    let mut f = DMatrix::zeros(rows, n);
    let mut theta = DVector::zeros(rows);
    let mut row = 0;
    for (c, s) in sfm.iter().enumerate() {
        let terms = scale_terms(s, &extrinsics[s.camera]);
        for t in 1..frames {
            let body = anchor.compose(&reference[t]).translation;
            f.view_mut((row, c), (3, 1)).copy_from(&terms[t].0);
            theta.rows_mut(row, 3).copy_from(&(terms[t].1 - body));
            row += 3;
        }
    }
    ScaleSystem {
        f,
        theta,
        cameras: sfm.iter().map(|s| s.camera).collect(),
        excitation: None,
    }
}

/// Least-squares scales minimizing `|F s + theta|^2`.
///
/// A rank-deficient or homogeneous system is a degenerate-motion error. A
/// solvable but ill-conditioned, weakly excited or non-positive solution is
/// returned with `observable = false`.
pub fn solve_scales(system: &ScaleSystem, mode: SolveMode) -> Result<ScaleEstimate, InitError> {
    let n = system.f.ncols();
    let rows = system.rows();
    let (smin, smax) = if rows > 0 { system.singular_values() } else { (0.0, 0.0) };
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let mut estimate = ScaleEstimate {
        s: vec![0.0; n],
        residual_rms: f64::NAN,
        condition,
        singular_min: smin,
        singular_max: smax,
        excitation: system.excitation,
        observable: false,
    };
    if rows < n || smax == 0.0 || smin <= 1e-12 * smax {
        return Err(InitError::DegenerateMotion(estimate));
    }
    let theta_norm = system.theta.norm();
    if theta_norm <= 1e-12 * smax {
        estimate.residual_rms = 0.0;
        return Err(InitError::DegenerateMotion(estimate));
    }
    let ftf = system.f.transpose() * &system.f;
    let rhs = -(system.f.transpose() * &system.theta);
    let mut s = ftf
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| InitError::DegenerateMotion(estimate.clone()))?;
    if mode == SolveMode::Damped {
        s = damped_refine(&system.f, &system.theta, s);
    }
    let r = &system.f * &s + &system.theta;
    estimate.residual_rms = (r.norm_squared() / rows as f64).sqrt();
    estimate.s = s.iter().copied().collect();
    estimate.observable = condition <= MAX_CONDITION
        && estimate.s.iter().all(|&v| v > MIN_SCALE)
        && system.excitation.is_none_or(|e| e >= MIN_EXCITATION);
    Ok(estimate)
}

fn damped_refine(f: &DMatrix<f64>, theta: &DVector<f64>, mut s: DVector<f64>) -> DVector<f64> {
    let h = f.transpose() * f;
    let mut mu = 1e-6 * h.diagonal().max();
    let cost = |s: &DVector<f64>| (f * s + theta).norm_squared();
    let mut c = cost(&s);
    for _ in 0..50 {
        let g = f.transpose() * (f * &s + theta);
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += mu;
        }
        let Some(step) = damped.cholesky().map(|ch| ch.solve(&-g)) else {
            break;
        };
        let cand = &s + &step;
        let nc = cost(&cand);
        if nc <= c {
            s = cand;
            c = nc;
            mu *= 0.1;
        } else {
            mu *= 10.0;
        }
        if step.norm() <= 1e-15 * (1.0 + s.norm()) {
            break;
        }
    }
    s
}

/// Runs the full initialization chain on the window `[start, end]`: per-camera
/// SfM, the pairwise scale system and its solve. Cameras whose SfM fails are
/// left out of the system.
pub fn initialize_scales(
    table: &FeatureTrackTable,
    intrinsics: &[CameraIntrinsic],
    extrinsics: &[CameraExtrinsic],
    start: usize,
    end: usize,
    seed: u64,
) -> Result<(Vec<CameraSfmTrajectory>, ScaleEstimate), InitError> {
    let mut sfm = Vec::new();
    for c in 0..intrinsics.len() {
        let opts = SfmOptions::for_intrinsic(&intrinsics[c], seed.wrapping_add(c as u64));
        match monocular_sfm_window(table, c, &intrinsics[c], start, end, &opts) {
            Ok(s) => sfm.push(s),
            Err(e) => log::debug!("initialization: {e}"),
        }
    }
    let system = build_scale_system(&sfm, extrinsics)?;
    let est = solve_scales(&system, SolveMode::ClosedForm)?;
    if !est.observable {
        return Err(InitError::DegenerateMotion(est));
    }
    Ok((sfm, est))
}

/// Builds the initial window state from solved scales.
///
/// Body poses follow the principal camera's hypothesis at its solved scale
/// (falling back to the first reconstructed camera), expressed in a world
/// frame equal to the body at the trigger frame `end`. Each camera's SfM
/// points are scaled by that camera's solved scale and anchored at their
/// first in-window observation.
#[allow(clippy::too_many_arguments)]
pub fn initialize_state(
    sfm: &[CameraSfmTrajectory],
    est: &ScaleEstimate,
    principal: usize,
    table: &FeatureTrackTable,
    intrinsics: &[CameraIntrinsic],
    extrinsics: &[CameraExtrinsic],
    start: usize,
    frame_rate: f64,
) -> Result<SlidingWindowState, InitError> {
    if !est.observable {
        return Err(InitError::DegenerateMotion(est.clone()));
    }
    let lead = sfm.iter().position(|s| s.camera == principal).unwrap_or(0);
    let lead_sfm = sfm.get(lead).ok_or(InitError::TooFewCameras(0))?;
    let hyp = body_hypothesis(lead_sfm, &extrinsics[lead_sfm.camera], est.s[lead]);
    let to_world = hyp.poses.last().map(Pose::inverse).unwrap_or_default();
    let cameras = intrinsics
        .iter()
        .zip(extrinsics)
        .map(|(i, e)| CameraParams::new(e, i.focal()))
        .collect();
    let mut state = SlidingWindowState::new(cameras);
    for (k, p) in hyp.poses.iter().enumerate() {
        let f = start + k;
        state.push_frame(f, f as f64 / frame_rate, to_world.compose(p));
    }
    for (traj, &scale) in sfm.iter().zip(&est.s) {
        let c = traj.camera;
        let cam0 = state.camera_pose(0, c);
        for (&id, p) in &traj.points {
            let world = cam0.transform_point(&(p * scale));
            let Some(track) = table.tracks(c).get(&id) else { continue };
            let seen: Vec<(usize, nalgebra::Vector2<f64>, f64)> = track
                .points
                .iter()
                .filter_map(|&(f, px)| {
                    let pos = state.frame_position(f)?;
                    let (uv, sigma) = normalized_observation(&px, &intrinsics[c])?;
                    Some((pos, uv, sigma))
                })
                .collect();
            if seen.len() < 2 {
                continue;
            }
            let (pa, uv, _) = seen[0];
            let ray = Vector3::new(uv.x, uv.y, 1.0).normalize();
            let depth = state.camera_pose(pa, c).inverse_transform_point(&world).dot(&ray);
            if !(depth > 1e-3) {
                continue;
            }
            state.landmarks.insert(
                (c, id),
                Landmark {
                    camera: c,
                    track_id: id,
                    anchor_frame: state.frames[pa].frame,
                    ray,
                    inv_depth: 1.0 / depth,
                },
            );
            for (pos, uv, sigma) in seen {
                let frame = state.frames[pos].frame;
                state.observations.push(ReprojObservation { camera: c, track_id: id, frame, uv, sigma });
            }
        }
    }
    Ok(state)
}

/// One-line-per-camera initialization report.
pub fn init_report(sfm: &[CameraSfmTrajectory], est: &ScaleEstimate) -> String {
    let mut out = String::new();
    for (s, scale) in sfm.iter().zip(&est.s) {
        out.push_str(&format!("camera {} inliers {} scale {:.6}\n", s.camera, s.inliers, scale));
    }
    out.push_str(&format!(
        "residual_rms {:.6e} condition {:.6e} observable {}\n",
        est.residual_rms, est.condition, est.observable
    ));
    out
}
