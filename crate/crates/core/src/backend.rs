//! Sliding-window bundle adjustment over body poses and per-camera
//! inverse-depth landmarks, with a marginalization prior, Huber weighting and
//! online scale correction.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, SymmetricEigen, Vector2, Vector3, Vector6};

use crate::frontend::FeatureTrackTable;
use crate::geometry::{hat, unproject, CameraExtrinsic, CameraIntrinsic, CameraModel, Pose};
use crate::init::{build_scale_system, solve_scales, triangulate_midpoint, CameraSfmTrajectory, SolveMode};

/// Poses held in the window: ten frames plus the incoming one.
pub const WINDOW_CAPACITY: usize = 11;
/// Observation standard deviation in pixels.
pub const PIXEL_SIGMA: f64 = 1.5;
/// Huber threshold in observation standard deviations.
pub const HUBER_THRESHOLD: f64 = 1.0;
/// Smallest eigenvalue kept when inverting marginalized blocks.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Points closer than this to the image plane are gated out.
const MIN_Z: f64 = 1e-6;
/// Largest per-window depth rescaling accepted from the scale solve.
pub const MAX_SCALE_STEP: f64 = 1.25;

/// Per-camera parameters used by the optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    pub extrinsic: Pose,
    /// Observation standard deviation on the normalized image plane.
    pub sigma: f64,
}

impl CameraParams {
    pub fn new(extrinsic: &CameraExtrinsic, focal: f64) -> Self {
        Self {
            extrinsic: extrinsic.cam_in_body,
            sigma: PIXEL_SIGMA / focal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowFrame {
    pub frame: usize,
    pub timestamp: f64,
    /// `world_T_body`.
    pub pose: Pose,
}

pub type LandmarkKey = (usize, u64);

/// A landmark parameterized by inverse depth along a unit ray of its anchor
/// camera at its anchor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub camera: usize,
    pub track_id: u64,
    pub anchor_frame: usize,
    pub ray: Vector3<f64>,
    pub inv_depth: f64,
}

impl Landmark {
    pub fn key(&self) -> LandmarkKey {
        (self.camera, self.track_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojObservation {
    pub camera: usize,
    pub track_id: u64,
    pub frame: usize,
    /// Normalized image coordinates `(x/z, y/z)`.
    pub uv: Vector2<f64>,
    /// Standard deviation on the normalized plane (isotropic covariance).
    pub sigma: f64,
}

impl ReprojObservation {
    pub fn key(&self) -> LandmarkKey {
        (self.camera, self.track_id)
    }
}

/// Gaussian prior on retained poses in square-root form: the residual is
/// `residual + sqrt_info * delta`, with `delta_i = (log(R0_i^T R_i), t_i - t0_i)`
/// about the linearization poses.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalizationPrior {
    pub frames: Vec<usize>,
    pub linearization: Vec<Pose>,
    pub sqrt_info: DMatrix<f64>,
    pub residual: DVector<f64>,
}

impl MarginalizationPrior {
    pub fn dimension(&self) -> usize {
        6 * self.frames.len()
    }

    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }

    pub fn information_vector(&self) -> DVector<f64> {
        self.sqrt_info.transpose() * &self.residual
    }

    fn from_information(frames: Vec<usize>, linearization: Vec<Pose>, h: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        let sym = 0.5 * (h + h.transpose());
        let eig = SymmetricEigen::new(sym);
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > EIGEN_FLOOR * max.max(1.0))
            .collect();
        let n = h.nrows();
        let mut j = DMatrix::zeros(keep.len(), n);
        let mut r = DVector::zeros(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            let l = eig.eigenvalues[i];
            let v = eig.eigenvectors.column(i);
            j.row_mut(row).copy_from(&(v.transpose() * l.sqrt()));
            r[row] = v.dot(b) / l.sqrt();
        }
        Self {
            frames,
            linearization,
            sqrt_info: j,
            residual: r,
        }
    }

    fn delta(&self, poses: &[Pose]) -> DVector<f64> {
        let mut d = DVector::zeros(self.dimension());
        for (i, (p, lin)) in poses.iter().zip(&self.linearization).enumerate() {
            let (dr, dt) = p.local_difference(lin);
            d.fixed_rows_mut::<3>(6 * i).copy_from(&dr);
            d.fixed_rows_mut::<3>(6 * i + 3).copy_from(&dt);
        }
        d
    }
}

/// Bundle-adjustment state: window poses, landmarks, their observations and
/// the marginalization prior.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingWindowState {
    pub cameras: Vec<CameraParams>,
    pub frames: Vec<WindowFrame>,
    pub landmarks: BTreeMap<LandmarkKey, Landmark>,
    pub observations: Vec<ReprojObservation>,
    pub prior: Option<MarginalizationPrior>,
    /// Product of all scale correction factors applied per camera.
    pub scales: Vec<f64>,
}

/// Residual and Jacobians of one observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualJacobians {
    /// Normalized projection minus observation (not whitened).
    pub residual: Vector2<f64>,
    pub anchor: Matrix2x6<f64>,
    pub target: Matrix2x6<f64>,
    pub inv_depth: Vector2<f64>,
    /// Window positions of the anchor and target frames.
    pub anchor_pos: usize,
    pub target_pos: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    /// Huber threshold in standard deviations; `None` is plain least squares.
    pub huber: Option<f64>,
    pub fix_landmarks: bool,
    /// Number of oldest poses held constant.
    pub fixed_frames: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub min_relative_decrease: f64,
    /// Camera whose inverse depths are held constant, as for an external
    /// depth source.
    pub frozen_depth_camera: Option<usize>,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 10,
            huber: Some(HUBER_THRESHOLD),
            fix_landmarks: false,
            fixed_frames: 1,
            min_relative_decrease: 1e-10,
            frozen_depth_camera: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimizeReport {
    /// Cost before the first iteration followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub warning: Option<String>,
}

impl OptimizeReport {
    pub fn final_cost(&self) -> f64 {
        self.cost_trace.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeDecision {
    MarginalizeOldest,
    DiscardSecondNewest,
}

/// Window policy: keep the newest frame as a keyframe when it moved enough
/// or lost too many tracks.
pub fn keyframe_decision(parallax: f64, tracked_ratio: f64) -> KeyframeDecision {
    if parallax > 10.0 || tracked_ratio < 0.5 {
        KeyframeDecision::MarginalizeOldest
    } else {
        KeyframeDecision::DiscardSecondNewest
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MarginalizationReport {
    pub removed_frame: usize,
    pub removed_landmarks: usize,
    pub prior_dimension: usize,
    pub floored_eigenvalues: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScaleCorrectionReport {
    /// Per-camera depth inflation factor that was removed (1 means consistent).
    pub factors: Vec<f64>,
    pub applied: bool,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationOptions {
    /// Minimum angle between the two viewing rays (radians).
    pub min_angle: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Multiplies the initial depth of new landmarks of one camera.
    pub depth_bias: Option<(usize, f64)>,
}

impl Default for TriangulationOptions {
    fn default() -> Self {
        Self {
            min_angle: 1.0f64.to_radians(),
            min_depth: 0.2,
            max_depth: 200.0,
            depth_bias: None,
        }
    }
}

/// Normalized image coordinates and their standard deviation for a pixel.
///
/// For the equidistant model the radial stretch of the normalized plane is
/// folded into the standard deviation. Rays more than ~78 degrees off axis
/// are rejected.
pub fn normalized_observation(pixel: &Vector2<f64>, intr: &CameraIntrinsic) -> Option<(Vector2<f64>, f64)> {
    let ray = unproject(pixel, intr).ok()?;
    if ray.z < 0.2 {
        return None;
    }
    let uv = Vector2::new(ray.x / ray.z, ray.y / ray.z);
    let sigma = match intr.model {
        CameraModel::Pinhole => PIXEL_SIGMA / intr.focal(),
        CameraModel::Equidistant => PIXEL_SIGMA / (intr.focal() * ray.z * ray.z),
    };
    Some((uv, sigma))
}

fn huber_cost(e: f64, k: Option<f64>) -> f64 {
    match k {
        Some(k) if e > k * k => 2.0 * k * e.sqrt() - k * k,
        _ => e,
    }
}

fn huber_weight(e: f64, k: Option<f64>) -> f64 {
    match k {
        Some(k) if e > k * k => k / e.sqrt(),
        _ => 1.0,
    }
}

fn proj_jacobian(p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz)
}

impl SlidingWindowState {
    pub fn new(cameras: Vec<CameraParams>) -> Self {
        let n = cameras.len();
        Self {
            cameras,
            frames: Vec::new(),
            landmarks: BTreeMap::new(),
            observations: Vec::new(),
            prior: None,
            scales: vec![1.0; n],
        }
    }

    /// State over the given `(frame, world_T_body)` poses with landmarks
    /// triangulated from the track table.
    pub fn from_poses(
        cameras: Vec<CameraParams>,
        poses: &[(usize, Pose)],
        frame_rate: f64,
        tracks: &FeatureTrackTable,
        intrinsics: &[CameraIntrinsic],
        opts: &TriangulationOptions,
    ) -> Self {
        let mut state = Self::new(cameras);
        for &(f, p) in poses {
            state.push_frame(f, f as f64 / frame_rate, p);
        }
        state.triangulate_new_landmarks(tracks, intrinsics, opts);
        state
    }

    pub fn frame_position(&self, frame: usize) -> Option<usize> {
        self.frames.binary_search_by(|f| f.frame.cmp(&frame)).ok()
    }

    pub fn pose_of(&self, frame: usize) -> Option<Pose> {
        self.frame_position(frame).map(|i| self.frames[i].pose)
    }

    pub fn push_frame(&mut self, frame: usize, timestamp: f64, pose: Pose) {
        debug_assert!(self.frames.last().is_none_or(|f| f.frame < frame));
        self.frames.push(WindowFrame { frame, timestamp, pose });
    }

    /// Adds the observations at `frame` of tracks that already have a landmark.
    pub fn observe_frame(&mut self, tracks: &FeatureTrackTable, intrinsics: &[CameraIntrinsic], frame: usize) -> usize {
        let mut added = 0;
        for (c, intr) in intrinsics.iter().enumerate() {
            for (&id, track) in tracks.tracks(c) {
                if !self.landmarks.contains_key(&(c, id)) {
                    continue;
                }
                let Some(px) = track.at(frame) else { continue };
                if let Some((uv, sigma)) = normalized_observation(&px, intr) {
                    self.observations.push(ReprojObservation { camera: c, track_id: id, frame, uv, sigma });
                    added += 1;
                }
            }
        }
        added
    }

    /// Creates landmarks for tracks seen in at least two window frames by
    /// triangulating their first and last in-window observations.
    pub fn triangulate_new_landmarks(
        &mut self,
        tracks: &FeatureTrackTable,
        intrinsics: &[CameraIntrinsic],
        opts: &TriangulationOptions,
    ) -> usize {
        let mut created = 0;
        for (c, intr) in intrinsics.iter().enumerate() {
            for (&id, track) in tracks.tracks(c) {
                if self.landmarks.contains_key(&(c, id)) {
                    continue;
                }
                let seen: Vec<(usize, Vector2<f64>, f64)> = track
                    .points
                    .iter()
                    .filter_map(|&(f, px)| {
                        let pos = self.frame_position(f)?;
                        let (uv, sigma) = normalized_observation(&px, intr)?;
                        Some((pos, uv, sigma))
                    })
                    .collect();
                if seen.len() < 2 {
                    continue;
                }
                let (pa, uva, _) = seen[0];
                let (pb, uvb, _) = seen[seen.len() - 1];
                let ray_a = Vector3::new(uva.x, uva.y, 1.0).normalize();
                let ray_b = Vector3::new(uvb.x, uvb.y, 1.0).normalize();
                let (ca, cb) = (self.camera_pose(pa, c), self.camera_pose(pb, c));
                if (ca.rotation * ray_a).angle(&(cb.rotation * ray_b)) < opts.min_angle {
                    continue;
                }
                let Some(p) = triangulate_midpoint(&ca, &ray_a, &cb, &ray_b) else { continue };
                let mut depth = ca.inverse_transform_point(&p).dot(&ray_a);
                if !(depth > opts.min_depth && depth < opts.max_depth) {
                    continue;
                }
                if let Some((bc, k)) = opts.depth_bias {
                    if bc == c {
                        // Biased external source, rescaled by the corrections learned so far.
                        depth *= k / self.scales[c];
                    }
                }
                self.landmarks.insert(
                    (c, id),
                    Landmark {
                        camera: c,
                        track_id: id,
                        anchor_frame: self.frames[pa].frame,
                        ray: ray_a,
                        inv_depth: 1.0 / depth,
                    },
                );
                for (pos, uv, sigma) in seen {
                    self.observations.push(ReprojObservation {
                        camera: c,
                        track_id: id,
                        frame: self.frames[pos].frame,
                        uv,
                        sigma,
                    });
                }
                created += 1;
            }
        }
        created
    }

    /// World position of a landmark at the current estimate.
    pub fn landmark_point(&self, key: &LandmarkKey) -> Option<Vector3<f64>> {
        let lm = self.landmarks.get(key)?;
        let anchor = self.pose_of(lm.anchor_frame)?;
        let ext = &self.cameras[lm.camera].extrinsic;
        Some(anchor.transform_point(&ext.transform_point(&(lm.ray / lm.inv_depth))))
    }

    /// Pose of a camera (`world_T_cam`) at a window position.
    pub fn camera_pose(&self, pos: usize, camera: usize) -> Pose {
        self.frames[pos].pose.compose(&self.cameras[camera].extrinsic)
    }

    /// Evaluates one observation. Returns `None` when the landmark or either
    /// frame is missing or the point lands within `1e-6` of the image plane.
    pub fn reprojection_residual(&self, obs: &ReprojObservation) -> Option<ResidualJacobians> {
        let lm = self.landmarks.get(&obs.key())?;
        let a = self.frame_position(lm.anchor_frame)?;
        let b = self.frame_position(obs.frame)?;
        let ext = &self.cameras[lm.camera].extrinsic;
        let re = ext.rotation_matrix();
        let te = ext.translation;
        if a == b {
            let r = Vector2::new(lm.ray.x / lm.ray.z, lm.ray.y / lm.ray.z) - obs.uv;
            return Some(ResidualJacobians {
                residual: r,
                anchor: Matrix2x6::zeros(),
                target: Matrix2x6::zeros(),
                inv_depth: Vector2::zeros(),
                anchor_pos: a,
                target_pos: b,
            });
        }
        let (pa, pb) = (&self.frames[a].pose, &self.frames[b].pose);
        let (ra, rb) = (pa.rotation_matrix(), pb.rotation_matrix());
        let p_ca = lm.ray / lm.inv_depth;
        let p_ba = re * p_ca + te;
        let p_w = ra * p_ba + pa.translation;
        let p_bb = rb.transpose() * (p_w - pb.translation);
        let p_cb = re.transpose() * (p_bb - te);
        if p_cb.z <= MIN_Z {
            return None;
        }
        let jp = proj_jacobian(&p_cb);
        let m = re.transpose() * rb.transpose();
        let jpm = jp * m;
        let mut anchor = Matrix2x6::zeros();
        anchor.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jpm * (-ra * hat(&p_ba))));
        anchor.fixed_view_mut::<2, 3>(0, 3).copy_from(&jpm);
        let mut target = Matrix2x6::zeros();
        target.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * re.transpose() * hat(&p_bb)));
        target.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jpm));
        let inv_depth = jpm * (ra * re * lm.ray) * (-1.0 / (lm.inv_depth * lm.inv_depth));
        Some(ResidualJacobians {
            residual: Vector2::new(p_cb.x / p_cb.z, p_cb.y / p_cb.z) - obs.uv,
            anchor,
            target,
            inv_depth,
            anchor_pos: a,
            target_pos: b,
        })
    }

    fn prior_terms(&self) -> Option<(Vec<usize>, DVector<f64>, &DMatrix<f64>)> {
        let prior = self.prior.as_ref()?;
        let mut positions = Vec::with_capacity(prior.frames.len());
        let mut poses = Vec::with_capacity(prior.frames.len());
        for &f in &prior.frames {
            let pos = self.frame_position(f)?;
            positions.push(pos);
            poses.push(self.frames[pos].pose);
        }
        let r = &prior.residual + &prior.sqrt_info * prior.delta(&poses);
        Some((positions, r, &prior.sqrt_info))
    }

    /// Total cost: prior plus robustified whitened reprojection terms.
    pub fn cost(&self, huber: Option<f64>) -> f64 {
        let mut c = self.prior_terms().map_or(0.0, |(_, r, _)| r.norm_squared());
        for o in &self.observations {
            if let Some(lm) = self.landmarks.get(&o.key()) {
                if lm.anchor_frame == o.frame {
                    continue;
                }
            }
            if let Some(rj) = self.reprojection_residual(o) {
                c += huber_cost((rj.residual / o.sigma).norm_squared(), huber);
            }
        }
        c
    }

    /// Landmarks that have at least one in-window observation besides the anchor.
    fn active_landmarks(&self, frozen_camera: Option<usize>) -> BTreeMap<LandmarkKey, usize> {
        let mut keys = BTreeSet::new();
        for o in &self.observations {
            if Some(o.camera) == frozen_camera {
                continue;
            }
            if let Some(lm) = self.landmarks.get(&o.key()) {
                if lm.anchor_frame != o.frame && self.frame_position(o.frame).is_some() {
                    keys.insert(o.key());
                }
            }
        }
        keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect()
    }

    /// Damped Gauss-Newton with Schur elimination of the inverse depths.
    pub fn optimize(&mut self, opts: &OptimizeOptions) -> OptimizeReport {
        let mut report = OptimizeReport::default();
        let nf = self.frames.len();
        let fixed = opts.fixed_frames.min(nf);
        let np = 6 * (nf - fixed);
        let lm_index = if opts.fix_landmarks {
            BTreeMap::new()
        } else {
            self.active_landmarks(opts.frozen_depth_camera)
        };
        let nl = lm_index.len();
        let mut cost = self.cost(opts.huber);
        report.cost_trace.push(cost);
        if np == 0 && nl == 0 {
            return report;
        }
        let mut mu = -1.0;
        let mut nu = 2.0;
        let mut rejections = 0;
        let mut lin = None;
        while report.iterations < opts.max_iters {
            report.iterations += 1;
            if lin.is_none() {
                lin = Some(self.linearize(&lm_index, fixed, opts.huber));
            }
            let sys = lin.as_ref().unwrap();
            if mu < 0.0 {
                let maxd = (0..np).map(|i| sys.hpp[(i, i)]).chain(sys.hll.iter().copied()).fold(0.0, f64::max);
                mu = 1e-4 * maxd.max(1e-12);
            }
            let Some((dp, dl)) = sys.solve(mu) else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let step_norm = (dp.norm_squared() + dl.norm_squared()).sqrt();
            if step_norm < 1e-12 {
                break;
            }
            let mut cand = self.clone();
            cand.apply_step(&dp, &dl, &lm_index, fixed);
            let positive = cand.landmarks.values().all(|l| l.inv_depth > 0.0);
            let new_cost = if positive { cand.cost(opts.huber) } else { f64::INFINITY };
            if new_cost < cost {
                let g_dot = dp.dot(&sys.gp) + dl.dot(&sys.gl);
                let predicted = -g_dot + mu * step_norm * step_norm;
                let rho = if predicted > 0.0 { (cost - new_cost) / predicted } else { 0.5 };
                *self = cand;
                let rel = (cost - new_cost) / cost.max(1e-300);
                cost = new_cost;
                report.cost_trace.push(cost);
                report.accepted += 1;
                rejections = 0;
                mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                lin = None;
                if rel < opts.min_relative_decrease || cost < 1e-24 {
                    break;
                }
            } else {
                rejections += 1;
                mu *= nu;
                nu *= 2.0;
                if rejections >= 5 {
                    report.warning = Some(format!("converged with warning: {rejections} consecutive rejected steps"));
                    break;
                }
            }
        }
        report
    }

    fn apply_step(&mut self, dp: &DVector<f64>, dl: &DVector<f64>, lm_index: &BTreeMap<LandmarkKey, usize>, fixed: usize) {
        for (i, f) in self.frames.iter_mut().enumerate().skip(fixed) {
            let o = 6 * (i - fixed);
            f.pose = f.pose.retract(&dp.fixed_rows::<3>(o).into(), &dp.fixed_rows::<3>(o + 3).into());
        }
        for (k, &i) in lm_index {
            if let Some(lm) = self.landmarks.get_mut(k) {
                lm.inv_depth += dl[i];
            }
        }
    }

    fn linearize(&self, lm_index: &BTreeMap<LandmarkKey, usize>, fixed: usize, huber: Option<f64>) -> LinearSystem {
        let nf = self.frames.len();
        let np = 6 * (nf - fixed);
        let nl = lm_index.len();
        let mut sys = LinearSystem {
            hpp: DMatrix::zeros(np, np),
            gp: DVector::zeros(np),
            hll: vec![0.0; nl],
            gl: DVector::zeros(nl),
            hpl: vec![Vec::new(); nl],
        };
        let block = |pos: usize| -> Option<usize> { (pos >= fixed).then(|| 6 * (pos - fixed)) };
        for o in &self.observations {
            let Some(lm) = self.landmarks.get(&o.key()) else { continue };
            if lm.anchor_frame == o.frame {
                continue;
            }
            let Some(rj) = self.reprojection_residual(o) else { continue };
            let r = rj.residual / o.sigma;
            let w = huber_weight(r.norm_squared(), huber);
            let blocks = [(block(rj.anchor_pos), rj.anchor / o.sigma), (block(rj.target_pos), rj.target / o.sigma)];
            for (bi, ji) in &blocks {
                let Some(bi) = *bi else { continue };
                let mut gv = sys.gp.fixed_rows_mut::<6>(bi);
                gv += ji.transpose() * r * w;
                for (bj, jj) in &blocks {
                    let Some(bj) = *bj else { continue };
                    let h = ji.transpose() * jj * w;
                    let mut v = sys.hpp.fixed_view_mut::<6, 6>(bi, bj);
                    v += h;
                }
            }
            if let Some(&li) = lm_index.get(&o.key()) {
                let jl = rj.inv_depth / o.sigma;
                sys.hll[li] += w * jl.norm_squared();
                sys.gl[li] += w * jl.dot(&r);
                for (bi, ji) in &blocks {
                    let Some(bi) = *bi else { continue };
                    let c: Vector6<f64> = ji.transpose() * jl * w;
                    match sys.hpl[li].iter_mut().find(|(b, _)| *b == bi) {
                        Some((_, v)) => *v += c,
                        None => sys.hpl[li].push((bi, c)),
                    }
                }
            }
        }
        if let Some((positions, r, j)) = self.prior_terms() {
            for (a, &pa) in positions.iter().enumerate() {
                let Some(ba) = block(pa) else { continue };
                let ja = j.columns(6 * a, 6);
                let g = ja.transpose() * &r;
                let mut gv = sys.gp.fixed_rows_mut::<6>(ba);
                gv += g;
                for (b, &pb) in positions.iter().enumerate() {
                    let Some(bb) = block(pb) else { continue };
                    let h = ja.transpose() * j.columns(6 * b, 6);
                    let mut v = sys.hpp.view_mut((ba, bb), (6, 6));
                    v += h;
                }
            }
        }
        sys
    }

    /// Removes the oldest frame, folding its information and that of the
    /// landmarks anchored there into the prior. Surviving observations of
    /// those landmarks are re-anchored to their next in-window observation.
    pub fn marginalize_oldest(&mut self, huber: Option<f64>) -> MarginalizationReport {
        let mut report = MarginalizationReport::default();
        if self.frames.len() < 2 {
            return report;
        }
        let old = self.frames[0].frame;
        report.removed_frame = old;
        let removed: BTreeMap<LandmarkKey, usize> = self
            .landmarks
            .values()
            .filter(|l| l.anchor_frame == old)
            .map(|l| l.key())
            .enumerate()
            .map(|(i, k)| (k, i))
            .collect();
        report.removed_landmarks = removed.len();

        // Variables: oldest pose, removed landmarks, then retained poses that
        // share a factor with them.
        let mut retained: Vec<usize> = Vec::new();
        let mut factors = Vec::new();
        for o in &self.observations {
            if !removed.contains_key(&o.key()) || o.frame == old {
                continue;
            }
            if let Some(rj) = self.reprojection_residual(o) {
                if !retained.contains(&rj.target_pos) {
                    retained.push(rj.target_pos);
                }
                factors.push((*o, rj));
            }
        }
        let prior = self.prior_terms();
        if let Some((positions, _, _)) = &prior {
            for &p in positions {
                if p != 0 && !retained.contains(&p) {
                    retained.push(p);
                }
            }
        }
        retained.sort_unstable();
        let nr = retained.len();
        let nl = removed.len();
        let col_of = |pos: usize| -> Option<usize> {
            if pos == 0 {
                Some(0)
            } else {
                retained.iter().position(|&p| p == pos).map(|i| 6 + nl + 6 * i)
            }
        };
        let n = 6 + nl + 6 * nr;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for (o, rj) in &factors {
            let r = rj.residual / o.sigma;
            let w = huber_weight(r.norm_squared(), huber);
            let li = 6 + removed[&o.key()];
            let mut cols: Vec<(usize, DMatrix<f64>)> = Vec::new();
            cols.push((col_of(rj.anchor_pos).unwrap(), DMatrix::from_column_slice(2, 6, (rj.anchor / o.sigma).as_slice())));
            cols.push((col_of(rj.target_pos).unwrap(), DMatrix::from_column_slice(2, 6, (rj.target / o.sigma).as_slice())));
            cols.push((li, DMatrix::from_column_slice(2, 1, (rj.inv_depth / o.sigma).as_slice())));
            for (ci, ji) in &cols {
                let mut gv = g.rows_mut(*ci, ji.ncols());
                gv += ji.transpose() * r * w;
                for (cj, jj) in &cols {
                    let mut hv = h.view_mut((*ci, *cj), (ji.ncols(), jj.ncols()));
                    hv += ji.transpose() * jj * w;
                }
            }
        }
        if let Some((positions, r, j)) = &prior {
            for (a, &pa) in positions.iter().enumerate() {
                let ca = col_of(pa).unwrap();
                let ja = j.columns(6 * a, 6);
                let mut gv = g.rows_mut(ca, 6);
                gv += ja.transpose() * r;
                for (b, &pb) in positions.iter().enumerate() {
                    let cb = col_of(pb).unwrap();
                    let mut hv = h.view_mut((ca, cb), (6, 6));
                    hv += ja.transpose() * j.columns(6 * b, 6);
                }
            }
        }
        let (hp, gp, floored) = schur_marginalize_pose_and_landmarks(&h, &g, nl);
        report.floored_eigenvalues = floored;
        if floored > 0 {
            report
                .diagnostics
                .push(format!("marginalizing frame {old}: {floored} eigenvalues floored at {EIGEN_FLOOR:e}"));
        }
        let frames: Vec<usize> = retained.iter().map(|&p| self.frames[p].frame).collect();
        let lin: Vec<Pose> = retained.iter().map(|&p| self.frames[p].pose).collect();
        self.prior = if nr == 0 {
            None
        } else {
            Some(MarginalizationPrior::from_information(frames, lin, &hp, &gp))
        };
        report.prior_dimension = 6 * nr;

        let points: BTreeMap<LandmarkKey, Vector3<f64>> =
            removed.keys().filter_map(|k| self.landmark_point(k).map(|p| (*k, p))).collect();
        self.frames.remove(0);
        self.observations.retain(|o| o.frame != old);
        self.reanchor(&points);
        report
    }

    /// Drops the second-newest frame and its observations. Its block is
    /// eliminated from the prior when the prior refers to it.
    pub fn discard_second_newest(&mut self) {
        let n = self.frames.len();
        if n < 3 {
            return;
        }
        let gone = self.frames[n - 2].frame;
        let points: BTreeMap<LandmarkKey, Vector3<f64>> = self
            .landmarks
            .values()
            .filter(|l| l.anchor_frame == gone)
            .filter_map(|l| self.landmark_point(&l.key()).map(|p| (l.key(), p)))
            .collect();
        if let Some(prior) = self.prior.take() {
            self.prior = eliminate_from_prior(prior, gone);
        }
        self.frames.remove(n - 2);
        self.observations.retain(|o| o.frame != gone);
        self.reanchor(&points);
    }

    /// Re-anchors the given landmarks (whose anchors left the window) at their
    /// next observation, keeping the world point, and drops landmarks left
    /// with fewer than two observations.
    fn reanchor(&mut self, points: &BTreeMap<LandmarkKey, Vector3<f64>>) {
        let mut first: BTreeMap<LandmarkKey, (usize, Vector2<f64>)> = BTreeMap::new();
        let mut counts: BTreeMap<LandmarkKey, usize> = BTreeMap::new();
        for o in &self.observations {
            *counts.entry(o.key()).or_default() += 1;
            let e = first.entry(o.key()).or_insert((o.frame, o.uv));
            if o.frame < e.0 {
                *e = (o.frame, o.uv);
            }
        }
        for (key, p) in points {
            let Some(&(f, uv)) = first.get(key) else {
                self.landmarks.remove(key);
                continue;
            };
            let cam = self.pose_of(f).map(|b| b.compose(&self.cameras[key.0].extrinsic));
            let ray = Vector3::new(uv.x, uv.y, 1.0).normalize();
            let depth = cam.map(|c| c.inverse_transform_point(p).dot(&ray)).unwrap_or(-1.0);
            match self.landmarks.get_mut(key) {
                Some(lm) if depth > 1e-6 => {
                    lm.anchor_frame = f;
                    lm.ray = ray;
                    lm.inv_depth = 1.0 / depth;
                }
                _ => {
                    self.landmarks.remove(key);
                }
            }
        }
        let keep: BTreeSet<LandmarkKey> = self
            .landmarks
            .keys()
            .filter(|k| counts.get(k).copied().unwrap_or(0) >= 2)
            .copied()
            .collect();
        self.landmarks.retain(|k, _| keep.contains(k));
        let landmarks = &self.landmarks;
        self.observations.retain(|o| landmarks.contains_key(&o.key()));
    }

    /// Re-estimates each camera's trajectory and depths monocularly from its
    /// own observations, resolves their metric scales with the pairwise rig
    /// system and replaces each camera's inverse depths by the metric ones.
    /// The reported factor is the geometric-mean change of a camera's
    /// inverse depths, i.e. the depth inflation that was removed.
    pub fn correct_scale(&mut self, min_landmarks: usize) -> ScaleCorrectionReport {
        let n = self.cameras.len();
        let mut report = ScaleCorrectionReport {
            factors: vec![1.0; n],
            ..Default::default()
        };
        if self.frames.len() < 3 {
            report.diagnostics.push("scale correction skipped: window too short".into());
            return report;
        }
        let mut sfm = Vec::new();
        let mut exts = Vec::new();
        let mut singles = Vec::new();
        for c in 0..n {
            let landmarks: BTreeMap<LandmarkKey, Landmark> =
                self.landmarks.iter().filter(|(k, _)| k.0 == c).map(|(k, l)| (*k, *l)).collect();
            if landmarks.len() < min_landmarks {
                report.diagnostics.push(format!("camera {c}: {} landmarks, skipped", landmarks.len()));
                continue;
            }
            let mut single = SlidingWindowState::new(vec![CameraParams {
                extrinsic: Pose::identity(),
                sigma: self.cameras[c].sigma,
            }]);
            for (i, f) in self.frames.iter().enumerate() {
                single.push_frame(f.frame, f.timestamp, self.camera_pose(i, c));
            }
            single.landmarks = landmarks
                .into_iter()
                .map(|((_, id), l)| ((0, id), Landmark { camera: 0, ..l }))
                .collect();
            single.observations = self
                .observations
                .iter()
                .filter(|o| o.camera == c)
                .map(|o| ReprojObservation { camera: 0, ..*o })
                .collect();
            single.optimize(&OptimizeOptions {
                max_iters: 20,
                ..Default::default()
            });
            let anchor = single.frames[0].pose.inverse();
            sfm.push(CameraSfmTrajectory {
                camera: c,
                poses: single.frames.iter().map(|f| anchor.compose(&f.pose)).collect(),
                inliers: single.landmarks.len(),
                points: BTreeMap::new(),
            });
            exts.push(c);
            singles.push(single);
        }
        if sfm.is_empty() {
            report.diagnostics.push("scale correction skipped: no camera has enough landmarks".into());
            return report;
        }
        let extrinsics: Vec<CameraExtrinsic> =
            self.cameras.iter().map(|c| CameraExtrinsic::new(c.extrinsic)).collect();
        let system = match build_scale_system(&sfm, &extrinsics) {
            Ok(system) => system,
            Err(e) => {
                report.diagnostics.push(format!("scale correction skipped: {e}"));
                return report;
            }
        };
        let est = match solve_scales(&system, SolveMode::ClosedForm) {
            Ok(e) if e.observable => e,
            Ok(e) => {
                report.diagnostics.push(format!("scale correction skipped: unobservable (condition {:.3e})", e.condition));
                return report;
            }
            Err(e) => {
                report.diagnostics.push(format!("scale correction skipped: {e}"));
                return report;
            }
        };
        // Camera c's metric depths are its monocular depths times s.
        let mut updates = Vec::new();
        for ((&c, s), single) in exts.iter().zip(&est.s).zip(&singles) {
            let (mut log_sum, mut count) = (0.0, 0usize);
            let mut depths = Vec::new();
            for ((_, id), mono) in &single.landmarks {
                if let Some(lm) = self.landmarks.get(&(c, *id)) {
                    let inv = mono.inv_depth / s;
                    if inv > 0.0 && lm.inv_depth > 0.0 {
                        log_sum += (inv / lm.inv_depth).ln();
                        count += 1;
                        depths.push((*id, inv));
                    }
                }
            }
            let factor = if count > 0 { (log_sum / count as f64).exp() } else { 1.0 };
            if !(1.0 / MAX_SCALE_STEP..=MAX_SCALE_STEP).contains(&factor) {
                report.diagnostics.push(format!("scale correction skipped: camera {c} factor {factor:.3} implausible"));
                return report;
            }
            updates.push((c, factor, depths));
        }
        for (c, factor, depths) in updates {
            for (id, inv) in depths {
                if let Some(lm) = self.landmarks.get_mut(&(c, id)) {
                    lm.inv_depth = inv;
                }
            }
            report.factors[c] = factor;
            self.scales[c] *= factor;
        }
        report.applied = true;
        report
    }
}

/// Marginalizes the leading `m` variables of `(h, g)`, inverting the removed
/// block through an eigen-decomposition with floored eigenvalues.
fn schur_marginalize(h: &DMatrix<f64>, g: &DVector<f64>, m: usize) -> (DMatrix<f64>, DVector<f64>, usize) {
    let n = h.nrows();
    let r = n - m;
    let hmm = h.view((0, 0), (m, m)).into_owned();
    let hmr = h.view((0, m), (m, r)).into_owned();
    let hrr = h.view((m, m), (r, r)).into_owned();
    let (inv, floored) = floored_inverse(&hmm);
    let gm = g.rows(0, m).into_owned();
    let gr = g.rows(m, r).into_owned();
    let k = hmr.transpose() * &inv;
    let mut hp = hrr - &k * &hmr;
    hp = 0.5 * (&hp + hp.transpose());
    (hp, gr - k * gm, floored)
}

/// Marginalizes a leading 6-dof pose followed by `nl` scalar landmarks whose
/// mutual block is diagonal. Landmarks go first by rank-1 updates, then the
/// pose block through [`schur_marginalize`].
fn schur_marginalize_pose_and_landmarks(h: &DMatrix<f64>, g: &DVector<f64>, nl: usize) -> (DMatrix<f64>, DVector<f64>, usize) {
    let n = h.nrows();
    let keep: Vec<usize> = (0..6).chain(6 + nl..n).collect();
    let k = keep.len();
    let mut hk = DMatrix::from_fn(k, k, |r, c| h[(keep[r], keep[c])]);
    let mut gk = DVector::from_fn(k, |r, _| g[keep[r]]);
    let mut floored = 0;
    for l in 6..6 + nl {
        let d = h[(l, l)];
        if d <= EIGEN_FLOOR {
            floored += 1;
            continue;
        }
        let col = DVector::from_fn(k, |r, _| h[(keep[r], l)]);
        if col.iter().all(|v| *v == 0.0) {
            continue;
        }
        hk.ger(-1.0 / d, &col, &col, 1.0);
        gk.axpy(-g[l] / d, &col, 1.0);
    }
    let (hp, gp, f2) = schur_marginalize(&hk, &gk, 6);
    (hp, gp, floored + f2)
}

fn floored_inverse(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = SymmetricEigen::new(0.5 * (a + a.transpose()));
    let mut floored = 0;
    let inv_vals = eig.eigenvalues.map(|l| {
        if l > EIGEN_FLOOR {
            1.0 / l
        } else {
            floored += 1;
            0.0
        }
    });
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&inv_vals) * v.transpose(), floored)
}

fn eliminate_from_prior(prior: MarginalizationPrior, frame: usize) -> Option<MarginalizationPrior> {
    let Some(i) = prior.frames.iter().position(|&f| f == frame) else {
        return Some(prior);
    };
    if prior.frames.len() == 1 {
        return None;
    }
    let h = prior.information();
    let b = prior.information_vector();
    let n = h.nrows();
    let order: Vec<usize> = (6 * i..6 * i + 6).chain((0..n).filter(|k| *k / 6 != i)).collect();
    let hp = DMatrix::from_fn(n, n, |r, c| h[(order[r], order[c])]);
    let bp = DVector::from_fn(n, |r, _| b[order[r]]);
    let (hs, bs, _) = schur_marginalize(&hp, &bp, 6);
    let mut frames = prior.frames.clone();
    let mut lin = prior.linearization.clone();
    frames.remove(i);
    lin.remove(i);
    Some(MarginalizationPrior::from_information(frames, lin, &hs, &bs))
}

struct LinearSystem {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<f64>,
    gl: DVector<f64>,
    /// Sparse pose-landmark coupling per landmark: `(pose column, 6-vector)`.
    hpl: Vec<Vec<(usize, Vector6<f64>)>>,
}

impl LinearSystem {
    /// Solves the damped system for `(pose step, landmark step)`.
    fn solve(&self, mu: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let np = self.hpp.nrows();
        let mut s = self.hpp.clone();
        for i in 0..np {
            s[(i, i)] += mu;
        }
        let mut rhs = -&self.gp;
        for (l, coupling) in self.hpl.iter().enumerate() {
            let d = self.hll[l] + mu;
            for (bi, ci) in coupling {
                let mut rv = rhs.fixed_rows_mut::<6>(*bi);
                rv += ci * (self.gl[l] / d);
                for (bj, cj) in coupling {
                    let mut sv = s.fixed_view_mut::<6, 6>(*bi, *bj);
                    sv -= ci * cj.transpose() / d;
                }
            }
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut dl = DVector::zeros(self.hll.len());
        for (l, coupling) in self.hpl.iter().enumerate() {
            let mut v = -self.gl[l];
            for (bi, ci) in coupling {
                v -= ci.dot(&dp.fixed_rows::<6>(*bi));
            }
            dl[l] = v / (self.hll[l] + mu);
        }
        Some((dp, dl))
    }
}

/// Rotation-only helper used by tests and the pipeline.
pub fn rotation_error(a: &Pose, b: &Pose) -> f64 {
    (a.rotation.inverse() * b.rotation).angle()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigConfig;
    use crate::sim::{Scenario, SimOutput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(rig: &RigConfig) -> Vec<CameraParams> {
        rig.cameras().iter().map(|c| CameraParams::new(&c.extrinsic, c.intrinsic.focal())).collect()
    }

    fn intrinsics(rig: &RigConfig) -> Vec<CameraIntrinsic> {
        rig.cameras().iter().map(|c| c.intrinsic).collect()
    }

    fn gt_window(rig: &RigConfig, out: &SimOutput, start: usize, end: usize) -> SlidingWindowState {
        let poses: Vec<(usize, Pose)> = (start..=end).map(|f| (f, out.gt_body_trajectory[f])).collect();
        SlidingWindowState::from_poses(params(rig), &poses, 10.0, &out.tracks, &intrinsics(rig), &TriangulationOptions::default())
    }

    fn noiseless(seed: u64) -> (RigConfig, SimOutput) {
        let rig = RigConfig::vehicle_four_camera();
        let out = Scenario::circle(100.0, 200, 0.0, 0.0, seed).simulate(&rig);
        (rig, out)
    }

    fn max_position_error(state: &SlidingWindowState, out: &SimOutput) -> f64 {
        state
            .frames
            .iter()
            .map(|f| (f.pose.translation - out.gt_body_trajectory[f.frame].translation).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn anchor_frame_residual_is_zero() {
        let (rig, out) = noiseless(1);
        let state = gt_window(&rig, &out, 0, 10);
        let lm = *state.landmarks.values().next().unwrap();
        let obs = state.observations.iter().find(|o| o.key() == lm.key() && o.frame == lm.anchor_frame).unwrap();
        let mut s2 = state.clone();
        for inv in [0.01, 0.5, 3.0] {
            s2.landmarks.get_mut(&lm.key()).unwrap().inv_depth = inv;
            assert!(s2.reprojection_residual(obs).unwrap().residual.norm() < 1e-15);
        }
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let (rig, out) = noiseless(2);
        let mut state = gt_window(&rig, &out, 0, 10);
        assert!(state.landmarks.len() > 100);
        for o in &state.observations {
            assert!(state.reprojection_residual(o).unwrap().residual.norm() < 1e-10);
        }
        let report = state.optimize(&OptimizeOptions::default());
        assert!(report.cost_trace[0] < 1e-18, "{:?}", report.cost_trace);
        assert!(max_position_error(&state, &out) < 1e-9);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let (rig, out) = noiseless(3);
        let state = gt_window(&rig, &out, 0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for o in state.observations.iter().step_by(17) {
            let Some(rj) = state.reprojection_residual(o) else { continue };
            if rj.anchor_pos == rj.target_pos {
                continue;
            }
            let mut st = state.clone();
            for f in &mut st.frames {
                let dr = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                f.pose = f.pose.retract(&dr, &(dr * 2.0));
            }
            let Some(rj) = st.reprojection_residual(o) else { continue };
            for (pos, jac) in [(rj.anchor_pos, rj.anchor), (rj.target_pos, rj.target)] {
                for k in 0..6 {
                    let mut d = Vector6::zeros();
                    d[k] = h;
                    let eval = |sign: f64| {
                        let mut s = st.clone();
                        let p = &mut s.frames[pos].pose;
                        *p = p.retract(&(d * sign).fixed_rows::<3>(0).into(), &(d * sign).fixed_rows::<3>(3).into());
                        s.reprojection_residual(o).unwrap().residual
                    };
                    let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
                    let an = jac.column(k);
                    assert!((fd - an).norm() <= 1e-5 * an.norm().max(1e-3), "{fd} vs {an}");
                }
            }
            let lm = st.landmarks[&o.key()];
            let eval = |v: f64| {
                let mut s = st.clone();
                s.landmarks.get_mut(&o.key()).unwrap().inv_depth = v;
                s.reprojection_residual(o).unwrap().residual
            };
            let hl = h * lm.inv_depth;
            let fd = (eval(lm.inv_depth + hl) - eval(lm.inv_depth - hl)) / (2.0 * hl);
            assert!((fd - rj.inv_depth).norm() <= 1e-5 * rj.inv_depth.norm().max(1e-3));
        }
    }

    #[test]
    fn perturbed_poses_recover_ground_truth() {
        let (rig, out) = noiseless(4);
        let mut state = gt_window(&rig, &out, 0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in state.frames.iter_mut().skip(1) {
            let dr = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize() * 0.05;
            let dt = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize() * 0.1;
            f.pose = f.pose.retract(&dr, &dt);
        }
        let report = state.optimize(&OptimizeOptions { max_iters: 50, ..Default::default() });
        for w in report.cost_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(max_position_error(&state, &out) < 1e-6, "{}", max_position_error(&state, &out));
    }

    #[test]
    fn keyframe_policy() {
        assert_eq!(keyframe_decision(0.0, 1.0), KeyframeDecision::DiscardSecondNewest);
        assert_eq!(keyframe_decision(20.0, 1.0), KeyframeDecision::MarginalizeOldest);
        assert_eq!(keyframe_decision(2.0, 0.3), KeyframeDecision::MarginalizeOldest);
    }

    #[test]
    fn prior_is_symmetric_psd() {
        let (rig, out) = noiseless(5);
        let mut state = gt_window(&rig, &out, 0, 11);
        let rep = state.marginalize_oldest(Some(HUBER_THRESHOLD));
        let prior = state.prior.as_ref().unwrap();
        assert_eq!(rep.prior_dimension, prior.dimension());
        let h = prior.information();
        assert!((&h - h.transpose()).abs().max() < 1e-12 * h.abs().max().max(1.0));
        let min = SymmetricEigen::new(h).eigenvalues.min();
        // PSD by construction (J^T J); the tolerance absorbs eigensolver roundoff.
        assert!(min >= -1e-9 * prior.information().abs().max().max(1.0), "{min}");
        assert_eq!(state.frames.len(), 11);
        assert!(state.landmarks.values().all(|l| state.frame_position(l.anchor_frame).is_some()));
    }

    #[test]
    fn disconnected_oldest_gives_no_prior() {
        let (rig, out) = noiseless(6);
        let mut state = gt_window(&rig, &out, 0, 5);
        let old = state.frames[0].frame;
        let keys: Vec<_> = state.landmarks.values().filter(|l| l.anchor_frame == old).map(|l| l.key()).collect();
        for k in keys {
            state.landmarks.remove(&k);
        }
        let lm = &state.landmarks;
        state.observations.retain(|o| lm.contains_key(&o.key()) && o.frame != old);
        state.marginalize_oldest(None);
        assert!(state.prior.as_ref().is_none_or(|p| p.information().abs().max() == 0.0));
    }

    #[test]
    fn scale_correction_fixed_point_and_inflation() {
        let (rig, out) = noiseless(7);
        let mut state = gt_window(&rig, &out, 0, 10);
        let before = state.clone();
        let rep = state.correct_scale(10);
        assert!(rep.applied, "{:?}", rep.diagnostics);
        for f in &rep.factors {
            assert!((f - 1.0).abs() < 1e-9, "{f}");
        }
        for (a, b) in state.landmarks.values().zip(before.landmarks.values()) {
            assert!((a.inv_depth / b.inv_depth - 1.0).abs() < 1e-9);
        }

        for lm in state.landmarks.values_mut().filter(|l| l.camera == 2) {
            lm.inv_depth /= 1.1;
        }
        let rep = state.correct_scale(10);
        assert!((rep.factors[2] - 1.1).abs() < 0.011, "{:?}", rep.factors);
        for (a, b) in state.landmarks.values().zip(before.landmarks.values()) {
            assert!((a.inv_depth / b.inv_depth - 1.0).abs() < 0.01);
        }
    }
}
