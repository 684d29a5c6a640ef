//! Orchestration: frontend selection, initialization, sliding-window
//! optimization with scale correction, loop closure and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector2;
use thiserror::Error;

use crate::backend::{
    keyframe_decision, KeyframeDecision, OptimizeOptions, SlidingWindowState, TriangulationOptions, WINDOW_CAPACITY,
};
use crate::dataset::{Dataset, Observation};
use crate::eval::{EvalError, MetricReport};
use crate::frontend::{
    feature_score, select_features_3priority, FeatureCandidate, FeatureTrackTable, Rect, TrackedFeature,
    DEFAULT_SUPPRESSION_RADIUS,
};
use crate::geometry::{unproject, CameraIntrinsic, GeometryError, Pose, RigConfig};
use crate::init::{check_initialization_ready, initialize_scales, initialize_state, InitError, ScaleEstimate, WINDOW_SPAN};
use crate::io::{self, IoError, TrajectoryRecord};
use crate::loop_closure::{
    edge_information, EdgeKind, KeyframeFeature, LoopDatabase, LoopError, PoseGraph, Vocabulary, DEFAULT_BRANCHING, DEFAULT_DEPTH,
};
use crate::sim::{derive_seed, Scenario};

/// Features kept per camera per frame.
pub const DEFAULT_FEATURES_PER_CAMERA: usize = 150;
/// Initialization attempts before giving up.
pub const MAX_INIT_ATTEMPTS: usize = 12;
/// Descriptors used to train an in-run vocabulary, evenly subsampled.
const VOCAB_TRAINING_CAP: usize = 50_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("initialization failed after {attempts} attempts: {last}")]
    InitFailed { attempts: usize, last: String },
    #[error("degenerate motion: metric scale unobservable (condition {:.3e}, excitation {:?})", .0.condition, .0.excitation)]
    DegenerateMotion(ScaleEstimate),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Io(IoError::Parse { .. } | IoError::Validation { .. } | IoError::Geometry(_)) => 2,
            PipelineError::Geometry(_) => 2,
            PipelineError::InitFailed { .. } => 3,
            PipelineError::DegenerateMotion(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InputMode {
    Simulate(Scenario),
    Ingest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub rig: PathBuf,
    pub input: InputMode,
    pub loop_closure: bool,
    pub scale_correction: bool,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    /// Camera subset, renumbered in the given order.
    pub cameras: Option<Vec<usize>>,
    pub vocabulary: Option<PathBuf>,
}

/// Knobs of a single run over an in-memory dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOptions {
    pub loop_closure: bool,
    pub scale_correction: bool,
    pub seed: u64,
    pub features_per_camera: usize,
    pub optimize: OptimizeOptions,
    pub triangulation: TriangulationOptions,
    /// Minimum landmarks per camera for scale correction.
    pub scale_min_landmarks: usize,
    pub vocabulary: Option<Vocabulary>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            loop_closure: false,
            scale_correction: true,
            seed: 0,
            features_per_camera: DEFAULT_FEATURES_PER_CAMERA,
            optimize: OptimizeOptions {
                min_relative_decrease: 1e-6,
                ..Default::default()
            },
            triangulation: TriangulationOptions::default(),
            scale_min_landmarks: 10,
            vocabulary: None,
        }
    }
}

impl PipelineOptions {
    /// Emulates a camera whose landmark depths come from a source biased by
    /// `factor`: new depths are multiplied by it and the window optimization
    /// holds them, so only scale correction can rescale them.
    pub fn with_depth_bias(mut self, camera: usize, factor: f64) -> Self {
        self.triangulation.depth_bias = Some((camera, factor));
        self.optimize.frozen_depth_camera = Some(camera);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryRecord {
    pub frame: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub scale_factors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PipelineOutput {
    pub trajectory: TrajectoryRecord,
    pub records: Vec<OdometryRecord>,
    pub ground_truth: Option<TrajectoryRecord>,
    pub init_frame: usize,
    pub init_scales: Vec<f64>,
    /// `(query frame, matched frame)` of every accepted loop.
    pub loops: Vec<(usize, usize)>,
    pub diagnostics: Vec<String>,
    pub timings: Vec<(String, f64)>,
}

#[derive(Default)]
struct Timer {
    totals: BTreeMap<&'static str, f64>,
}

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.totals.entry(stage).or_default() += t.elapsed().as_secs_f64();
        out
    }
}

/// Per-camera frontend: keeps tracked features alive and tops them up with
/// new candidates picked by the 3-priority selector.
struct Frontend {
    active: Vec<BTreeMap<u64, (Vector2<f64>, usize)>>,
    bounds: Vec<Rect>,
    target: usize,
}

impl Frontend {
    fn new(intrinsics: &[CameraIntrinsic], target: usize) -> Self {
        Self {
            active: vec![BTreeMap::new(); intrinsics.len()],
            bounds: intrinsics.iter().map(|i| Rect::image(i.width, i.height)).collect(),
            target,
        }
    }

    fn process(&mut self, observations: &[Observation]) -> Vec<Vec<(u64, Vector2<f64>)>> {
        let n = self.active.len();
        let mut out = vec![Vec::new(); n];
        for (c, out_c) in out.iter_mut().enumerate() {
            let obs: Vec<&Observation> = observations.iter().filter(|o| o.camera == c).collect();
            let mut tracked = Vec::new();
            let mut next: BTreeMap<u64, (Vector2<f64>, usize)> = BTreeMap::new();
            let mut candidates = Vec::new();
            let mut candidate_ids = Vec::new();
            for o in &obs {
                if let Some(&(_, age)) = self.active[c].get(&o.track_id) {
                    tracked.push(TrackedFeature {
                        id: o.track_id,
                        pixel: o.pixel,
                        age: age + 1,
                    });
                    next.insert(o.track_id, (o.pixel, age + 1));
                } else if self.bounds[c].contains(&o.pixel) {
                    candidates.push(FeatureCandidate {
                        pixel: o.pixel,
                        score: feature_score(c, o.track_id),
                    });
                    candidate_ids.push(o.track_id);
                }
            }
            let room = self.target.saturating_sub(tracked.len());
            if room > 0 {
                for i in select_features_3priority(&tracked, &candidates, self.bounds[c], room, DEFAULT_SUPPRESSION_RADIUS) {
                    next.insert(candidate_ids[i], (candidates[i].pixel, 1));
                }
            }
            *out_c = next.iter().map(|(&id, &(px, _))| (id, px)).collect();
            self.active[c] = next;
        }
        out
    }
}

/// Mean pixel displacement between two frames over tracks seen in both, and
/// the fraction of the older frame's tracks still present in the newer one.
fn frame_motion(table: &FeatureTrackTable, older: usize, newer: usize) -> (f64, f64) {
    let (mut sum, mut common, mut base) = (0.0, 0usize, 0usize);
    for c in 0..table.num_cameras() {
        for t in table.tracks(c).values() {
            let Some(a) = t.at(older) else { continue };
            base += 1;
            if let Some(b) = t.at(newer) {
                sum += (b - a).norm();
                common += 1;
            }
        }
    }
    let parallax = if common > 0 { sum / common as f64 } else { 0.0 };
    let ratio = if base > 0 { common as f64 / base as f64 } else { 0.0 };
    (parallax, ratio)
}

fn keyframe_features(
    state: &SlidingWindowState,
    table: &FeatureTrackTable,
    observations: &[Observation],
    intrinsics: &[CameraIntrinsic],
    frame: usize,
) -> Vec<KeyframeFeature> {
    let Some(pose) = state.pose_of(frame) else { return Vec::new() };
    let mut out = Vec::new();
    for o in observations {
        let Some(descriptor) = o.descriptor else { continue };
        if table.tracks(o.camera).get(&o.track_id).and_then(|t| t.at(frame)).is_none() {
            continue;
        }
        let Ok(ray) = unproject(&o.pixel, &intrinsics[o.camera]) else { continue };
        let point = state
            .landmark_point(&(o.camera, o.track_id))
            .map(|p| pose.inverse_transform_point(&p));
        out.push(KeyframeFeature {
            camera: o.camera,
            descriptor,
            ray: ray.into_inner(),
            point,
        });
    }
    out
}

fn ground_truth_record(ds: &Dataset) -> Option<TrajectoryRecord> {
    let entries: Vec<(f64, Pose)> = ds
        .ground_truth
        .iter()
        .enumerate()
        .filter_map(|(f, p)| p.map(|p| (ds.timestamp(f), p)))
        .collect();
    if entries.is_empty() {
        None
    } else {
        TrajectoryRecord::new(entries).ok()
    }
}

/// Vocabulary trained on a dataset's own descriptors.
pub fn train_vocabulary(ds: &Dataset, seed: u64) -> Vocabulary {
    let all = ds.descriptors();
    let stride = all.len().div_ceil(VOCAB_TRAINING_CAP).max(1);
    let sample: Vec<_> = all.into_iter().step_by(stride).collect();
    Vocabulary::build(&sample, DEFAULT_BRANCHING, DEFAULT_DEPTH, derive_seed(seed, 0x70C))
}

/// Runs the whole pipeline over an in-memory dataset.
pub fn run_dataset(rig: &RigConfig, ds: &Dataset, opts: &PipelineOptions) -> Result<PipelineOutput, PipelineError> {
    let n_cams = rig.len();
    if ds.num_cameras() > n_cams {
        return Err(PipelineError::Config(format!(
            "dataset has {} cameras but the rig only {n_cams}",
            ds.num_cameras()
        )));
    }
    let intrinsics: Vec<CameraIntrinsic> = rig.cameras().iter().map(|c| c.intrinsic).collect();
    let extrinsics = rig.extrinsics();
    let frames = ds.frames();
    let mut timer = Timer::default();
    let mut out = PipelineOutput {
        ground_truth: ground_truth_record(ds),
        ..Default::default()
    };

    let mut frontend = Frontend::new(&intrinsics, opts.features_per_camera);
    let mut table = FeatureTrackTable::new(n_cams);
    let mut state: Option<SlidingWindowState> = None;
    let mut attempts = 0;
    let mut last_init_error: Option<InitError> = None;

    let mut loop_db = if opts.loop_closure {
        let vocab = match &opts.vocabulary {
            Some(v) => v.clone(),
            None => timer.time("vocabulary", || train_vocabulary(ds, opts.seed)),
        };
        let mut db = LoopDatabase::new(vocab);
        db.verify.seed = derive_seed(opts.seed, 0x100F);
        Some(db)
    } else {
        None
    };
    let cams_in_body: Vec<Pose> = extrinsics.iter().map(|e| e.cam_in_body).collect();
    // Final poses of frames that left the window, and keyframe bookkeeping
    // for loop correction.
    let mut finished: BTreeMap<usize, Pose> = BTreeMap::new();
    let mut keyframes: Vec<(usize, Pose)> = Vec::new();
    let mut scale_factors = vec![1.0; n_cams];
    let mut factor_history: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

    for (f, obs) in frames.iter().enumerate() {
        let selected = timer.time("frontend", || frontend.process(obs));
        let report = table
            .update(f, &selected)
            .map_err(|e| PipelineError::Config(format!("frame {f}: {e}")))?;
        out.diagnostics.extend(report.diagnostics);

        let Some(st) = state.as_mut() else {
            if f < WINDOW_SPAN || attempts >= MAX_INIT_ATTEMPTS {
                continue;
            }
            let start = f - WINDOW_SPAN;
            let ready = check_initialization_ready(&table, start, f);
            if !ready.ready {
                continue;
            }
            attempts += 1;
            let result = timer.time("init", || {
                let (sfm, est) = initialize_scales(&table, &intrinsics, &extrinsics, start, f, derive_seed(opts.seed, f as u64))?;
                let st = initialize_state(&sfm, &est, ready.principal, &table, &intrinsics, &extrinsics, start, ds.frame_rate)?;
                Ok::<_, InitError>((st, est))
            });
            match result {
                Ok((mut st, est)) => {
                    log::info!("initialized at frame {f} with scales {:?}", est.s);
                    out.init_frame = f;
                    out.init_scales = est.s.clone();
                    timer.time("backend", || st.optimize(&opts.optimize));
                    state = Some(st);
                }
                Err(e) => {
                    log::debug!("initialization attempt at frame {f}: {e}");
                    out.diagnostics.push(format!("frame {f}: initialization: {e}"));
                    last_init_error = Some(e);
                    continue;
                }
            }
            let st = state.as_mut().unwrap();
            window_step(st, &table, &frames, &intrinsics, opts, &mut timer, &mut finished, &mut keyframes,
                &mut loop_db, &cams_in_body, &mut scale_factors, &mut out)?;
            factor_history.insert(f, scale_factors.clone());
            continue;
        };

        // Constant-velocity prediction.
        let n = st.frames.len();
        let last = st.frames[n - 1].pose;
        let pred = if n >= 2 {
            let prev = st.frames[n - 2].pose;
            let dt_prev = (st.frames[n - 1].frame - st.frames[n - 2].frame) as f64;
            let dt_new = (f - st.frames[n - 1].frame) as f64;
            let (dr, dtr) = prev.inverse().compose(&last).local_difference(&Pose::identity());
            let k = dt_new / dt_prev;
            last.compose(&Pose::identity().retract(&(dr * k), &(dtr * k)))
        } else {
            last
        };
        st.push_frame(f, ds.timestamp(f), pred);
        timer.time("triangulate", || {
            st.observe_frame(&table, &intrinsics, f);
            st.triangulate_new_landmarks(&table, &intrinsics, &opts.triangulation);
        });
        timer.time("optimize", || {
            let r = st.optimize(&opts.optimize);
            if let Some(w) = r.warning {
                log::debug!("frame {f}: {w}");
            }
        });
        window_step(st, &table, &frames, &intrinsics, opts, &mut timer, &mut finished, &mut keyframes,
            &mut loop_db, &cams_in_body, &mut scale_factors, &mut out)?;
        factor_history.insert(f, scale_factors.clone());
        if let Some(first) = st.frames.first() {
            table.prune_before(first.frame);
        }
    }

    let Some(st) = state else {
        return Err(match last_init_error {
            Some(InitError::DegenerateMotion(est)) => PipelineError::DegenerateMotion(est),
            Some(e) => PipelineError::InitFailed {
                attempts,
                last: e.to_string(),
            },
            None => PipelineError::InitFailed {
                attempts,
                last: "parallax never sufficient".into(),
            },
        });
    };
    for wf in &st.frames {
        finished.insert(wf.frame, wf.pose);
    }
    let mut entries = Vec::with_capacity(finished.len());
    let mut factors = vec![1.0; n_cams];
    for (&frame, &pose) in &finished {
        if let Some(fh) = factor_history.range(..=frame).next_back() {
            factors = fh.1.clone();
        }
        let timestamp = ds.timestamp(frame);
        entries.push((timestamp, pose));
        out.records.push(OdometryRecord {
            frame,
            timestamp,
            pose,
            scale_factors: factors.clone(),
        });
    }
    out.trajectory = TrajectoryRecord::new(entries)?;
    out.timings = timer.totals.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(out)
}

/// Window maintenance after the newest frame was optimized: keyframe policy,
/// marginalization with scale correction and loop closure.
#[allow(clippy::too_many_arguments)]
fn window_step(
    st: &mut SlidingWindowState,
    table: &FeatureTrackTable,
    frames: &[&[Observation]],
    intrinsics: &[CameraIntrinsic],
    opts: &PipelineOptions,
    timer: &mut Timer,
    finished: &mut BTreeMap<usize, Pose>,
    keyframes: &mut Vec<(usize, Pose)>,
    loop_db: &mut Option<LoopDatabase>,
    cams_in_body: &[Pose],
    scale_factors: &mut [f64],
    out: &mut PipelineOutput,
) -> Result<(), PipelineError> {
    while st.frames.len() >= WINDOW_CAPACITY {
        let n = st.frames.len();
        let (parallax, ratio) = frame_motion(table, st.frames[n - 2].frame, st.frames[n - 1].frame);
        match keyframe_decision(parallax, ratio) {
            KeyframeDecision::DiscardSecondNewest => {
                let wf = st.frames[n - 2];
                finished.insert(wf.frame, wf.pose);
                timer.time("backend", || st.discard_second_newest());
            }
            KeyframeDecision::MarginalizeOldest => {
                let old = st.frames[0];
                let features = loop_db
                    .as_ref()
                    .map(|_| keyframe_features(st, table, frames[old.frame], intrinsics, old.frame))
                    .unwrap_or_default();
                finished.insert(old.frame, old.pose);
                keyframes.push((old.frame, old.pose));
                let rep = timer.time("marginalize", || st.marginalize_oldest(opts.optimize.huber));
                out.diagnostics.extend(rep.diagnostics);
                if opts.scale_correction {
                    let rep = timer.time("scale", || st.correct_scale(opts.scale_min_landmarks));
                    if rep.applied {
                        for (s, f) in scale_factors.iter_mut().zip(&rep.factors) {
                            *s = *f;
                        }
                    }
                }
                if let Some(db) = loop_db.as_mut() {
                    let (_, found) = timer.time("loop", || db.insert(old.frame, old.pose, features, cams_in_body));
                    if let Some(cand) = found {
                        timer.time("loop", || close_loop(st, db, &cand, finished, keyframes, out))?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Optimizes the keyframe pose graph with the new loop edge and re-anchors
/// every finished pose and the live window to the corrected chain.
fn close_loop(
    st: &mut SlidingWindowState,
    db: &mut LoopDatabase,
    cand: &crate::loop_closure::LoopCandidate,
    finished: &mut BTreeMap<usize, Pose>,
    keyframes: &mut [(usize, Pose)],
    out: &mut PipelineOutput,
) -> Result<(), PipelineError> {
    let Some(rel) = cand.relative else { return Ok(()) };
    let old: Vec<Pose> = keyframes.iter().map(|k| k.1).collect();
    let mut graph = PoseGraph::chain(old.clone());
    graph.add_edge(cand.matched, cand.query, rel, edge_information(), EdgeKind::Loop);
    graph.optimize(50)?;
    let corrections: Vec<Pose> = graph
        .vertices
        .iter()
        .zip(&old)
        .map(|(new, old)| new.compose(&old.inverse()))
        .collect();
    for (frame, pose) in finished.iter_mut() {
        let k = keyframes.partition_point(|kf| kf.0 <= *frame).saturating_sub(1);
        *pose = corrections[k].compose(pose);
    }
    for (kf, v) in keyframes.iter_mut().zip(&graph.vertices) {
        kf.1 = *v;
    }
    for (kb, v) in db.keyframes.iter_mut().zip(&graph.vertices) {
        kb.pose = *v;
    }
    let g = *corrections.last().unwrap();
    for wf in &mut st.frames {
        wf.pose = g.compose(&wf.pose);
    }
    // The prior is expressed in the pre-correction frame; drop it rather
    // than let it pull the window back.
    st.prior = None;
    let (qf, mf) = (keyframes[cand.query].0, keyframes[cand.matched].0);
    out.loops.push((qf, mf));
    log::info!("loop closed: keyframe frame {qf} matches frame {mf} ({} inliers)", cand.inliers);
    Ok(())
}

/// Loads or simulates the dataset named by the config.
pub fn load_inputs(config: &RunConfig) -> Result<(RigConfig, Dataset, Vec<String>), PipelineError> {
    let rig = io::load_rig_config(&config.rig)?;
    let (ds, diagnostics) = match &config.input {
        InputMode::Simulate(sc) => (sc.simulate(&rig).to_dataset(), Vec::new()),
        InputMode::Ingest(path) => {
            let t = io::load_tracks(path)?;
            (t.dataset, t.diagnostics)
        }
    };
    match &config.cameras {
        Some(cams) => {
            let rig = rig.subset(cams)?;
            Ok((rig, ds.select_cameras(cams), diagnostics))
        }
        None => Ok((rig, ds, diagnostics)),
    }
}

/// Runs a configured pipeline and, when an output directory is set, writes
/// `trajectory.txt`, `groundtruth.txt` and `report.txt` there.
pub fn run_pipeline(config: &RunConfig) -> Result<(PipelineOutput, Option<MetricReport>), PipelineError> {
    let (rig, ds, diagnostics) = load_inputs(config)?;
    let opts = PipelineOptions {
        loop_closure: config.loop_closure,
        scale_correction: config.scale_correction,
        seed: config.seed,
        vocabulary: match &config.vocabulary {
            Some(p) => Some(Vocabulary::load(p)?),
            None => None,
        },
        ..Default::default()
    };
    let mut output = run_dataset(&rig, &ds, &opts)?;
    output.diagnostics.splice(0..0, diagnostics);
    let report = match &output.ground_truth {
        Some(gt) => {
            let mut r = MetricReport::evaluate(&output.trajectory, gt)?;
            r.timings = output.timings.clone();
            Some(r)
        }
        None => None,
    };
    if let Some(dir) = &config.out_dir {
        write_outputs(dir, &output, report.as_ref())?;
    }
    Ok((output, report))
}

pub fn write_outputs(dir: &Path, output: &PipelineOutput, report: Option<&MetricReport>) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(IoError::from)?;
    io::write_trajectory(&output.trajectory, &dir.join("trajectory.txt"))?;
    if let Some(gt) = &output.ground_truth {
        io::write_trajectory(gt, &dir.join("groundtruth.txt"))?;
    }
    if let Some(r) = report {
        std::fs::write(dir.join("report.txt"), r.to_text()).map_err(IoError::from)?;
    }
    Ok(())
}
