//! Python bindings: rig and pose types, simulation, the odometry pipeline
//! and trajectory metrics.

use std::path::PathBuf;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rigvo::dataset::Dataset as CoreDataset;
use rigvo::eval::{self, Alignment};
use rigvo::geometry::{Pose as CorePose, RigConfig as CoreRig};
use rigvo::init::{build_scale_system, solve_scales, SolveMode};
use rigvo::io::{self, TrajectoryRecord};
use rigvo::pipeline::{run_dataset, PipelineError, PipelineOptions};
use rigvo::sim::{generate_trajectory, make_scale_ambiguous_sfm, Scenario, TrajectoryKind};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    PyRuntimeError::new_err(format!("{e} (exit code {})", e.exit_code()))
}

/// Rigid transform mapping local coordinates into the parent frame.
#[pyclass(name = "Pose", from_py_object)]
#[derive(Clone, Copy)]
struct Pose(CorePose);

#[pymethods]
impl Pose {
    /// `translation` is `[x, y, z]`, `quaternion` is `[qx, qy, qz, qw]`.
    #[new]
    #[pyo3(signature = (translation = [0.0; 3], quaternion = [0.0, 0.0, 0.0, 1.0]))]
    fn new(translation: [f64; 3], quaternion: [f64; 4]) -> PyResult<Self> {
        let [x, y, z, w] = quaternion;
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(PyValueError::new_err(format!("quaternion norm {} is not 1", q.norm())));
        }
        Ok(Pose(CorePose::new(UnitQuaternion::from_quaternion(q), Vector3::from(translation))))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        let q = self.0.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    fn compose(&self, other: &Pose) -> Pose {
        Pose(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Pose {
        Pose(self.0.inverse())
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(p)).into()
    }

    fn __repr__(&self) -> String {
        format!("Pose({})", self.0)
    }
}

/// Calibrated multi-camera rig.
#[pyclass(name = "RigConfig", from_py_object)]
#[derive(Clone)]
struct RigConfig(CoreRig);

#[pymethods]
impl RigConfig {
    #[staticmethod]
    fn vehicle_four_camera() -> Self {
        RigConfig(CoreRig::vehicle_four_camera())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_rig_config(&path).map(RigConfig).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_rig_config(&self.0, &path).map_err(value_err)
    }

    fn subset(&self, cameras: Vec<usize>) -> PyResult<Self> {
        self.0.subset(&cameras).map(RigConfig).map_err(value_err)
    }

    fn extrinsic(&self, camera: usize) -> PyResult<Pose> {
        if camera >= self.0.len() {
            return Err(PyValueError::new_err(format!("camera {camera} out of range")));
        }
        Ok(Pose(self.0.camera(camera).extrinsic.cam_in_body))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Multi-camera observation sequence with optional ground truth.
#[pyclass(name = "Dataset")]
struct Dataset(CoreDataset);

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_tracks(&path).map(|t| Dataset(t.dataset)).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_tracks(&self.0, &path).map_err(value_err)
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.0.num_frames
    }

    #[getter]
    fn num_observations(&self) -> usize {
        self.0.observations.len()
    }

    fn select_cameras(&self, cameras: Vec<usize>) -> Dataset {
        Dataset(self.0.select_cameras(&cameras))
    }
}

/// Timestamped body poses.
#[pyclass(name = "Trajectory")]
struct Trajectory(TrajectoryRecord);

#[pymethods]
impl Trajectory {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_trajectory(&path).map(Trajectory).map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_trajectory(&self.0, &path).map_err(value_err)
    }

    fn timestamps(&self) -> Vec<f64> {
        self.0.entries.iter().map(|e| e.0).collect()
    }

    fn poses(&self) -> Vec<Pose> {
        self.0.entries.iter().map(|e| Pose(e.1)).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn trajectory_kind(name: &str, laps: f64) -> PyResult<TrajectoryKind> {
    Ok(match name {
        "circle" => TrajectoryKind::Circle { laps },
        "lemniscate" => TrajectoryKind::Lemniscate { laps },
        "line" => TrajectoryKind::StraightLine,
        "random" => TrajectoryKind::SmoothRandom,
        other => return Err(PyValueError::new_err(format!("unknown trajectory {other:?}"))),
    })
}

/// Simulates a rig run and returns its observations with ground truth.
#[pyfunction]
#[pyo3(signature = (rig, seed = 0, frames = 200, length = 100.0, noise = 0.5, dropout = 0.02, trajectory = "circle", laps = 1.0))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    rig: &RigConfig,
    seed: u64,
    frames: usize,
    length: f64,
    noise: f64,
    dropout: f64,
    trajectory: &str,
    laps: f64,
) -> PyResult<Dataset> {
    let mut sc = Scenario::circle(length, frames, noise, dropout, seed);
    sc.trajectory.kind = trajectory_kind(trajectory, laps)?;
    Ok(Dataset(sc.simulate(&rig.0).to_dataset()))
}

/// Result of one odometry run.
#[pyclass(name = "RunResult")]
struct RunResult {
    #[pyo3(get)]
    init_frame: usize,
    #[pyo3(get)]
    init_scales: Vec<f64>,
    #[pyo3(get)]
    loops: Vec<(usize, usize)>,
    #[pyo3(get)]
    diagnostics: Vec<String>,
    trajectory: TrajectoryRecord,
    ground_truth: Option<TrajectoryRecord>,
}

#[pymethods]
impl RunResult {
    fn trajectory(&self) -> Trajectory {
        Trajectory(self.trajectory.clone())
    }

    fn ground_truth(&self) -> Option<Trajectory> {
        self.ground_truth.clone().map(Trajectory)
    }
}

/// Runs the odometry pipeline over a dataset.
#[pyfunction]
#[pyo3(signature = (rig, dataset, seed = 0, loop_closure = false, scale_correction = true))]
fn run(py: Python<'_>, rig: &RigConfig, dataset: &Dataset, seed: u64, loop_closure: bool, scale_correction: bool) -> PyResult<RunResult> {
    let opts = PipelineOptions {
        seed,
        loop_closure,
        scale_correction,
        ..Default::default()
    };
    let out = py
        .detach(|| run_dataset(&rig.0, &dataset.0, &opts))
        .map_err(pipeline_err)?;
    Ok(RunResult {
        init_frame: out.init_frame,
        init_scales: out.init_scales,
        loops: out.loops,
        diagnostics: out.diagnostics,
        trajectory: out.trajectory,
        ground_truth: out.ground_truth,
    })
}

/// Absolute trajectory error: `(translation RMSE m, rotation RMSE deg, scale)`.
#[pyfunction]
#[pyo3(signature = (est, gt, similarity = false))]
fn ate(est: &Trajectory, gt: &Trajectory, similarity: bool) -> PyResult<(f64, f64, f64)> {
    let alignment = if similarity { Alignment::Similarity } else { Alignment::Rigid };
    let r = eval::ate(&est.0, &gt.0, alignment).map_err(value_err)?;
    Ok((r.trans_rmse, r.rot_rmse_deg, r.scale))
}

/// Scale drift in percent.
#[pyfunction]
fn scale_drift(est: &Trajectory, gt: &Trajectory) -> PyResult<f64> {
    eval::scale_drift(&est.0, &gt.0).map_err(value_err)
}

/// Solves per-camera scales from exact monocular trajectories whose
/// translations were divided by `s_true`. Returns `(scales, condition, observable)`.
#[pyfunction]
#[pyo3(signature = (rig, s_true, trajectory = "circle", frames = 11))]
fn recover_scales(rig: &RigConfig, s_true: Vec<f64>, trajectory: &str, frames: usize) -> PyResult<(Vec<f64>, f64, bool)> {
    if s_true.len() != rig.0.len() || s_true.iter().any(|&s| s <= 0.0) {
        return Err(PyValueError::new_err("need one positive scale per camera"));
    }
    let mut sc = Scenario::circle(100.0, 200, 0.0, 0.0, 0);
    sc.trajectory.kind = trajectory_kind(trajectory, 1.0)?;
    let traj = generate_trajectory(&sc.trajectory);
    let frames = frames.clamp(2, traj.len());
    let sfm = make_scale_ambiguous_sfm(&rig.0, &traj[..frames], &s_true);
    let system = build_scale_system(&sfm, &rig.0.extrinsics()).map_err(value_err)?;
    let est = match solve_scales(&system, SolveMode::ClosedForm) {
        Ok(e) => e,
        Err(e) => e.scale_estimate().cloned().ok_or_else(|| value_err(&e))?,
    };
    Ok((est.s, est.condition, est.observable))
}

#[pymodule]
fn rigvo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pose>()?;
    m.add_class::<RigConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Trajectory>()?;
    m.add_class::<RunResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(scale_drift, m)?)?;
    m.add_function(wrap_pyfunction!(recover_scales, m)?)?;
    Ok(())
}
