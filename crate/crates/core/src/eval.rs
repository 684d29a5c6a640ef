//! Trajectory metrics: ATE, RPE and scale drift.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{rotation_angle, umeyama_alignment, Pose};
use crate::io::TrajectoryRecord;

/// Nearest-timestamp association tolerance (seconds).
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;
pub const DEFAULT_SEGMENTS: [f64; 4] = [10.0, 50.0, 100.0, 200.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("only {0} associated poses, at least 3 needed")]
    TooFewPairs(usize),
    #[error("trajectory is degenerate (collinear or coincident positions)")]
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    Rigid,
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteResult {
    pub trans_rmse: f64,
    pub rot_rmse_deg: f64,
    /// Size of the estimate relative to ground truth (1.1 = estimate 10% too large).
    pub scale: f64,
    /// Maps scaled estimate coordinates into ground-truth coordinates:
    /// `gt ≈ R (est / scale) + t`.
    pub alignment: Pose,
}

/// Pairs `(est, gt)` matched by nearest timestamp within the tolerance.
pub fn associate(est: &TrajectoryRecord, gt: &TrajectoryRecord, tolerance: f64) -> Vec<(Pose, Pose)> {
    let mut out = Vec::new();
    for (t, p) in &est.entries {
        let i = gt.entries.partition_point(|(g, _)| g < t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.entries.len())
            .min_by(|&a, &b| {
                (gt.entries[a].0 - t)
                    .abs()
                    .partial_cmp(&(gt.entries[b].0 - t).abs())
                    .unwrap()
            });
        if let Some(j) = best {
            if (gt.entries[j].0 - t).abs() <= tolerance {
                out.push((*p, gt.entries[j].1));
            }
        }
    }
    out
}

fn align_pairs(pairs: &[(Pose, Pose)], alignment: Alignment) -> Result<AteResult, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, g)| g.translation).collect();
    let (pose, scale) = umeyama_alignment(&src, &dst, alignment == Alignment::Similarity).ok_or(EvalError::Degenerate)?;
    let mut se = 0.0;
    let mut re = 0.0;
    for (e, g) in pairs {
        let p = pose.rotation * (e.translation * scale) + pose.translation;
        se += (p - g.translation).norm_squared();
        let r = pose.rotation * e.rotation;
        re += rotation_angle(&(r.inverse() * g.rotation)).to_degrees().powi(2);
    }
    let n = pairs.len() as f64;
    Ok(AteResult {
        trans_rmse: (se / n).sqrt(),
        rot_rmse_deg: (re / n).sqrt(),
        scale: 1.0 / scale,
        alignment: pose,
    })
}

pub fn ate(est: &TrajectoryRecord, gt: &TrajectoryRecord, alignment: Alignment) -> Result<AteResult, EvalError> {
    align_pairs(&associate(est, gt, ASSOCIATION_TOLERANCE), alignment)
}

fn is_collinear(points: &[Vector3<f64>]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0]
}

/// `|s - 1| * 100` for the similarity-alignment scale `s`.
pub fn scale_drift(est: &TrajectoryRecord, gt: &TrajectoryRecord) -> Result<f64, EvalError> {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let gt_pts: Vec<_> = pairs.iter().map(|(_, g)| g.translation).collect();
    if is_collinear(&gt_pts) {
        return Err(EvalError::Degenerate);
    }
    let r = align_pairs(&pairs, Alignment::Similarity)?;
    Ok((r.scale - 1.0).abs() * 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpeSegment {
    pub length: f64,
    pub count: usize,
    pub trans_mean_pct: f64,
    pub trans_rmse_pct: f64,
    pub rot_mean_deg_per_m: f64,
    pub rot_rmse_deg_per_m: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RpeResult {
    pub segments: Vec<RpeSegment>,
    pub notes: Vec<String>,
}

/// Segment lengths for a ground-truth path: the defaults, or a tenth of
/// them when the whole path is shorter than the largest default.
pub fn default_segments(path_length: f64) -> Vec<f64> {
    let div = if path_length < DEFAULT_SEGMENTS[3] { 10.0 } else { 1.0 };
    DEFAULT_SEGMENTS.iter().map(|l| l / div).collect()
}

pub fn path_length(poses: &[Pose]) -> f64 {
    poses.windows(2).map(|w| (w[1].translation - w[0].translation).norm()).sum()
}

/// Relative pose error over every sub-trajectory whose ground-truth arc
/// length first reaches each segment length.
pub fn rpe(est: &TrajectoryRecord, gt: &TrajectoryRecord, segment_lengths: &[f64]) -> RpeResult {
    let pairs = associate(est, gt, ASSOCIATION_TOLERANCE);
    let mut arc = vec![0.0];
    for w in pairs.windows(2) {
        arc.push(arc.last().unwrap() + (w[1].1.translation - w[0].1.translation).norm());
    }
    let total = *arc.last().unwrap();
    let mut out = RpeResult::default();
    for &len in segment_lengths {
        if !(len > 0.0) || len > total {
            out.notes.push(format!("segment {len} m skipped: trajectory length {total:.3} m"));
            continue;
        }
        let (mut t_sum, mut t_sq, mut r_sum, mut r_sq, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut j = 0;
        for i in 0..pairs.len() {
            j = j.max(i);
            while j < pairs.len() && arc[j] - arc[i] < len {
                j += 1;
            }
            if j == pairs.len() {
                break;
            }
            let d_gt = pairs[i].1.inverse().compose(&pairs[j].1);
            let d_est = pairs[i].0.inverse().compose(&pairs[j].0);
            let e = d_gt.inverse().compose(&d_est);
            let t = e.translation.norm() / len * 100.0;
            let r = rotation_angle(&e.rotation).to_degrees() / len;
            t_sum += t;
            t_sq += t * t;
            r_sum += r;
            r_sq += r * r;
            count += 1;
        }
        if count == 0 {
            out.notes.push(format!("segment {len} m skipped: no complete sub-trajectory"));
            continue;
        }
        let n = count as f64;
        out.segments.push(RpeSegment {
            length: len,
            count,
            trans_mean_pct: t_sum / n,
            trans_rmse_pct: (t_sq / n).sqrt(),
            rot_mean_deg_per_m: r_sum / n,
            rot_rmse_deg_per_m: (r_sq / n).sqrt(),
        });
    }
    out
}

/// Everything the evaluation reports for one run. Timings are wall-clock and
/// kept out of [`MetricReport::to_text`] so written reports stay reproducible.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricReport {
    pub ate_trans_rmse: f64,
    pub ate_rot_rmse_deg: f64,
    pub ate_sim_trans_rmse: f64,
    pub scale_drift_pct: f64,
    pub rpe: RpeResult,
    pub timings: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn evaluate(est: &TrajectoryRecord, gt: &TrajectoryRecord) -> Result<Self, EvalError> {
        let rigid = ate(est, gt, Alignment::Rigid)?;
        let sim = ate(est, gt, Alignment::Similarity)?;
        let gt_poses: Vec<Pose> = gt.entries.iter().map(|(_, p)| *p).collect();
        let rpe = rpe(est, gt, &default_segments(path_length(&gt_poses)));
        Ok(Self {
            ate_trans_rmse: rigid.trans_rmse,
            ate_rot_rmse_deg: rigid.rot_rmse_deg,
            ate_sim_trans_rmse: sim.trans_rmse,
            scale_drift_pct: scale_drift(est, gt).unwrap_or((sim.scale - 1.0).abs() * 100.0),
            rpe,
            timings: Vec::new(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "ate_trans_rmse_m {:.9}", self.ate_trans_rmse).unwrap();
        writeln!(s, "ate_rot_rmse_deg {:.9}", self.ate_rot_rmse_deg).unwrap();
        writeln!(s, "ate_sim_trans_rmse_m {:.9}", self.ate_sim_trans_rmse).unwrap();
        writeln!(s, "scale_drift_pct {:.9}", self.scale_drift_pct).unwrap();
        for seg in &self.rpe.segments {
            writeln!(
                s,
                "rpe {} count {} trans_mean_pct {:.9} trans_rmse_pct {:.9} rot_mean_deg_per_m {:.9} rot_rmse_deg_per_m {:.9}",
                seg.length, seg.count, seg.trans_mean_pct, seg.trans_rmse_pct, seg.rot_mean_deg_per_m, seg.rot_rmse_deg_per_m
            )
            .unwrap();
        }
        for note in &self.rpe.notes {
            writeln!(s, "note {note}").unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn wavy(n: usize) -> TrajectoryRecord {
        TrajectoryRecord::new(
            (0..n)
                .map(|i| {
                    let a = i as f64 * 0.1;
                    let p = Pose::new(
                        UnitQuaternion::from_euler_angles(0.05 * a.sin(), 0.0, a),
                        Vector3::new(10.0 * a.cos(), 10.0 * a.sin(), a.sin()),
                    );
                    (i as f64 * 0.1, p)
                })
                .collect(),
        )
        .unwrap()
    }

    fn map(rec: &TrajectoryRecord, f: impl Fn(&Pose) -> Pose) -> TrajectoryRecord {
        TrajectoryRecord::new(rec.entries.iter().map(|(t, p)| (*t, f(p))).collect()).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let gt = wavy(50);
        let r = ate(&gt, &gt, Alignment::Similarity).unwrap();
        assert!(r.trans_rmse < 1e-9 && r.rot_rmse_deg < 1e-6);
        assert!((r.scale - 1.0).abs() < 1e-12);
        assert!(scale_drift(&gt, &gt).unwrap() < 1e-9);
        let rp = rpe(&gt, &gt, &[1.0, 5.0]);
        assert!(rp.segments.iter().all(|s| s.trans_rmse_pct < 1e-9 && s.rot_rmse_deg_per_m < 1e-6));
    }

    #[test]
    fn rigid_displacement_is_absorbed() {
        let gt = wavy(50);
        let g = Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, 30f64.to_radians()), Vector3::new(5.0, 0.0, 0.0));
        let est = map(&gt, |p| g.compose(p));
        let r = ate(&est, &gt, Alignment::Rigid).unwrap();
        assert!(r.trans_rmse < 1e-9 && r.rot_rmse_deg < 1e-6, "{r:?}");
        assert_eq!(r.scale, 1.0);
    }

    #[test]
    fn scaled_positions() {
        let gt = wavy(50);
        let est = map(&gt, |p| Pose::new(p.rotation, p.translation * 1.1));
        let r = ate(&est, &gt, Alignment::Similarity).unwrap();
        assert!(r.trans_rmse < 1e-9);
        assert!((r.scale - 1.1).abs() < 1e-9);
        let est = map(&gt, |p| Pose::new(p.rotation, p.translation * 1.05));
        assert!((scale_drift(&est, &gt).unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_pairs_and_collinear() {
        let gt = wavy(2);
        assert_eq!(ate(&gt, &gt, Alignment::Rigid), Err(EvalError::TooFewPairs(2)));
        let line = TrajectoryRecord::new((0..10).map(|i| (i as f64, Pose::from_translation(Vector3::x() * i as f64))).collect()).unwrap();
        assert_eq!(scale_drift(&line, &line), Err(EvalError::Degenerate));
    }

    #[test]
    fn constant_yaw_drift() {
        // Straight line along x, 1 m per pose; estimate yaws 0.1 deg per meter.
        let gt = TrajectoryRecord::new((0..101).map(|i| (i as f64, Pose::from_translation(Vector3::x() * i as f64))).collect()).unwrap();
        let est = map(&gt, |p| {
            Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.0, (0.1 * p.translation.x).to_radians()), p.translation)
        });
        let r = rpe(&est, &gt, &[10.0, 50.0, 200.0]);
        assert_eq!(r.segments.len(), 2);
        for s in &r.segments {
            assert!((s.rot_mean_deg_per_m - 0.1).abs() < 1e-9, "{s:?}");
        }
        assert_eq!(r.notes.len(), 1);
    }
}
