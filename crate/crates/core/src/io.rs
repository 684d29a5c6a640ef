//! Text formats: rig configuration, feature tracks and trajectories.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::dataset::{Dataset, Observation};
use crate::descriptor::Descriptor;
use crate::geometry::{Camera, CameraExtrinsic, CameraIntrinsic, CameraModel, GeometryError, Pose, RigConfig};

pub const TRACKS_MAGIC: &str = "MCVOTRK1";
/// Frame rate assumed for ingested track files, which carry frame indices only.
pub const DEFAULT_FRAME_RATE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn parse_err(line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: Option<&str>, line: usize, what: &str) -> Result<f64, IoError> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse::<f64>()
        .map_err(|_| parse_err(line, format!("bad {what} '{tok}'")))
}

fn parse_int<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, IoError> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse::<T>()
        .map_err(|_| parse_err(line, format!("bad {what} '{tok}'")))
}

/// Quaternion from `qx qy qz qw`. Norms off by more than 1e-3 are rejected;
/// values already unit to 1e-12 are kept bit for bit.
fn checked_quaternion(x: f64, y: f64, z: f64, w: f64, line: usize) -> Result<UnitQuaternion<f64>, IoError> {
    let q = Quaternion::new(w, x, y, z);
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(IoError::Validation {
            line,
            message: format!("quaternion norm {n} is not 1"),
        });
    }
    Ok(if (n - 1.0).abs() <= 1e-12 {
        Unit::new_unchecked(q)
    } else {
        Unit::new_normalize(q)
    })
}

fn parse_pose<'a>(toks: &mut impl Iterator<Item = &'a str>, line: usize) -> Result<Pose, IoError> {
    let mut v = [0.0; 7];
    for (i, name) in ["tx", "ty", "tz", "qx", "qy", "qz", "qw"].iter().enumerate() {
        v[i] = parse_f64(toks.next(), line, name)?;
    }
    let q = checked_quaternion(v[3], v[4], v[5], v[6], line)?;
    Ok(Pose::new(q, Vector3::new(v[0], v[1], v[2])))
}

fn pose_fields(p: &Pose) -> [f64; 7] {
    let q = p.rotation.quaternion();
    [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w]
}

pub fn format_rig(rig: &RigConfig) -> String {
    let mut s = String::new();
    for (i, cam) in rig.cameras().iter().enumerate() {
        let k = &cam.intrinsic;
        let e = pose_fields(&cam.extrinsic.cam_in_body);
        writeln!(
            s,
            "cam {i} {} {} {} {} {} {} {} {} | {} {} {} {} {} {} {}",
            k.model.name(),
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            k.fov_limit,
            k.width,
            k.height,
            e[0],
            e[1],
            e[2],
            e[3],
            e[4],
            e[5],
            e[6]
        )
        .unwrap();
    }
    s
}

pub fn parse_rig(text: &str) -> Result<RigConfig, IoError> {
    let mut cams: Vec<(usize, Camera)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let (left, right) = content
            .split_once('|')
            .ok_or_else(|| parse_err(line, "expected '|' between intrinsics and extrinsic"))?;
        let mut t = left.split_whitespace();
        if t.next() != Some("cam") {
            return Err(parse_err(line, "expected 'cam'"));
        }
        let idx: usize = parse_int(t.next(), line, "camera index")?;
        let model_tok = t.next().ok_or_else(|| parse_err(line, "missing model"))?;
        let model = CameraModel::parse(model_tok).ok_or_else(|| parse_err(line, format!("unknown model '{model_tok}'")))?;
        let fx = parse_f64(t.next(), line, "fx")?;
        let fy = parse_f64(t.next(), line, "fy")?;
        let cx = parse_f64(t.next(), line, "cx")?;
        let cy = parse_f64(t.next(), line, "cy")?;
        let fov = parse_f64(t.next(), line, "fov")?;
        let width: u32 = parse_int(t.next(), line, "width")?;
        let height: u32 = parse_int(t.next(), line, "height")?;
        if let Some(extra) = t.next() {
            return Err(parse_err(line, format!("unexpected token '{extra}'")));
        }
        let mut r = right.split_whitespace();
        let pose = parse_pose(&mut r, line)?;
        if let Some(extra) = r.next() {
            return Err(parse_err(line, format!("unexpected token '{extra}'")));
        }
        let intrinsic = CameraIntrinsic {
            model,
            fx,
            fy,
            cx,
            cy,
            fov_limit: fov,
            width,
            height,
        };
        intrinsic.validate().map_err(|e| IoError::Validation {
            line,
            message: e.to_string(),
        })?;
        if cams.iter().any(|(i, _)| *i == idx) {
            return Err(IoError::Validation {
                line,
                message: format!("duplicate camera index {idx}"),
            });
        }
        cams.push((
            idx,
            Camera {
                intrinsic,
                extrinsic: CameraExtrinsic::new(pose),
            },
        ));
    }
    cams.sort_by_key(|(i, _)| *i);
    for (expect, (i, _)) in cams.iter().enumerate() {
        if *i != expect {
            return Err(IoError::Validation {
                line: 0,
                message: format!("camera indices must be 0..N, missing {expect}"),
            });
        }
    }
    Ok(RigConfig::new(cams.into_iter().map(|(_, c)| c).collect())?)
}

pub fn load_rig_config(path: &Path) -> Result<RigConfig, IoError> {
    parse_rig(&std::fs::read_to_string(path)?)
}

pub fn write_rig_config(rig: &RigConfig, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, format_rig(rig))?;
    Ok(())
}

/// A parsed track file plus the non-fatal problems found while reading it.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedTracks {
    pub dataset: Dataset,
    pub diagnostics: Vec<String>,
}

pub fn format_tracks(ds: &Dataset) -> String {
    let mut s = String::from(TRACKS_MAGIC);
    s.push('\n');
    for (f, gt) in ds.ground_truth.iter().enumerate() {
        if let Some(p) = gt {
            let v = pose_fields(p);
            writeln!(s, "gt {f} {} {} {} {} {} {} {}", v[0], v[1], v[2], v[3], v[4], v[5], v[6]).unwrap();
        }
    }
    for o in &ds.observations {
        write!(s, "obs {} {} {} {} {}", o.frame, o.camera, o.track_id, o.pixel.x, o.pixel.y).unwrap();
        if let Some(d) = &o.descriptor {
            write!(s, " {}", d.to_hex()).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Parses a track file. Duplicate `(camera, id, frame)` rows keep the first
/// occurrence; a track whose frames go backwards is rejected.
pub fn parse_tracks(text: &str) -> Result<LoadedTracks, IoError> {
    let mut diagnostics = Vec::new();
    let mut observations: Vec<Observation> = Vec::new();
    let mut gt: Vec<Option<Pose>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut last_frame: std::collections::HashMap<(usize, u64), (usize, usize)> = std::collections::HashMap::new();
    let mut lines = text.lines().enumerate().peekable();
    // An empty file is an empty table; anything else must start with the magic.
    while let Some((_, l)) = lines.peek() {
        if l.trim().is_empty() {
            lines.next();
        } else {
            break;
        }
    }
    if let Some((n, l)) = lines.next() {
        if l.trim() != TRACKS_MAGIC {
            return Err(parse_err(n + 1, format!("expected header {TRACKS_MAGIC}")));
        }
    }
    for (n, raw) in lines {
        let line = n + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut t = content.split_whitespace();
        match t.next() {
            Some("obs") => {
                let frame: usize = parse_int(t.next(), line, "frame")?;
                let camera: usize = parse_int(t.next(), line, "camera")?;
                let track_id: u64 = parse_int(t.next(), line, "track id")?;
                let u = parse_f64(t.next(), line, "u")?;
                let v = parse_f64(t.next(), line, "v")?;
                let descriptor = match t.next() {
                    Some(h) => Some(Descriptor::from_hex(h).ok_or_else(|| parse_err(line, "bad descriptor hex"))?),
                    None => None,
                };
                if let Some(extra) = t.next() {
                    return Err(parse_err(line, format!("unexpected token '{extra}'")));
                }
                if !seen.insert((camera, track_id, frame)) {
                    diagnostics.push(format!(
                        "line {line}: duplicate row for camera {camera} track {track_id} frame {frame}, first kept"
                    ));
                    continue;
                }
                if let Some(&(prev, prev_line)) = last_frame.get(&(camera, track_id)) {
                    if frame < prev {
                        return Err(IoError::Validation {
                            line,
                            message: format!(
                                "track {track_id} of camera {camera} goes back from frame {prev} (line {prev_line}) to {frame}"
                            ),
                        });
                    }
                }
                last_frame.insert((camera, track_id), (frame, line));
                observations.push(Observation {
                    frame,
                    camera,
                    track_id,
                    pixel: Vector2::new(u, v),
                    descriptor,
                });
            }
            Some("gt") => {
                let frame: usize = parse_int(t.next(), line, "frame")?;
                let pose = parse_pose(&mut t, line)?;
                if gt.len() <= frame {
                    gt.resize(frame + 1, None);
                }
                if gt[frame].is_some() {
                    diagnostics.push(format!("line {line}: duplicate ground truth for frame {frame}, first kept"));
                } else {
                    gt[frame] = Some(pose);
                }
            }
            Some(other) => return Err(parse_err(line, format!("unknown record '{other}'"))),
            None => unreachable!(),
        }
    }
    Ok(LoadedTracks {
        dataset: Dataset::new(DEFAULT_FRAME_RATE, observations, gt),
        diagnostics,
    })
}

pub fn load_tracks(path: &Path) -> Result<LoadedTracks, IoError> {
    parse_tracks(&std::fs::read_to_string(path)?)
}

pub fn write_tracks(ds: &Dataset, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, format_tracks(ds))?;
    Ok(())
}

/// Timestamped body poses, timestamps strictly increasing.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub entries: Vec<(f64, Pose)>,
}

impl TrajectoryRecord {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, IoError> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(IoError::Validation {
                    line: i + 2,
                    message: format!("timestamps not increasing: {} then {}", w[0].0, w[1].0),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| p.translation).collect()
    }
}

/// `printf("%.9g")` formatting.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.8e}", x);
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mant), sign, exp.abs())
    } else {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    }
}

pub fn format_trajectory(record: &TrajectoryRecord) -> String {
    let mut s = String::new();
    for (t, p) in &record.entries {
        write!(s, "{:.8}", t).unwrap();
        for v in pose_fields(p) {
            write!(s, " {}", format_g9(v)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_trajectory(text: &str) -> Result<TrajectoryRecord, IoError> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut t = content.split_whitespace();
        let ts = parse_f64(t.next(), line, "timestamp")?;
        let pose = parse_pose(&mut t, line)?;
        entries.push((ts, pose));
    }
    TrajectoryRecord::new(entries)
}

pub fn write_trajectory(record: &TrajectoryRecord, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, format_trajectory(record))?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<TrajectoryRecord, IoError> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        assert_eq!(format_g9(0.0), "0");
        assert_eq!(format_g9(1.0), "1");
        assert_eq!(format_g9(-2.5), "-2.5");
        assert_eq!(format_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_g9(123456789.0), "123456789");
        assert_eq!(format_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_g9(0.0001), "0.0001");
        assert_eq!(format_g9(0.00001234), "1.234e-05");
        assert_eq!(format_g9(99.9999999996), "100");
    }

    #[test]
    fn identity_trajectory_line() {
        let rec = TrajectoryRecord::new(vec![(0.0, Pose::identity())]).unwrap();
        assert_eq!(format_trajectory(&rec), "0.00000000 0 0 0 0 0 0 1\n");
        assert_eq!(format_trajectory(&TrajectoryRecord::default()), "");
    }

    #[test]
    fn rig_round_trip_is_bitwise() {
        let rig = RigConfig::vehicle_four_camera();
        let back = parse_rig(&format_rig(&rig)).unwrap();
        assert_eq!(back, rig);
    }

    #[test]
    fn rig_rejects_bad_quaternion_and_reports_line() {
        let good = "cam 0 pinhole 300 300 320 240 0.9 640 480 | 0 0 0 0 0 0 1\n";
        let bad = "cam 1 pinhole 300 300 320 240 0.9 640 480 | 0.5 0 0 0 0 0 0.9\n";
        match parse_rig(&format!("{good}{bad}")) {
            Err(IoError::Validation { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_rig(&format!("{good}cam 1 pinhole 300 x\n")) {
            Err(IoError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let two = format!("{good}cam 1 pinhole 300 300 320 240 0.9 640 480 | 0.5 0 0 0 0 0 1\n");
        assert_eq!(parse_rig(&two).unwrap().len(), 2);
    }

    #[test]
    fn tracks_rules() {
        assert!(parse_tracks("").unwrap().dataset.observations.is_empty());
        let text = "MCVOTRK1\nobs 0 0 7 10 20\nobs 0 0 7 11 21\nobs 1 0 7 12 22\n";
        let t = parse_tracks(text).unwrap();
        assert_eq!(t.dataset.observations.len(), 2);
        assert_eq!(t.dataset.observations[0].pixel, Vector2::new(10.0, 20.0));
        assert_eq!(t.diagnostics.len(), 1);
        let back = "MCVOTRK1\nobs 2 0 7 10 20\nobs 1 0 7 11 21\n";
        assert!(matches!(parse_tracks(back), Err(IoError::Validation { line: 3, .. })));
    }
}
