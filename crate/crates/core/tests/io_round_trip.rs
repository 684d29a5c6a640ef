use nalgebra::{UnitQuaternion, Vector3};
use proptest::prelude::*;

use rigvo::geometry::{Pose, RigConfig};
use rigvo::io::{
    format_rig, format_tracks, format_trajectory, load_rig_config, load_tracks, parse_rig, parse_tracks,
    parse_trajectory, write_rig_config, write_tracks, IoError, TrajectoryRecord,
};
use rigvo::sim::Scenario;

#[test]
fn rig_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rig.txt");
    for rig in [RigConfig::vehicle_four_camera(), RigConfig::vehicle_four_camera().subset(&[3, 0]).unwrap()] {
        write_rig_config(&rig, &path).unwrap();
        let back = load_rig_config(&path).unwrap();
        assert_eq!(back, rig);
        assert_eq!(format_rig(&back), std::fs::read_to_string(&path).unwrap());
    }
}

#[test]
fn identity_two_camera_rig() {
    let text = "cam 0 pinhole 300 300 320 240 1.2 640 480 | 0 0 0 0 0 0 1\n\
                cam 1 pinhole 300 300 320 240 1.2 640 480 | 0.5 0 0 0 0 0 1\n";
    assert_eq!(parse_rig(text).unwrap().len(), 2);
    let bad = text.replace("0.5 0 0 0 0 0 1", "0.5 0 0 0 0 0 0.9");
    assert!(matches!(parse_rig(&bad), Err(IoError::Validation { line: 2, .. })));
}

#[test]
fn simulated_tracks_round_trip() {
    let rig = RigConfig::vehicle_four_camera();
    let ds = Scenario::circle(20.0, 40, 0.5, 0.05, 9).simulate(&rig).to_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tracks.txt");
    write_tracks(&ds, &path).unwrap();
    let back = load_tracks(&path).unwrap();
    assert!(back.diagnostics.is_empty(), "{:?}", back.diagnostics);
    assert_eq!(back.dataset, ds);
    assert_eq!(format_tracks(&back.dataset), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn empty_inputs() {
    assert_eq!(parse_tracks("").unwrap().dataset.observations.len(), 0);
    assert_eq!(parse_trajectory("").unwrap().len(), 0);
}

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-100.0f64..100.0),
        prop::array::uniform3(-3.0f64..3.0),
    )
        .prop_map(|(t, r)| Pose::new(UnitQuaternion::from_euler_angles(r[0], r[1], r[2]), Vector3::from(t)))
}

proptest! {
    #[test]
    fn trajectory_round_trip_within_precision(poses in prop::collection::vec(pose_strategy(), 1..30), dt in 0.01f64..1.0) {
        let rec = TrajectoryRecord::new(poses.iter().enumerate().map(|(i, p)| (i as f64 * dt, *p)).collect()).unwrap();
        let back = parse_trajectory(&format_trajectory(&rec)).unwrap();
        prop_assert_eq!(back.len(), rec.len());
        for ((ta, a), (tb, b)) in back.entries.iter().zip(&rec.entries) {
            prop_assert!((ta - tb).abs() < 1e-8);
            for i in 0..3 {
                prop_assert!((a.translation[i] - b.translation[i]).abs() <= 1e-8 * b.translation[i].abs().max(1.0));
            }
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-8);
        }
    }
}
