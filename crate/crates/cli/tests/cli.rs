use std::path::Path;
use std::process::{Command, Output};

fn rigvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rigvo")).args(args).output().expect("spawn rigvo")
}

fn simulate(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--out", out];
    args.extend_from_slice(extra);
    let o = rigvo(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("rig.txt").exists() && dir.join("tracks.txt").exists());
}

fn run_on(dir: &Path, extra: &[&str]) -> Output {
    let rig = dir.join("rig.txt");
    let tracks = dir.join("tracks.txt");
    let mut args = vec!["run", "--rig", rig.to_str().unwrap(), "--tracks", tracks.to_str().unwrap()];
    args.extend_from_slice(extra);
    rigvo(&args)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rigvo(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(rigvo(&["run", "--rig", "r.txt", "--loop", "maybe"]).status.code(), Some(2));
}

#[test]
fn malformed_rig_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let rig = dir.path().join("rig.txt");
    std::fs::write(&rig, "cam 0 pinhole 320 320 320 240 1.2 640 480 | 0 0 0 0 0 0 0.9\n").unwrap();
    let o = rigvo(&["run", "--rig", rig.to_str().unwrap(), "--frames", "5"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn too_short_sequence_is_an_init_failure() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--frames", "6", "--seed", "2"]);
    assert_eq!(run_on(dir.path(), &[]).status.code(), Some(3));
}

#[test]
fn straight_line_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--trajectory", "line", "--frames", "40", "--length", "20"]);
    let o = run_on(dir.path(), &["--cameras", "0,1,2,3"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let lines: String = (0..20)
        .map(|i| {
            let a = i as f64 * 0.2;
            format!("{:.8} {} {} 0 0 0 0 1\n", i as f64 * 0.1, 5.0 * a.cos(), 5.0 * a.sin())
        })
        .collect();
    std::fs::write(&gt, lines).unwrap();
    let report = dir.path().join("report.txt");
    let o = rigvo(&["eval", "--est", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(report).unwrap();
    assert!(text.contains("ate_trans_rmse"), "{text}");
}

#[test]
fn make_vocab_writes_a_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), &["--frames", "20"]);
    let vocab = dir.path().join("vocab.bin");
    let tracks = dir.path().join("tracks.txt");
    let o = rigvo(&["make-vocab", "--tracks", tracks.to_str().unwrap(), "--out", vocab.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(&std::fs::read(vocab).unwrap()[..8], b"MCVOVOC1");
}
