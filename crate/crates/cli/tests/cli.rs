use std::path::Path;
use std::process::{Command, Output};

use nalgebra::Vector3;
use wipose::geometry::{DistanceMeasurement, Intrinsics, RigidTransform};
use serde_json::Value;
use wipose::io::{read_array, read_calibration, read_report, BoardObservation, CalibrationSession, SessionPair};

mod common;

fn wipose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wipose")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = wipose(args);
    assert!(
        out.status.success(),
        "wipose {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(wipose(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(wipose(&["simulate"]).status.code(), Some(2));
    assert_eq!(wipose(&["train", "--out", "x", "--data", "y", "--mode", "sideways"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = wipose(&["eval", "--data", &s(dir.path()), "--checkpoint", "nope.ckpt", "--out", &s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"not_a_field": 1}"#).unwrap();
    let out = wipose(&["simulate", "--config", &s(&bad), "--out", &s(&dir.path().join("sim"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, common::SMOKE_CONFIG).unwrap();
    let (cfg, sim, feat) = (s(&cfg), s(&root.join("sim")), s(&root.join("feat")));
    ok(&["simulate", "--seed", "1", "--config", &cfg, "--out", &sim]);
    // Featurize into a separate directory; the raw clips stay where they are.
    ok(&["preprocess", "--config", &cfg, "--data", &sim, "--out", &feat]);
    let ckpt = s(&root.join("train/model.ckpt"));
    ok(&["train", "--seed", "1", "--config", &cfg, "--data", &feat, "--epochs", "1", "--out", &s(&root.join("train"))]);
    ok(&["eval", "--config", &cfg, "--data", &feat, "--checkpoint", &ckpt, "--out", &s(&root.join("eval"))]);
    ok(&[
        "perturb", "--config", &cfg, "--data", &feat, "--checkpoint", &ckpt, "--sigma", "0", "--sigma", "0.5", "--out",
        &s(&root.join("perturb")),
    ]);
    ok(&["export-features", "--config", &cfg, "--data", &feat, "--checkpoint", &ckpt, "--out", &s(&root.join("x"))]);

    let train = read_report::<Value>(&root.join("train/train_report.json")).unwrap();
    assert_eq!(train["history"].as_array().unwrap().len(), 1);
    let eval = read_report::<Value>(&root.join("eval/eval_report.json")).unwrap();
    let sweep = read_report::<Value>(&root.join("perturb/sensitivity_report.json")).unwrap();
    let points = sweep["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    // Zero noise reproduces plain evaluation exactly.
    assert_eq!(points[0]["report"], eval["report"]);

    // Held-out layout 1: 2 spots × 2 orientations × 2 actions × 8 frames.
    let frames = eval["report"]["frames"].as_u64().unwrap();
    assert_eq!(frames, 64);
    let features = read_array(&root.join("x/features.pacs")).unwrap();
    assert_eq!(features.dims[0] as u64, frames);
    let labels = read_report::<Value>(&root.join("x/feature_labels.json")).unwrap();
    assert_eq!(labels["rows"].as_u64(), Some(frames));
    assert!(labels["labels"].as_array().unwrap().iter().all(|l| l["layout"] == 1));
}

fn observe(k: &Intrinsics, t: &RigidTransform) -> BoardObservation {
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for r in 0..7 {
        for c in 0..10 {
            let p = Vector3::new(c as f64 * 0.03, r as f64 * 0.03, 0.0);
            let px = k.project_camera_point(&t.apply(&p)).unwrap();
            points.push([p.x, p.y, p.z]);
            pixels.push([px.x, px.y]);
        }
    }
    BoardObservation { points, pixels }
}

#[test]
fn calibrate_recovers_devices() {
    let k = Intrinsics::new(1200.0, 1200.0, 960.0, 540.0).unwrap();
    let t_b = RigidTransform::from_rotation_vector(&Vector3::new(0.3, -0.1, 0.05), Vector3::new(-0.3, 0.0, 1.2));
    let t_b1 = RigidTransform::from_rotation_vector(&Vector3::new(-0.2, 0.25, 0.4), Vector3::new(0.2, 0.05, 1.1));
    let session = CalibrationSession {
        schema_version: 1,
        intrinsics: k,
        pairs: vec![SessionPair {
            world_board: observe(&k, &t_b),
            aux_board: observe(&k, &t_b1),
            distance: DistanceMeasurement::Direct { meters: 0.5 },
        }],
        merge_tolerance: 0.05,
        inconsistency_threshold: 0.1,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    std::fs::write(&path, serde_json::to_string(&session).unwrap()).unwrap();
    ok(&["calibrate", "--config", &s(&path), "--out", &s(dir.path())]);

    let cal = read_calibration(&dir.path().join("calibration.json")).unwrap();
    let to_world = |p: Vector3<f64>| t_b.inverse().apply(&t_b1.apply(&p));
    assert!((cal.layout.tx - to_world(Vector3::new(-0.25, 0.0, 0.0))).norm() < 1e-6);
    assert!((cal.layout.rxs[0] - to_world(Vector3::new(0.25, 0.0, 0.0))).norm() < 1e-6);
    let report = read_report::<Value>(&dir.path().join("calibrate_report.json")).unwrap();
    assert_eq!(report["receivers"], 1);
}
