use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agmm_cli::io::{cloud_to_csv, parse_cloud_csv, transform_to_json, AnyCloud};
use agmm_core::shapes;
use agmm_core::{CovPointCloud, RigidTransform, Vector};
use tempfile::TempDir;

fn agmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agmm"))
        .args(args)
        .env("AGMM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_model(dir: &Path, name: &str, points: usize) -> PathBuf {
    let path = dir.join(name);
    let cloud = CovPointCloud::isotropic(shapes::fish(points), 1e-4).unwrap();
    fs::write(&path, cloud_to_csv(&cloud)).unwrap();
    path
}

fn write_json<const D: usize>(dir: &Path, name: &str, t: &RigidTransform<D>) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, transform_to_json(t)).unwrap();
    path
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn identical_files_register_to_identity() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), "model.csv", 100);
    let json = dir.path().join("t.json");
    let report = dir.path().join("r.csv");
    let out = agmm(&[
        "register", "--fixed", s(&model), "--moving", s(&model), "--dim", "2",
        "--out-transform", s(&json), "--out-report", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ident = write_json(dir.path(), "id.json", &RigidTransform::<2>::identity());
    let eval = agmm(&["eval", "--gt", s(&ident), "--est", s(&json)]);
    assert!(eval.status.success());
    let text = stdout(&eval);
    let err: f64 = text.lines().next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-6, "{text}");
    let report_text = fs::read_to_string(&report).unwrap();
    assert!(report_text.starts_with("# termination="));
    assert!(report_text.contains("iteration,sigma,energy"));
}

#[test]
fn synthesized_rotation_is_recovered() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), "model.csv", 100);
    let prefix = dir.path().join("pair");
    let out = agmm(&[
        "synth", "--model", s(&model), "--occlusion", "0", "--sample-fixed", "1",
        "--sample-moving", "1", "--noise-std", "0", "--outliers", "0", "--rotation-deg", "10",
        "--seed", "3", "--out-prefix", s(&prefix),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est = dir.path().join("est.json");
    let out = agmm(&[
        "register", "--fixed", s(&dir.path().join("pair_fixed.csv")),
        "--moving", s(&dir.path().join("pair_moving.csv")), "--dim", "2",
        "--out-transform", s(&est), "--out-report", s(&dir.path().join("rep.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = agmm(&["eval", "--gt", s(&dir.path().join("pair_gt.json")), "--est", s(&est)]);
    let text = stdout(&eval);
    let err: f64 = text.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-2, "{text}");
}

#[test]
fn dimension_mismatch_exits_with_data_error() {
    let dir = TempDir::new().unwrap();
    let planar = write_model(dir.path(), "a.csv", 20);
    let spatial = dir.path().join("b.csv");
    fs::write(&spatial, "x,y,z\n0,0,0\n1,0,0\n0,1,0\n0,0,1\n").unwrap();
    let out = agmm(&[
        "register", "--fixed", s(&planar), "--moving", s(&spatial), "--dim", "2",
        "--out-transform", s(&dir.path().join("t.json")), "--out-report", s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.path().join("t.json").exists());
}

#[test]
fn bad_input_exit_codes() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y,c11,c12,c22\n0,0,1,0,1\n1,1,-1,0,1\n").unwrap();
    let out = agmm(&[
        "register", "--fixed", s(&bad), "--moving", s(&bad), "--dim", "2",
        "--out-transform", s(&dir.path().join("t.json")), "--out-report", s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    assert_eq!(agmm(&["register", "--fixed", "x"]).status.code(), Some(2));
    assert_eq!(agmm(&["frobnicate"]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_agmm"))
        .args(["eval", "--gt", "a", "--est", "b"])
        .env("AGMM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_perturbation_reproduces_model() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), "model.csv", 60);
    let prefix = dir.path().join("zero");
    let out = agmm(&["synth", "--model", s(&model), "--translation", "0", "--seed", "1", "--out-prefix", s(&prefix)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let original = parse_cloud_csv(&fs::read_to_string(&model).unwrap(), 1e-4).unwrap();
    for suffix in ["_fixed.csv", "_moving.csv"] {
        let text = fs::read_to_string(dir.path().join(format!("zero{suffix}"))).unwrap();
        assert_eq!(parse_cloud_csv(&text, 1e-4).unwrap(), original);
    }
}

#[test]
fn synth_is_byte_reproducible_and_counts_outliers() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), "model.csv", 100);
    let run = |prefix: &str| {
        let p = dir.path().join(prefix);
        let out = agmm(&[
            "synth", "--model", s(&model), "--outliers", "0.5", "--noise-std", "0.02",
            "--rotation-deg", "-25", "--sample-fixed", "0.9", "--seed", "17", "--out-prefix", s(&p),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        p
    };
    run("a");
    run("b");
    for suffix in ["_fixed.csv", "_moving.csv", "_gt.json"] {
        let a = fs::read(dir.path().join(format!("a{suffix}"))).unwrap();
        let b = fs::read(dir.path().join(format!("b{suffix}"))).unwrap();
        assert_eq!(a, b, "{suffix}");
    }
    assert_eq!(rows(&dir.path().join("a_moving.csv")), 150);
    assert_eq!(rows(&dir.path().join("a_fixed.csv")), 90 + 50);
    match parse_cloud_csv(&fs::read_to_string(dir.path().join("a_moving.csv")).unwrap(), 1e-4).unwrap() {
        AnyCloud::Planar(c) => assert_eq!(c.len(), 150),
        AnyCloud::Spatial(_) => panic!("expected 2D"),
    }
}

fn sweep_dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = agmm(&["generate", "--count", "3", "--points", "60", "--seed", "5", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn single_point_sweep_has_one_row_per_method() {
    let dir = TempDir::new().unwrap();
    let data = sweep_dataset(dir.path());
    let csv = dir.path().join("s.csv");
    let svg = dir.path().join("s.svg");
    let out = agmm(&[
        "sweep", "--dataset", s(&data), "--variable", "rotation", "--grid", "0", "--trials", "1",
        "--seed", "2", "--methods", "agmm,icp", "--out-csv", s(&csv), "--out-svg", s(&svg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,variable,value,trial,rotation_error,translation_error,wall_time,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("agmm,rotation,0.0,0,"));
    assert!(lines[2].starts_with("icp,rotation,0.0,0,"));
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 2);
}

#[test]
fn default_rotation_grid_and_rerun_bytes() {
    let dir = TempDir::new().unwrap();
    let data = sweep_dataset(dir.path());
    let run = |name: &str| {
        let csv = dir.path().join(format!("{name}.csv"));
        let out = agmm(&[
            "sweep", "--dataset", s(&data), "--variable", "rotation", "--trials", "1", "--seed", "9",
            "--methods", "icp", "--out-csv", s(&csv), "--out-svg", s(&dir.path().join(format!("{name}.svg"))),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(csv).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let values: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    let expected: Vec<f64> = (0..16).map(|i| -60.0 + 8.0 * i as f64).collect();
    assert_eq!(values, expected);
}

#[test]
fn sweep_usage_errors() {
    let dir = TempDir::new().unwrap();
    let data = sweep_dataset(dir.path());
    let base = |variable: &str, dataset: &Path| {
        agmm(&[
            "sweep", "--dataset", s(dataset), "--variable", variable, "--grid", "0", "--trials", "1",
            "--out-csv", s(&dir.path().join("x.csv")), "--out-svg", s(&dir.path().join("x.svg")),
        ])
    };
    assert_eq!(base("scale", &data).status.code(), Some(2));
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(base("noise", &empty).status.code(), Some(3));
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn eval_closed_forms() {
    let dir = TempDir::new().unwrap();
    let id2 = write_json(dir.path(), "id2.json", &RigidTransform::<2>::identity());
    let half = write_json(
        dir.path(),
        "half.json",
        &RigidTransform::from_angle(std::f64::consts::PI, Vector::<2>::zeros()),
    );
    let id3 = write_json(dir.path(), "id3.json", &RigidTransform::<3>::identity());
    let quarter = write_json(
        dir.path(),
        "quarter.json",
        &RigidTransform::from_axis_angle(
            Vector::<3>::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vector::<3>::zeros(),
        ),
    );
    let first_line = |gt: &Path, est: &Path| stdout(&agmm(&["eval", "--gt", s(gt), "--est", s(est)]));
    assert_eq!(first_line(&id2, &id2), "rotation_error 0.000000\ntranslation_error 0.000000\n");
    assert!(first_line(&half, &id2).starts_with("rotation_error 2.828427\n"));
    assert!(first_line(&quarter, &id3).starts_with("rotation_error 2.000000\n"));

    assert_eq!(agmm(&["eval", "--gt", s(&id2), "--est", s(&id3)]).status.code(), Some(3));
    let skew = dir.path().join("skew.json");
    fs::write(&skew, r#"{"dim":2,"rotation":[1.0,0.2,0.0,1.0],"translation":[0.0,0.0]}"#).unwrap();
    assert_eq!(agmm(&["eval", "--gt", s(&skew), "--est", s(&id2)]).status.code(), Some(3));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = TempDir::new().unwrap();
    let model = write_model(dir.path(), "model.csv", 50);
    let cfg = dir.path().join("run.cfg");
    let json = dir.path().join("t.json");
    fs::write(
        &cfg,
        format!("max_iters = 3\ncutoff = inf\nout_transform = {}\nout_report = {}\n", s(&json), s(&dir.path().join("r.csv"))),
    )
    .unwrap();
    let out = agmm(&["register", "--fixed", s(&model), "--moving", s(&model), "--dim", "2", "--config", s(&cfg), "--max-iters", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(json.exists());
    fs::write(&cfg, "max_iters = 0\n").unwrap();
    let out = agmm(&["register", "--fixed", s(&model), "--moving", s(&model), "--dim", "2", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ply_models_register() {
    let dir = TempDir::new().unwrap();
    let blob = shapes::blob_dataset(1, 150, 1e-4, 4).unwrap().remove(0);
    let mut ply = format!("ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n", blob.len());
    for p in blob.points() {
        ply.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    let path = dir.path().join("blob.ply");
    fs::write(&path, ply).unwrap();
    let out = agmm(&[
        "register", "--fixed", s(&path), "--moving", s(&path), "--dim", "3",
        "--out-transform", s(&dir.path().join("t.json")), "--out-report", s(&dir.path().join("r.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
