use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvn_core::io::{EstimatesFile, PoseJson, Raster, SceneFile, SolutionFile};
use kvn_core::voting::SegMask;
use serde_json::{json, Value};

fn kvn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvn"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("KVN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kvn(dir, args);
    assert!(
        out.status.success(),
        "kvn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema: &str, instance: &Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(format!("{schema}.v1.schema.json"));
    let validator = jsonschema::validator_for(&read(&path)).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema}: {errors:?}");
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let args = [
        "--seed",
        "17",
        "gen",
        "--noise-sigma",
        "0.05",
        "--outlier-fraction",
        "0.2",
        "--flip-fraction",
        "0.01",
    ];
    ok(a.path(), &args);
    ok(b.path(), &args);
    ok(
        c.path(),
        &[
            "--seed",
            "18",
            "gen",
            "--noise-sigma",
            "0.05",
            "--outlier-fraction",
            "0.2",
        ],
    );
    let fa = files(a.path());
    assert!(fa.len() > 5);
    assert_eq!(fa, files(b.path()));
    assert_ne!(fa, files(c.path()));
}

#[test]
fn invalid_gen_spec_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--outlier-fraction", "1.0"][..],
        &["gen", "--keypoints", "500", "--model-points", "10"][..],
        &["gen", "--width", "0"][..],
    ] {
        let out = kvn(dir.path(), args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}

#[test]
fn full_round_trip_recovers_the_pose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "4", "gen"]);
    ok(d, &["--seed", "4", "vote"]);
    ok(d, &["solve"]);
    let metrics: Value = serde_json::from_str(&ok(d, &["eval"])).unwrap();
    assert_eq!(metrics["add_pct"], 100.0);
    assert!(metrics["mae"].as_f64().unwrap() < 1.0);

    let scene: SceneFile = serde_json::from_value(read(&d.join("scene.json"))).unwrap();
    let solution: SolutionFile = serde_json::from_value(read(&d.join("solution.json"))).unwrap();
    let gt = scene.gt_pose().unwrap().unwrap();
    assert!(solution.pose().unwrap().rotation_error(&gt) < 1e-4);
    assert!(solution.pose().unwrap().translation_error(&gt) < 1e-4);
    assert!(solution.converged && solution.weighted);

    let estimates: EstimatesFile = serde_json::from_value(read(&d.join("estimates.json"))).unwrap();
    assert!(estimates.failures.is_empty());
    for (i, row) in estimates.observations.iter().enumerate() {
        let ann = read(&d.join(format!("cam{i}_annotation.json")));
        for (j, o) in row.iter().enumerate() {
            let kp = &ann["keypoints2d"][j];
            let o = o.as_ref().unwrap();
            let du = o.mean[0] - kp[0].as_f64().unwrap();
            let dv = o.mean[1] - kp[1].as_f64().unwrap();
            assert!(du.hypot(dv) < 0.5);
        }
    }

    assert_valid("scene", &read(&d.join("scene.json")));
    assert_valid("manifest", &read(&d.join("manifest.json")));
    assert_valid("annotation", &read(&d.join("cam1_annotation.json")));
    assert_valid("estimates", &read(&d.join("estimates.json")));
    assert_valid("solution", &read(&d.join("solution.json")));
    assert_valid("metrics", &read(&d.join("metrics.json")));
    let csv = std::fs::read_to_string(d.join("auc_curve.csv")).unwrap();
    assert!(csv.starts_with("threshold_m,pass_pct\n"));
}

#[test]
fn vote_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "--seed",
            "2",
            "gen",
            "--noise-sigma",
            "0.05",
            "--outlier-fraction",
            "0.3",
        ],
    );
    ok(d, &["--seed", "2", "vote"]);
    let first = std::fs::read(d.join("estimates.json")).unwrap();
    ok(d, &["--seed", "2", "vote"]);
    assert_eq!(first, std::fs::read(d.join("estimates.json")).unwrap());
}

#[test]
fn empty_mask_reports_failures_and_solve_uses_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "8", "gen"]);
    let empty = SegMask::filled(64, 64, 0.0).unwrap();
    std::fs::write(d.join("cam0_mask.kvnf"), Raster::from_mask(&empty).to_bytes()).unwrap();
    ok(d, &["--seed", "8", "vote"]);
    let estimates: EstimatesFile = serde_json::from_value(read(&d.join("estimates.json"))).unwrap();
    assert_eq!(estimates.failures.len(), 8);
    assert!(estimates.failures.iter().all(|f| f.camera == 0));
    assert!(estimates.observations[0].iter().all(Option::is_none));
    assert!(estimates.observations[1].iter().all(Option::is_some));
    assert_valid("estimates", &read(&d.join("estimates.json")));

    ok(d, &["solve"]);
    let scene: SceneFile = serde_json::from_value(read(&d.join("scene.json"))).unwrap();
    let solution: SolutionFile = serde_json::from_value(read(&d.join("solution.json"))).unwrap();
    assert!(
        solution
            .pose()
            .unwrap()
            .rotation_error(&scene.gt_pose().unwrap().unwrap())
            < 1e-3
    );
}

#[test]
fn unweighted_matches_weighted_on_identity_covariances() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "5", "gen"]);
    let mut scene = read(&d.join("scene.json"));
    let scene_file: SceneFile = serde_json::from_value(scene.clone()).unwrap();
    let rig = scene_file.rig().unwrap();
    let gt = scene_file.gt_pose().unwrap().unwrap();
    let keypoints = scene_file.keypoints().unwrap();
    let observations: Vec<Vec<Value>> = (0..rig.len())
        .map(|i| {
            keypoints
                .points()
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let px = rig.project(i, &gt, k).unwrap();
                    let wobble = 0.3 * ((7 * i + 3 * j) as f64).sin();
                    if i == 1 && j == 2 {
                        Value::Null
                    } else {
                        json!({"mean": [px.x + wobble, px.y - wobble], "cov": [1.0, 0.0, 0.0, 1.0]})
                    }
                })
                .collect()
        })
        .collect();
    scene["observations"] = json!(observations);
    let problem = d.join("problem.json");
    std::fs::write(&problem, serde_json::to_string(&scene).unwrap()).unwrap();
    assert_valid("scene", &scene);

    let p = problem.to_str().unwrap();
    let weighted: SolutionFile = serde_json::from_str(&ok(d, &["solve", "--problem", p])).unwrap();
    let plain: SolutionFile = serde_json::from_str(&ok(d, &["solve", "--problem", p, "--unweighted"])).unwrap();
    assert!(!plain.weighted);
    let (a, b) = (weighted.pose().unwrap(), plain.pose().unwrap());
    assert!(a.rotation_error(&b) < 1e-8);
    assert!(a.translation_error(&b) < 1e-8);
}

fn sample_line(est: &PoseJson, keypoints: &[[f64; 3]], symmetric: bool) -> String {
    let identity = PoseJson::from(&kvn_core::geometry::Pose::identity());
    let mut d: f64 = 0.0;
    for a in keypoints {
        for b in keypoints {
            d = d.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt());
        }
    }
    let v =
        json!({"gt_pose": identity, "est_pose": est, "keypoints3d": keypoints, "symmetric": symmetric, "diameter": d});
    assert_valid("eval_sample", &v);
    serde_json::to_string(&v).unwrap()
}

fn eval_lines(dir: &Path, lines: &[String]) -> Value {
    let path = dir.join("samples.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let report: Value = serde_json::from_str(&ok(dir, &["eval", "--samples", path.to_str().unwrap()])).unwrap();
    assert_valid("metrics", &report);
    assert_eq!(report, read(&dir.join("metrics.json")));
    report
}

#[test]
fn eval_examples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let kps = [[0.05, 0.0, 0.0], [0.0, 0.05, 0.0], [-0.05, 0.0, 0.0], [0.0, -0.05, 0.0]];
    let identity = PoseJson::from(&kvn_core::geometry::Pose::identity());

    let gt: Vec<String> = (0..3).map(|_| sample_line(&identity, &kps, false)).collect();
    assert_eq!(
        eval_lines(d, &gt),
        json!({"add_pct": 100.0, "lt2cm_pct": 100.0, "auc": 100.0, "mae": 0.0})
    );

    let shifted = PoseJson {
        rotation: identity.rotation,
        translation: [0.03, 0.04, 0.0],
    };
    let r = eval_lines(d, &[sample_line(&shifted, &kps, false)]);
    assert!((r["auc"].as_f64().unwrap() - 50.0).abs() < 1e-9);
    assert!((r["mae"].as_f64().unwrap() - 50.0).abs() < 1e-9);

    let quarter = PoseJson {
        rotation: [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        translation: [0.0; 3],
    };
    let sym = eval_lines(d, &[sample_line(&quarter, &kps, true)]);
    assert_eq!(sym["mae"], 0.0);
    let asym = eval_lines(d, &[sample_line(&quarter, &kps, false)]);
    assert!(asym["mae"].as_f64().unwrap() > 50.0);
    assert_eq!(asym["add_pct"], 0.0);

    let csv = std::fs::read_to_string(d.join("auc_curve.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("threshold_m,pass_pct"));
}

#[test]
fn eval_rejects_bad_sample_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"gt_pose\": 1}\n").unwrap();
    let out = kvn(dir.path(), &["eval", "--samples", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn gradcheck_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tight: Value = serde_json::from_str(&ok(d, &["--seed", "1", "gradcheck"])).unwrap();
    assert_valid("gradcheck", &tight);
    assert!(tight["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(tight["checked"].as_u64().unwrap() > 0);

    let loose: Value = serde_json::from_str(&ok(d, &["--seed", "1", "gradcheck", "--step", "1e-3"])).unwrap();
    assert_valid("gradcheck", &loose);
    assert!(loose["max_rel_error"].as_f64().unwrap().is_finite());
    assert_eq!(
        loose.as_object().unwrap().keys().collect::<Vec<_>>(),
        ["checked", "max_rel_error", "skipped_kinks"]
    );
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = json!({"seed": 3, "gen": {"width": 48, "height": 40, "n_keypoints": 6}});
    assert_valid("config", &cfg);
    let path = d.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    ok(d, &["--config", path.to_str().unwrap(), "gen", "--keypoints", "5"]);
    let scene = read(&d.join("scene.json"));
    assert_eq!(scene["keypoints3d"].as_array().unwrap().len(), 5);
    assert_eq!(scene["cameras"][0]["width"], 48);
    assert_eq!(read(&d.join("manifest.json"))["seed"], 3);

    assert_valid("config", &serde_json::to_value(kvn_cli::RunConfig::default()).unwrap());

    std::fs::write(&path, r#"{"gen": {"widht": 3}}"#).unwrap();
    let out = kvn(d, &["--config", path.to_str().unwrap(), "gen"]);
    assert!(!out.status.success());
}

#[test]
fn bad_thread_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kvn"))
        .args(["--out-dir", dir.path().to_str().unwrap(), "gradcheck"])
        .env("KVN_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
