use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvboot::config::PipelineConfig;
use mvboot::io::{read_calibration, read_detections, read_labels, read_points, read_triangulations};
use mvboot::planning::{plan, preset_grid, SetupSpec};
use mvboot::scene::{SceneConfig, SyntheticScene};
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mvboot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvboot")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_detections(dir: &TempDir, body: &str) -> PathBuf {
    let p = dir.path().join("detections.csv");
    fs::write(&p, format!("frame,view,keypoint,x,y,confidence\n{body}")).unwrap();
    p
}

fn triangulate(detections: &Path, out: &Path) -> Output {
    mvboot(&["triangulate", "--calibration", path(&fixture("calibration.json")), "--detections", path(detections), "--out", path(out)])
}

#[test]
fn golden_triangulation_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tri.jsonl");
    let run = triangulate(&fixture("detections.csv"), &out);
    assert!(run.status.success(), "{}", stderr(&run));
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("expected_triangulations.jsonl")).unwrap());
}

#[test]
fn golden_triangulation_recovers_the_scene() {
    let mut cfg = SceneConfig { frames: 3, occluders: Vec::new(), ..Default::default() };
    cfg.ring.views = 5;
    let scene = SyntheticScene::generate(&cfg).unwrap();
    let file = BufReader::new(fs::File::open(fixture("expected_triangulations.jsonl")).unwrap());
    let records = read_triangulations(file, 15, "golden").unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        for (k, truth) in scene.keypoints[r.frame].iter().enumerate() {
            let p = r.position(k).expect("every keypoint triangulates");
            assert!((p - truth).norm() < 1e-6, "frame {} keypoint {k}", r.frame);
        }
        assert_eq!(r.score, 5.0 * 21.0);
    }
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let det = fixture("detections.csv");
    let cal = fixture("calibration.json");
    for (jobs, out) in [("1", &a), ("3", &b)] {
        let run = mvboot(&["--jobs", jobs, "triangulate", "--calibration", path(&cal), "--detections", path(&det), "--out", path(out)]);
        assert!(run.status.success(), "{}", stderr(&run));
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn empty_detections_give_empty_output() {
    let dir = TempDir::new().unwrap();
    let det = write_detections(&dir, "");
    let out = dir.path().join("tri.jsonl");
    let run = triangulate(&det, &out);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    assert!(fs::read(out).unwrap().is_empty());
}

#[test]
fn malformed_row_names_its_line() {
    let dir = TempDir::new().unwrap();
    let det = write_detections(&dir, "0,0,0,10,10,0.9\n0,1,0,abc,10,0.9\n");
    let run = triangulate(&det, &dir.path().join("tri.jsonl"));
    assert_eq!(run.status.code(), Some(2));
    assert!(stderr(&run).contains(":3:"), "{}", stderr(&run));
}

#[test]
fn unknown_view_is_an_invariant_violation() {
    let dir = TempDir::new().unwrap();
    let det = write_detections(&dir, "0,0,0,10,10,0.9\n0,9,0,10,10,0.9\n");
    let run = triangulate(&det, &dir.path().join("tri.jsonl"));
    assert_eq!(run.status.code(), Some(3), "{}", stderr(&run));
}

#[test]
fn confidence_out_of_range_is_an_invariant_violation() {
    let dir = TempDir::new().unwrap();
    let det = write_detections(&dir, "0,0,0,10,10,1.5\n");
    let run = triangulate(&det, &dir.path().join("tri.jsonl"));
    assert_eq!(run.status.code(), Some(3), "{}", stderr(&run));
}

#[test]
fn frames_without_consensus_exit_four() {
    let dir = TempDir::new().unwrap();
    let rows: String = (0..5).map(|v| format!("0,{v},0,{},{},0.1\n", 100 + 10 * v, 200 + 37 * v)).collect();
    let det = write_detections(&dir, &rows);
    let out = dir.path().join("tri.jsonl");
    let run = triangulate(&det, &out);
    assert_eq!(run.status.code(), Some(4), "{}", stderr(&run));
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 1);
}

#[test]
fn missing_input_file_fails() {
    let run = mvboot(&["triangulate", "--calibration", "/nonexistent.json", "--detections", "/nonexistent.csv"]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn plan_presets_cover_the_grid() {
    let run = mvboot(&["plan"]);
    assert!(run.status.success());
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + preset_grid().len());
    assert!(text.starts_with("V,n,sigma,w,pck,P,"));
}

#[test]
fn plan_single_row_matches_the_library() {
    let run = mvboot(&["plan", "--views", "31", "--inliers", "3", "--pck", "0.1"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let text = String::from_utf8(run.stdout).unwrap();
    let row = text.lines().nth(1).unwrap();
    let spec = SetupSpec { views: 31, min_inliers: 3, sigma: 4.0, image_side: 368.0, pck: 0.1, keypoints: 21 };
    assert_eq!(row, plan(&spec).unwrap().csv_row());
}

#[test]
fn plan_rejects_bad_axes() {
    assert_eq!(mvboot(&["plan", "--pck", "0.5:0.1"]).status.code(), Some(2));
    assert_eq!(mvboot(&["plan", "--pck", "1.5"]).status.code(), Some(2));
    assert_eq!(mvboot(&["plan", "--views", "1"]).status.code(), Some(2));
}

#[test]
fn plan_verify_adds_columns() {
    let run = mvboot(&["plan", "--views", "5", "--inliers", "3", "--pck", "0.6", "--verify-mc", "trials=2000,seed=3"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let text = String::from_utf8(run.stdout).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(header.len(), row.len());
    assert!(header.contains(&"tp_mc"));
}

#[test]
fn dump_defaults_round_trips() {
    let run = mvboot(&["--dump-defaults"]);
    assert!(run.status.success());
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(PipelineConfig::from_toml_str(&text, "stdout").unwrap(), PipelineConfig::default());
}

#[test]
fn bad_config_is_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[ransac]\nmin_inliers = 1\n").unwrap();
    let run = mvboot(&["bootstrap", "--config", path(&cfg), "--out-dir", path(dir.path())]);
    assert_eq!(run.status.code(), Some(3), "{}", stderr(&run));
    fs::write(&cfg, "[ransac\n").unwrap();
    let run = mvboot(&["bootstrap", "--config", path(&cfg), "--out-dir", path(dir.path())]);
    assert_eq!(run.status.code(), Some(2), "{}", stderr(&run));
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let run = mvboot(&["simulate", "--out-dir", path(d), "--frames", "4", "--views", "7", "--seed", "11"]);
        assert!(run.status.success(), "{}", stderr(&run));
    }
    for f in ["calibration.json", "detections.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exact_simulation_matches_the_fixture() {
    let dir = TempDir::new().unwrap();
    let run = mvboot(&["simulate", "--out-dir", path(dir.path()), "--frames", "3", "--views", "5", "--exact", "--no-occluders"]);
    assert!(run.status.success(), "{}", stderr(&run));
    for f in ["calibration.json", "detections.csv"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(fixture(f)).unwrap(), "{f}");
    }
}

#[test]
fn triangulate_then_bootstrap_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[filters]\noccluders = []\n").unwrap();
    let tri = fixture("expected_triangulations.jsonl");
    let cal = fixture("calibration.json");
    let run = mvboot(&["bootstrap", "--config", path(&cfg), "--triangulations", path(&tri), "--calibration", path(&cal), "--out-dir", path(dir.path())]);
    assert!(run.status.success(), "{}", stderr(&run));
    let stdout = String::from_utf8(run.stdout).unwrap();
    // The three frames share one window; the tie goes to frame 0.
    assert_eq!(stdout.lines().collect::<Vec<_>>(), vec!["rank,frame,score", "1,0,105"]);

    let labels = read_labels(BufReader::new(fs::File::open(dir.path().join("labels.jsonl")).unwrap()), "labels").unwrap();
    assert_eq!(labels.len(), 5);
    let rig = read_calibration(fs::File::open(&cal).unwrap(), "cal").unwrap();
    let dets = read_detections(fs::File::open(fixture("detections.csv")).unwrap(), &rig, "det").unwrap();
    for ex in &labels {
        assert_eq!(ex.frame, 0);
        for (k, label) in ex.labels.iter().enumerate() {
            let d = dets[&0].iter().find(|d| d.view == ex.view && d.keypoint == k).unwrap();
            let [x, y] = label.expect("every keypoint is inside the image");
            assert!((x - d.location.x).abs() < 1e-6 && (y - d.location.y).abs() < 1e-6);
            assert_eq!(ex.label_weights[k], 1);
        }
    }

    // With the body occluders of the default configuration every frame is
    // rejected because the rig here is not the one they were placed for.
    let run = mvboot(&["bootstrap", "--triangulations", path(&tri), "--calibration", path(&cal), "--out-dir", path(dir.path())]);
    assert!(run.status.success());
    assert!(stderr(&run).contains("Occlusion: 3 frames rejected"));
}

#[test]
fn synthetic_bootstrap_writes_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[scene]\nframes = 60\n[scene.ring]\nviews = 12\n").unwrap();
    let run = mvboot(&["bootstrap", "--config", path(&cfg), "--out-dir", path(dir.path()), "--iterations", "2"]);
    assert!(run.status.success(), "{}", stderr(&run));
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert_eq!(String::from_utf8(run.stdout).unwrap(), report);
    assert!(dir.path().join("labels_iter0.jsonl").exists());
    assert!(dir.path().join("labels_iter1.jsonl").exists());
}

#[test]
fn eval_writes_pck_and_heatmap() {
    let dir = TempDir::new().unwrap();
    let sim = dir.path().join("sim");
    let run = mvboot(&["simulate", "--out-dir", path(&sim), "--frames", "3", "--views", "5", "--exact", "--no-occluders"]);
    assert!(run.status.success());
    let run = mvboot(&[
        "eval",
        "--predictions",
        path(&sim.join("detections.csv")),
        "--truth",
        path(&sim.join("truth.csv")),
        "--head-length",
        "20",
        "--thresholds",
        "0,0.1",
        "--triangulations",
        path(&fixture("expected_triangulations.jsonl")),
        "--calibration",
        path(&fixture("calibration.json")),
        "--detections",
        path(&fixture("detections.csv")),
        "--out-dir",
        path(dir.path()),
    ]);
    assert!(run.status.success(), "{}", stderr(&run));
    let pck = fs::read_to_string(dir.path().join("pck.csv")).unwrap();
    assert!(pck.lines().any(|l| l == "all,0.1,1"), "{pck}");
    assert!(pck.lines().any(|l| l == "all,0,0"), "{pck}");

    let heat = fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    let total: u64 = heat.lines().skip(1).map(|l| l.split(',').nth(5).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total, 3 * 5 * 21);
    let outliers: u64 = heat.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(outliers, 0);

    let truth = read_points(fs::File::open(sim.join("truth.csv")).unwrap(), "truth").unwrap();
    assert_eq!(truth.len(), 3 * 5 * 21);
}

#[test]
fn eval_needs_a_scale() {
    let run = mvboot(&["eval", "--predictions", path(&fixture("detections.csv")), "--truth", path(&fixture("detections.csv"))]);
    assert_eq!(run.status.code(), Some(2));
}
