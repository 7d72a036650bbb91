use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use mvboot::config::PipelineConfig;
use mvboot::detector::{ConfidenceRange, DetectorModel};
use mvboot::io::{self as files, FrameTriangulation, PointTable};
use mvboot::metrics::{self, HandFrame, Heatmap, KeypointSample, PckCurve};
use mvboot::pipeline::{self, FrameRecord, Heuristic};
use mvboot::planning::{self, Estimate, PlanningReport, PLANNING_CSV_HEADER};
use mvboot::scene::SyntheticScene;
use mvboot::skeleton::{HandSkeleton, KEYPOINT_COUNT};
use mvboot::triangulation::{triangulate_frame, Detection2D};

use crate::failure::{Failure, EXIT_NO_CONSENSUS};
use crate::grid::{parse_f64_axis, parse_options, parse_u64_axis};
use crate::{BootstrapArgs, EvalArgs, PlanArgs, SimulateArgs, TriangulateArgs};

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::other(format!("{}: {e}", path.display())))
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_config(path: Option<&PathBuf>) -> Result<PipelineConfig, Failure> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

pub fn triangulate(args: &TriangulateArgs) -> Result<(), Failure> {
    let cfg = load_config(args.config.as_ref())?;
    let rig = files::read_calibration(open(&args.calibration)?, &name(&args.calibration))?;
    let frames = files::read_detections(open(&args.detections)?, &rig, &name(&args.detections))?;
    let skeleton = HandSkeleton::hand();
    let frames: Vec<(usize, Vec<Detection2D>)> = frames.into_iter().collect();
    let records = frames
        .into_par_iter()
        .map(|(f, dets)| {
            let tri = triangulate_frame(f as u64, &dets, &rig, &skeleton, &cfg.ransac)?;
            Ok(FrameRecord::new(f, dets, tri, cfg.filters.window_size))
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    files::write_jsonl(records.iter().map(FrameTriangulation::from), output(args.out.as_ref())?)?;
    if !records.is_empty() && records.iter().all(|r| r.valid_count() == 0) {
        return Err(Failure { code: EXIT_NO_CONSENSUS, message: "no keypoint reached consensus in any frame".into() });
    }
    Ok(())
}

pub fn bootstrap(args: &BootstrapArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(k) = args.iterations {
        cfg.bootstrap.iterations = k;
    }
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    fs::create_dir_all(&out_dir)?;

    if let Some(tri_path) = &args.triangulations {
        let cal = args.calibration.as_ref().expect("clap enforces --calibration");
        let rig = files::read_calibration(open(cal)?, &name(cal))?;
        let mut records = files::read_triangulations(open(tri_path)?, cfg.filters.window_size, &name(tri_path))?;
        pipeline::filter_all(&mut records, &cfg.filters, &rig, &HandSkeleton::hand());
        let mut selected = pipeline::select_best_per_window(&records);
        selected.truncate(cfg.filters.n_best);
        let labels = pipeline::emit_labels(&records, &selected, &rig, &cfg.filters.occluders);
        files::write_jsonl(&labels, create(&out_dir.join("labels.jsonl"))?)?;
        let scores: BTreeMap<usize, f64> = records.iter().map(|r| (r.frame, r.score)).collect();
        let mut out = io::stdout().lock();
        writeln!(out, "rank,frame,score")?;
        for (rank, f) in selected.iter().enumerate() {
            writeln!(out, "{},{f},{}", rank + 1, scores[f])?;
        }
        for h in Heuristic::ALL {
            let rejected = records.iter().filter(|r| r.verdicts.is_some_and(|v| !v.get(h))).count();
            if rejected > 0 {
                eprintln!("{h:?}: {rejected} frames rejected");
            }
        }
        eprintln!("{} frames selected, {} labels written", selected.len(), labels.len());
        return Ok(());
    }

    cfg.validate()?;
    let scene = SyntheticScene::generate(&cfg.scene).map_err(|e| Failure::invariant(e.to_string()))?;
    let run = pipeline::run_bootstrap(&cfg.bootstrap_config(), &cfg.initial_state(), &scene, &cfg.trainer)?;
    files::write_report(&run.reports, create(&out_dir.join("report.csv"))?)?;
    for (i, labels) in run.labels.iter().enumerate() {
        files::write_jsonl(labels, create(&out_dir.join(format!("labels_iter{i}.jsonl")))?)?;
    }
    files::write_report(&run.reports, io::stdout().lock())?;
    Ok(())
}

fn axis_f64(v: &[String], default: Vec<f64>) -> Result<Vec<f64>, Failure> {
    if v.is_empty() {
        Ok(default)
    } else {
        parse_f64_axis(v).map_err(Failure::parse)
    }
}

fn axis_u64(v: &[String], default: Vec<u64>) -> Result<Vec<u64>, Failure> {
    if v.is_empty() {
        Ok(default)
    } else {
        parse_u64_axis(v).map_err(Failure::parse)
    }
}

struct McColumns {
    q2: Estimate,
    ft: Estimate,
    tp: Estimate,
    fp: Estimate,
}

const MC_SE: f64 = 3.0;

fn verify_row(r: &PlanningReport, trials: u64, seed: u64) -> Result<McColumns, Failure> {
    let s = &r.spec;
    Ok(McColumns {
        q2: planning::mc_spurious_pair(s.sigma, s.image_side, trials, seed),
        ft: planning::mc_false_triangulation(s, trials, seed ^ 1)?,
        tp: planning::mc_point_rates(s, trials, seed ^ 2)?.true_positive,
        fp: planning::mc_point_rates(s, trials, seed ^ 2)?.false_positive,
    })
}

pub fn plan(args: &PlanArgs) -> Result<(), Failure> {
    let grid = planning::grid(
        &axis_u64(&args.views, vec![5, 31])?,
        &axis_u64(&args.inliers, vec![2, 3, 4, 5])?,
        &axis_f64(&args.sigma, vec![4.0])?,
        &axis_f64(&args.width, vec![368.0])?,
        &axis_f64(&args.pck, planning::pck_axis())?,
        &axis_u64(&args.keypoints, vec![21])?,
    );
    let rows = planning::plan_grid(&grid)?;
    let mc = match &args.verify_mc {
        None => None,
        Some(spec) => {
            let mut trials = 100_000u64;
            let mut seed = 0u64;
            for (k, v) in parse_options(spec).map_err(Failure::parse)? {
                match k.as_str() {
                    "trials" if v >= 1.0 => trials = v as u64,
                    "seed" if v >= 0.0 => seed = v as u64,
                    _ => return Err(Failure::parse(format!("unknown or invalid --verify-mc option `{k}={v}`"))),
                }
            }
            Some(rows.iter().map(|r| verify_row(r, trials, seed)).collect::<Result<Vec<_>, _>>()?)
        }
    };
    let mut out = output(args.out.as_ref())?;
    write!(out, "{PLANNING_CSV_HEADER}")?;
    if mc.is_some() {
        write!(out, ",q2_mc,q2_ok,ft_mc,ft_ok,tp_mc,tp_ok,fp_mc,fp_ok")?;
    }
    writeln!(out)?;
    for (i, r) in rows.iter().enumerate() {
        write!(out, "{}", r.csv_row())?;
        if let Some(mc) = &mc {
            let m = &mc[i];
            // The pair and support terms are approximations with an upper
            // bound inside, so ft and fp are checked one-sided.
            write!(
                out,
                ",{:e},{},{:e},{},{:e},{},{:e},{}",
                m.q2.rate(),
                m.q2.agrees(r.q2, MC_SE),
                m.ft.rate(),
                m.ft.within_bound(r.ft, MC_SE),
                m.tp.rate(),
                m.tp.agrees(r.tp_point, MC_SE),
                m.fp.rate(),
                m.fp.within_bound(r.fp_point, MC_SE)
            )?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn attach_detections(records: &mut [FrameRecord], detections: BTreeMap<usize, Vec<Detection2D>>) {
    let mut detections = detections;
    for r in records {
        r.detections = detections.remove(&r.frame).unwrap_or_default();
    }
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    if args.predictions.is_none() && args.triangulations.is_none() {
        return Err(Failure::parse("nothing to evaluate: give --predictions/--truth or --triangulations"));
    }
    fs::create_dir_all(&args.out_dir)?;
    let skeleton = HandSkeleton::hand();

    if let (Some(pred_path), Some(truth_path)) = (&args.predictions, &args.truth) {
        let scale = match (args.scale, args.head_length) {
            (Some(s), None) => s,
            (None, Some(h)) => metrics::head_scale(h),
            _ => return Err(Failure::parse("give exactly one of --scale or --head-length")),
        };
        let thresholds = parse_f64_axis(std::slice::from_ref(&args.thresholds)).map_err(Failure::parse)?;
        let predictions: PointTable = files::read_points(open(pred_path)?, &name(pred_path))?;
        let truth: PointTable = files::read_points(open(truth_path)?, &name(truth_path))?;
        let samples: Vec<KeypointSample> = truth
            .iter()
            .filter_map(|(key, t)| predictions.get(key).map(|p| KeypointSample { keypoint: key.2, prediction: *p, truth: *t, scale }))
            .collect();
        let curve = PckCurve::evaluate(&samples, &thresholds, &skeleton)?;
        let mut out = create(&args.out_dir.join("pck.csv"))?;
        writeln!(out, "{}", PckCurve::CSV_HEADER)?;
        for row in curve.csv_rows() {
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        eprintln!("{} matched keypoints", samples.len());
    }

    if let Some(tri_path) = &args.triangulations {
        let cal = args.calibration.as_ref().expect("clap enforces --calibration");
        let det = args.detections.as_ref().expect("clap enforces --detections");
        let rig = files::read_calibration(open(cal)?, &name(cal))?;
        let detections = files::read_detections(open(det)?, &rig, &name(det))?;
        let mut records = files::read_triangulations(open(tri_path)?, 1, &name(tri_path))?;
        attach_detections(&mut records, detections);
        let mut observations = Vec::new();
        let mut skipped = 0usize;
        for r in &records {
            let anchors = [0, metrics::MIDDLE_MCP, metrics::INDEX_MCP, metrics::LITTLE_MCP].map(|k| r.position(k));
            let hand = match anchors {
                [Some(w), Some(m), Some(i), Some(l)] => HandFrame::from_points(w, m, i, l).ok(),
                _ => None,
            };
            match hand {
                Some(hand) => observations.extend(metrics::view_observations(r, &hand, &rig)),
                None => skipped += 1,
            }
        }
        let map: Heatmap = metrics::view_angle_heatmap(&observations, args.bin)?;
        let mut out = create(&args.out_dir.join("heatmap.csv"))?;
        writeln!(out, "{}", Heatmap::CSV_HEADER)?;
        for row in map.csv_rows() {
            writeln!(out, "{row}")?;
        }
        out.flush()?;
        if skipped > 0 {
            eprintln!("{skipped} frames skipped: wrist or knuckles not triangulated");
        }
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(f) = args.frames {
        cfg.scene.frames = f;
    }
    if let Some(v) = args.views {
        cfg.scene.ring.views = v;
    }
    if let Some(p) = args.pck {
        cfg.detector.pck = vec![p; KEYPOINT_COUNT];
    }
    if let Some(s) = args.seed {
        cfg.detector.rng_seed = s;
    }
    if args.no_occluders {
        cfg.scene.occluders.clear();
    }
    if args.exact {
        cfg.detector = DetectorModel {
            pck: vec![1.0; KEYPOINT_COUNT],
            correct_noise_sigma: 0.0,
            confidence_correct: ConfidenceRange::new(1.0, 1.0),
            ..cfg.detector
        };
    }
    cfg.validate()?;
    let scene = SyntheticScene::generate(&cfg.scene).map_err(|e| Failure::invariant(e.to_string()))?;
    let mut detections = BTreeMap::new();
    let mut truth = PointTable::new();
    for f in 0..scene.frame_count() {
        let dets = if args.exact {
            scene
                .rig
                .iter()
                .filter_map(|cam| scene.projections(f, cam).map(|t| (cam, t)))
                .flat_map(|(cam, t)| cfg.detector.detect_labeled(&t, None, f as u64, cam.id(), cam.width(), cam.height()))
                .map(|d| d.detection)
                .collect()
        } else {
            pipeline::detect_frame(&scene, &cfg.detector, f)
        };
        detections.insert(f, dets);
        for cam in scene.rig.iter() {
            if let Some(px) = scene.projections(f, cam) {
                for (k, p) in px.into_iter().enumerate() {
                    truth.insert((f, cam.id(), k), p);
                }
            }
        }
    }
    fs::create_dir_all(&args.out_dir)?;
    files::write_calibration(&scene.rig, create(&args.out_dir.join("calibration.json"))?)?;
    files::write_detections(&detections, create(&args.out_dir.join("detections.csv"))?)?;
    files::write_points(&truth, create(&args.out_dir.join("truth.csv"))?)?;
    Ok(())
}
