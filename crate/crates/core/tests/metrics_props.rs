use std::collections::BTreeMap;

use nalgebra::{Rotation2, Vector2};
use proptest::prelude::*;

use mvboot::detector::DetectorModel;
use mvboot::geometry::Point2D;
use mvboot::metrics::{pck, pck_by_joint_class, view_angle_heatmap, view_observations, HandFrame, KeypointSample, PckCurve};
use mvboot::pipeline::FrameRecord;
use mvboot::scene::{RingConfig, SceneConfig, SyntheticScene};
use mvboot::skeleton::{HandSkeleton, JointClass, KEYPOINT_COUNT};
use mvboot::triangulation::{triangulate_frame, RansacConfig};

fn samples() -> impl Strategy<Value = Vec<KeypointSample>> {
    prop::collection::vec((0usize..KEYPOINT_COUNT, -50.0f64..50.0, -50.0f64..50.0, -20.0f64..20.0, -20.0f64..20.0, 1.0f64..30.0), 1..80)
        .prop_map(|v| {
            v.into_iter()
                .map(|(k, x, y, dx, dy, scale)| KeypointSample {
                    keypoint: k,
                    truth: Point2D::new(x, y),
                    prediction: Point2D::new(x + dx, y + dy),
                    scale,
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn pck_is_monotone_in_sigma(s in samples(), a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (p_lo, p_hi) = (pck(&s, lo).unwrap(), pck(&s, hi).unwrap());
        prop_assert!((0.0..=1.0).contains(&p_lo) && p_lo <= p_hi);

        let thresholds: Vec<f64> = (0..=50).map(|i| i as f64 * 0.04).collect();
        let curve = PckCurve::evaluate(&s, &thresholds, &HandSkeleton::hand()).unwrap();
        for values in curve.values.values() {
            prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for (t, v) in thresholds.iter().zip(&curve.values["all"]) {
            prop_assert_eq!(*v, pck(&s, *t).unwrap());
        }
    }

    #[test]
    fn pck_ignores_rigid_motion(s in samples(), angle in -3.2f64..3.2, tx in -500.0f64..500.0, ty in -500.0f64..500.0, sigma in 0.05f64..1.5) {
        let r = Rotation2::new(angle);
        let t = Vector2::new(tx, ty);
        let moved: Vec<KeypointSample> = s
            .iter()
            .map(|k| KeypointSample { prediction: r * k.prediction + t, truth: r * k.truth + t, ..*k })
            .collect();
        // Skip draws where an error sits on the threshold to rounding precision.
        prop_assume!(s.iter().all(|k| (k.normalized_error() - sigma).abs() > 1e-9));
        prop_assert_eq!(pck(&s, sigma).unwrap(), pck(&moved, sigma).unwrap());
    }

    #[test]
    fn perfect_predictor_scores_one(s in samples(), sigma in 1e-9f64..3.0) {
        let exact: Vec<KeypointSample> = s.iter().map(|k| KeypointSample { prediction: k.truth, ..*k }).collect();
        prop_assert_eq!(pck(&exact, sigma).unwrap(), 1.0);
        for v in pck_by_joint_class(&exact, sigma, &HandSkeleton::hand()).unwrap().values() {
            prop_assert_eq!(*v, 1.0);
        }
    }
}

#[test]
fn detector_round_trip_recovers_its_pck() {
    let model = DetectorModel { sigma_pck: 10.0, rng_seed: 21, ..DetectorModel::with_uniform_pck(0.7) };
    let truth: Vec<Point2D> = (0..KEYPOINT_COUNT).map(|k| Point2D::new(300.0 + 50.0 * k as f64, 200.0 + 30.0 * k as f64)).collect();
    let mut samples = Vec::new();
    for frame in 0..4762u64 {
        for d in model.detect(&truth, frame, 0) {
            samples.push(KeypointSample { keypoint: d.keypoint, prediction: d.location, truth: truth[d.keypoint], scale: 1.0 });
        }
    }
    assert!(samples.len() >= 100_000);
    let p = pck(&samples, 10.0).unwrap();
    assert!((p - 0.7).abs() <= 0.01, "{p}");
    for (class, v) in pck_by_joint_class(&samples, 10.0, &HandSkeleton::hand()).unwrap() {
        let tol = if class == JointClass::Wrist { 0.03 } else { 0.015 };
        assert!((v - 0.7).abs() <= tol, "{class:?} {v}");
    }
}

/// Detector failure rate as a function of the camera azimuth in the hand frame.
fn failure_rate(phi: f64) -> f64 {
    0.1 + 0.5 * (phi.to_radians().cos() + 1.0) / 2.0
}

#[test]
fn heatmap_recovers_an_azimuth_dependent_failure_rate() {
    let cfg = SceneConfig { frames: 120, occluders: Vec::new(), ring: RingConfig { views: 31, ..Default::default() }, ..Default::default() };
    let scene = SyntheticScene::generate(&cfg).unwrap();
    let skeleton = HandSkeleton::hand();
    let mut observations = Vec::new();
    // Per bin: expected failures and detection count, from the generator.
    let mut expected: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    // Per bin: outliers and totals recounted from raw labeled pairs.
    let mut recount: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let probe = view_angle_heatmap(&[], 20.0).unwrap();

    for f in 0..scene.frame_count() {
        let hand = HandFrame::from_keypoints(&scene.keypoints[f]).unwrap();
        let mut dets = Vec::new();
        let mut rates = BTreeMap::new();
        for cam in scene.rig.iter() {
            let (phi, _) = hand.view_angles(&cam.center());
            let rate = failure_rate(phi);
            rates.insert(cam.id(), rate);
            let model = DetectorModel { rng_seed: 5, ..DetectorModel::with_uniform_pck(1.0 - rate) };
            let truth = scene.projections(f, cam).unwrap();
            dets.extend(model.detect_labeled(&truth, None, f as u64, cam.id(), cam.width(), cam.height()).into_iter().map(|d| d.detection));
        }
        let tri = triangulate_frame(f as u64, &dets, &scene.rig, &skeleton, &RansacConfig::default()).unwrap();
        let record = FrameRecord::new(f, dets, tri, 15);
        // The hand frame the evaluation sees comes from the reconstruction.
        let Some(rebuilt) = [0, 9, 5, 17].map(|k| record.position(k)).iter().copied().collect::<Option<Vec<_>>>() else { continue };
        let rebuilt = HandFrame::from_points(rebuilt[0], rebuilt[1], rebuilt[2], rebuilt[3]).unwrap();
        let obs = view_observations(&record, &rebuilt, &scene.rig);

        for d in &record.detections {
            let Some(t) = record.triangulations[d.keypoint].triangulated() else { continue };
            let (phi, theta) = rebuilt.view_angles(&scene.rig.get(d.view).unwrap().center());
            let bin = probe.bin_index(phi, theta);
            // A finger's view is rejected as a whole when any of its four
            // joints fails, so finger detections are outliers more often.
            let r = rates[&d.view];
            let e = expected.entry(bin).or_default();
            e.0 += if d.keypoint == 0 { r } else { 1.0 - (1.0 - r).powi(4) };
            e.1 += 1;
            let r = recount.entry(bin).or_default();
            r.0 += usize::from(!t.inliers.contains(&d.view));
            r.1 += 1;
        }
        observations.extend(obs);
    }

    let map = view_angle_heatmap(&observations, 20.0).unwrap();
    let mut compared = 0;
    for (i, b) in map.bins.iter().enumerate() {
        let (out, total) = recount.get(&i).copied().unwrap_or_default();
        assert_eq!((b.outliers, b.total), (out, total), "bin {i}");
        let Some(fraction) = b.fraction() else { continue };
        let (sum, n) = expected[&i];
        let p = sum / n as f64;
        // Views are correlated within a frame, so allow a wide margin.
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((fraction - p).abs() <= 6.0 * se + 0.03, "bin {i}: {fraction} vs {p} over {n}");
        compared += 1;
    }
    assert!(compared >= 5);
}
