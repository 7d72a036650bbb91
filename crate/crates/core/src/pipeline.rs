//! Frame mining and the bootstrapping loop: detect in every view,
//! triangulate, score, filter, keep the best frame per window and reproject
//! the accepted 3D keypoints as new training labels.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{trainer_update, DetectorError, DetectorModel, DetectorQualityState, QualityRule};
use crate::geometry::{GeometryError, Point2D, Point3D};
use crate::occlusion::{keypoint_visible, ray_blocked, Capsule};
use crate::scene::SyntheticScene;
use crate::seed::derive_seed;
use crate::skeleton::{BoneClass, HandSkeleton, KEYPOINT_COUNT};
use crate::triangulation::{triangulate_frame, CameraRig, Detection2D, KeypointOutcome, RansacConfig, TriangulationError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Triangulation(#[from] TriangulationError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Maximum bone length per bone class, centimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoneLimits {
    pub metacarpal: f64,
    pub proximal: f64,
    pub other: f64,
}

impl Default for BoneLimits {
    fn default() -> Self {
        Self { metacarpal: 15.0, proximal: 9.0, other: 5.0 }
    }
}

impl BoneLimits {
    pub fn max_for(&self, class: BoneClass) -> f64 {
        match class {
            BoneClass::Metacarpal => self.metacarpal,
            BoneClass::Proximal => self.proximal,
            BoneClass::Other => self.other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_avg_inliers: f64,
    /// Pixels.
    pub max_avg_reproj_error: f64,
    /// Floor on the mean confidence of inlier detections.
    pub min_avg_confidence: f64,
    /// Largest allowed deviation of a keypoint's displacement from the
    /// frame's median displacement, world units per frame.
    pub velocity_outlier_threshold: f64,
    pub bone_length_max: BoneLimits,
    pub occluders: Vec<Capsule>,
    pub window_size: usize,
    pub n_best: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_avg_inliers: 5.0,
            max_avg_reproj_error: 5.0,
            min_avg_confidence: 0.5,
            velocity_outlier_threshold: 3.0,
            bone_length_max: BoneLimits::default(),
            occluders: Vec::new(),
            window_size: 15,
            n_best: 100,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("min_avg_inliers", self.min_avg_inliers),
            ("max_avg_reproj_error", self.max_avg_reproj_error),
            ("min_avg_confidence", self.min_avg_confidence),
            ("velocity_outlier_threshold", self.velocity_outlier_threshold),
            ("bone_length_max.metacarpal", self.bone_length_max.metacarpal),
            ("bone_length_max.proximal", self.bone_length_max.proximal),
            ("bone_length_max.other", self.bone_length_max.other),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(PipelineError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.window_size == 0 {
            return Err(PipelineError::InvalidConfig("window_size must be at least 1".into()));
        }
        for (i, c) in self.occluders.iter().enumerate() {
            if !(c.radius.is_finite() && c.radius > 0.0) {
                return Err(PipelineError::InvalidConfig(format!("occluder {i} has radius {}", c.radius)));
            }
        }
        Ok(())
    }
}

/// The automatic rejection heuristics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    InlierCount,
    Confidence,
    Velocity,
    BoneLength,
    Occlusion,
    ReprojectionError,
}

impl Heuristic {
    pub const ALL: [Heuristic; 6] = [
        Heuristic::InlierCount,
        Heuristic::Confidence,
        Heuristic::Velocity,
        Heuristic::BoneLength,
        Heuristic::Occlusion,
        Heuristic::ReprojectionError,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdicts {
    pub inlier_count: bool,
    pub confidence: bool,
    pub velocity: bool,
    pub bone_length: bool,
    pub occlusion: bool,
    pub reprojection_error: bool,
}

impl FilterVerdicts {
    pub fn get(&self, h: Heuristic) -> bool {
        match h {
            Heuristic::InlierCount => self.inlier_count,
            Heuristic::Confidence => self.confidence,
            Heuristic::Velocity => self.velocity,
            Heuristic::BoneLength => self.bone_length,
            Heuristic::Occlusion => self.occlusion,
            Heuristic::ReprojectionError => self.reprojection_error,
        }
    }

    pub fn passed(&self) -> bool {
        Heuristic::ALL.iter().all(|&h| self.get(h))
    }

    pub fn failed(&self) -> Vec<Heuristic> {
        Heuristic::ALL.iter().copied().filter(|&h| !self.get(h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub detections: Vec<Detection2D>,
    pub triangulations: Vec<KeypointOutcome>,
    pub score: f64,
    pub window: usize,
    pub verdicts: Option<FilterVerdicts>,
}

impl FrameRecord {
    /// Builds a record and fills in its score; verdicts are left unset.
    pub fn new(frame: usize, detections: Vec<Detection2D>, triangulations: Vec<KeypointOutcome>, window_size: usize) -> Self {
        let mut record = Self { frame, detections, triangulations, score: 0.0, window: frame / window_size.max(1), verdicts: None };
        record.score = score_frame(&record);
        record
    }

    pub fn position(&self, keypoint: usize) -> Option<Point3D> {
        self.triangulations.get(keypoint)?.triangulated().map(|t| t.position)
    }

    pub fn valid_count(&self) -> usize {
        self.triangulations.iter().filter(|t| t.is_valid()).count()
    }

    pub fn passed(&self) -> bool {
        self.verdicts.is_some_and(|v| v.passed())
    }
}

/// Sum of inlier detection confidences over every triangulated keypoint.
pub fn score_frame(frame: &FrameRecord) -> f64 {
    frame.triangulations.iter().filter_map(KeypointOutcome::triangulated).map(|t| t.confidence_sum()).sum()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn velocity_ok(frame: &FrameRecord, prev: &FrameRecord, threshold: f64) -> bool {
    let gap = frame.frame.abs_diff(prev.frame).max(1) as f64;
    let displacements: Vec<Vector3<f64>> = (0..frame.triangulations.len())
        .filter_map(|k| Some((frame.position(k)? - prev.position(k)?) / gap))
        .collect();
    if displacements.is_empty() {
        return true;
    }
    let med = Vector3::<f64>::from_fn(|i, _| median(&mut displacements.iter().map(|d| d[i]).collect::<Vec<_>>()));
    displacements.iter().all(|d| (d - med).norm() <= threshold)
}

/// Evaluates every heuristic on one frame. The velocity check passes when
/// `prev` is absent. A frame without any triangulated keypoint fails the
/// inlier, confidence and reprojection checks.
pub fn apply_filters(
    frame: &FrameRecord,
    prev: Option<&FrameRecord>,
    cfg: &FilterConfig,
    rig: &CameraRig,
    skeleton: &HandSkeleton,
) -> FilterVerdicts {
    let valid: Vec<_> = frame.triangulations.iter().filter_map(KeypointOutcome::triangulated).collect();
    let inlier_total: usize = valid.iter().map(|t| t.inliers.len()).sum();
    let confidence_total: f64 = valid.iter().map(|t| t.confidence_sum()).sum();

    let inlier_count = !valid.is_empty() && inlier_total as f64 / valid.len() as f64 >= cfg.min_avg_inliers;
    let confidence = inlier_total > 0 && confidence_total / inlier_total as f64 >= cfg.min_avg_confidence;
    let reprojection_error = !valid.is_empty()
        && valid.iter().map(|t| t.mean_reproj_error).sum::<f64>() / valid.len() as f64 <= cfg.max_avg_reproj_error;

    let velocity = prev.map_or(true, |p| velocity_ok(frame, p, cfg.velocity_outlier_threshold));

    let bone_length = skeleton.bones().iter().all(|b| match (frame.position(b.parent), frame.position(b.child)) {
        (Some(a), Some(c)) => (a - c).norm() <= cfg.bone_length_max.max_for(b.class),
        _ => true,
    });

    let occlusion = valid.iter().all(|t| {
        t.inliers.iter().all(|&v| rig.get(v).map_or(true, |cam| !ray_blocked(cam, &t.position, &cfg.occluders)))
    });

    FilterVerdicts { inlier_count, confidence, velocity, bone_length, occlusion, reprojection_error }
}

/// Fills `verdicts` on every record, using the record of the previous frame
/// index (when present) for the velocity check.
pub fn filter_all(frames: &mut [FrameRecord], cfg: &FilterConfig, rig: &CameraRig, skeleton: &HandSkeleton) {
    let by_frame: HashMap<usize, usize> = frames.iter().enumerate().map(|(i, r)| (r.frame, i)).collect();
    let verdicts: Vec<FilterVerdicts> = frames
        .iter()
        .map(|r| {
            let prev = r.frame.checked_sub(1).and_then(|p| by_frame.get(&p)).map(|&i| &frames[i]);
            apply_filters(r, prev, cfg, rig, skeleton)
        })
        .collect();
    for (r, v) in frames.iter_mut().zip(verdicts) {
        r.verdicts = Some(v);
    }
}

fn better(a: &FrameRecord, b: &FrameRecord) -> bool {
    a.score > b.score || (a.score == b.score && a.frame < b.frame)
}

/// Best passing frame of each window, sorted by descending score with ties
/// going to the lower frame index. Returns frame indices.
pub fn select_best_per_window(frames: &[FrameRecord]) -> Vec<usize> {
    let mut best: HashMap<usize, &FrameRecord> = HashMap::new();
    for r in frames.iter().filter(|r| r.passed()) {
        best.entry(r.window).and_modify(|b| if better(r, b) { *b = r }).or_insert(r);
    }
    let mut chosen: Vec<&FrameRecord> = best.into_values().collect();
    chosen.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.frame.cmp(&b.frame)));
    chosen.into_iter().map(|r| r.frame).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrainingExample {
    pub frame: usize,
    pub view: usize,
    pub labels: Vec<Option<[f64; 2]>>,
    #[serde(rename = "weights")]
    pub label_weights: Vec<u8>,
}

/// One example per selected frame and per view that sees the hand.
///
/// A view sees the hand when at least one triangulated keypoint projects
/// inside its image without an occluder in the way. Within such a view every
/// triangulated keypoint that projects inside the image gets a label.
pub fn emit_labels(frames: &[FrameRecord], selected: &[usize], rig: &CameraRig, occluders: &[Capsule]) -> Vec<LabeledTrainingExample> {
    let by_frame: HashMap<usize, &FrameRecord> = frames.iter().map(|r| (r.frame, r)).collect();
    let mut out = Vec::new();
    for &f in selected {
        let Some(record) = by_frame.get(&f) else { continue };
        let points: Vec<Option<Point3D>> = (0..KEYPOINT_COUNT).map(|k| record.position(k)).collect();
        for cam in rig.iter() {
            let sees_hand = points.iter().flatten().any(|x| keypoint_visible(cam, x, occluders));
            if !sees_hand {
                continue;
            }
            let labels: Vec<Option<[f64; 2]>> = points
                .iter()
                .map(|x| {
                    let px: Point2D = cam.project(x.as_ref()?).ok()?;
                    cam.contains(&px).then_some([px.x, px.y])
                })
                .collect();
            let label_weights = labels.iter().map(|l| u8::from(l.is_some())).collect();
            out.push(LabeledTrainingExample { frame: f, view: cam.id(), labels, label_weights });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub pck_before: f64,
    pub frames_selected: usize,
    pub labels_emitted: usize,
    pub pck_after: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub ransac: RansacConfig,
    pub filters: FilterConfig,
    /// Template for the synthetic detector; its `pck` is replaced by the
    /// current quality state every iteration.
    pub detector: DetectorModel,
}

#[derive(Debug, Clone)]
pub struct BootstrapRun {
    pub reports: Vec<IterationReport>,
    pub labels: Vec<Vec<LabeledTrainingExample>>,
    pub final_state: DetectorQualityState,
}

/// Runs the synthetic detector in every view of one frame. Keypoints hidden
/// from a view are always detected wrongly.
pub fn detect_frame(scene: &SyntheticScene, detector: &DetectorModel, frame: usize) -> Vec<Detection2D> {
    let mut out = Vec::with_capacity(scene.rig.len() * KEYPOINT_COUNT);
    for cam in scene.rig.iter() {
        let Some(truth) = scene.projections(frame, cam) else { continue };
        let visible = scene.visibility(frame, cam);
        out.extend(
            detector
                .detect_labeled(&truth, Some(&visible), frame as u64, cam.id(), cam.width(), cam.height())
                .into_iter()
                .map(|d| d.detection),
        );
    }
    out
}

/// Detects, triangulates, scores and filters every frame of `scene`.
pub fn process_scene(
    scene: &SyntheticScene,
    detector: &DetectorModel,
    ransac: &RansacConfig,
    filters: &FilterConfig,
) -> Result<Vec<FrameRecord>, PipelineError> {
    let skeleton = HandSkeleton::hand();
    let mut records = (0..scene.frame_count())
        .into_par_iter()
        .map(|f| {
            let detections = detect_frame(scene, detector, f);
            let triangulations = triangulate_frame(f as u64, &detections, &scene.rig, &skeleton, ransac)?;
            Ok(FrameRecord::new(f, detections, triangulations, filters.window_size))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    filter_all(&mut records, filters, &scene.rig, &skeleton);
    Ok(records)
}

pub fn run_bootstrap(
    cfg: &BootstrapConfig,
    initial: &DetectorQualityState,
    scene: &SyntheticScene,
    rule: &(dyn QualityRule + Sync),
) -> Result<BootstrapRun, PipelineError> {
    if cfg.iterations == 0 {
        return Err(PipelineError::InvalidConfig("at least one iteration is required".into()));
    }
    if initial.pck_per_keypoint.len() != KEYPOINT_COUNT {
        return Err(PipelineError::InvalidConfig(format!(
            "quality state has {} keypoints, expected {KEYPOINT_COUNT}",
            initial.pck_per_keypoint.len()
        )));
    }
    cfg.filters.validate()?;
    cfg.ransac.validate()?;

    let mut state = initial.clone();
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut labels = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let detector = DetectorModel {
            pck: state.pck_per_keypoint.clone(),
            rng_seed: derive_seed(cfg.detector.rng_seed, &[iteration as u64]),
            ..cfg.detector.clone()
        };
        detector.validate()?;
        let records = process_scene(scene, &detector, &cfg.ransac, &cfg.filters)?;
        let mut selected = select_best_per_window(&records);
        selected.truncate(cfg.filters.n_best);
        let examples = emit_labels(&records, &selected, &scene.rig, &cfg.filters.occluders);
        let next = trainer_update(&state, examples.len(), rule);
        reports.push(IterationReport {
            iteration,
            pck_before: state.mean_pck(),
            frames_selected: selected.len(),
            labels_emitted: examples.len(),
            pck_after: next.mean_pck(),
        });
        labels.push(examples);
        state = next;
    }
    Ok(BootstrapRun { reports, labels, final_state: state })
}
