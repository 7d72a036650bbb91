//! RANSAC triangulation of noisy multi-view keypoint detections.
//!
//! A hypothesis is triangulated from a pair of views and scored by how many
//! other views agree with it within `reproj_inlier_sigma` pixels. The best
//! consensus is refined over its inliers, re-scored, and refined again until
//! the inlier set stops changing.
//!
//! Fingers are triangulated as a unit: a view supports a finger hypothesis
//! only if the mean reprojection error over the finger's four joints is
//! within the threshold, so every joint of a finger shares one inlier set.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    refine_triangulation, triangulate_linear, triangulate_pair, CameraView, LmConfig, Observation, Point2D, Point3D,
};
use crate::skeleton::{HandSkeleton, KEYPOINT_COUNT};
use crate::seed::derive_seed;

/// Rounds of refine/re-score before the inlier set is frozen.
const MAX_REFINE_ROUNDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection2D {
    pub view: usize,
    pub keypoint: usize,
    pub location: Point2D,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TriangulationError {
    #[error("detection references unknown view {0}")]
    UnknownView(usize),
    #[error("duplicate detection for view {view}, keypoint {keypoint}")]
    DuplicateDetection { view: usize, keypoint: usize },
    #[error("detections mix keypoints {0} and {1}")]
    MixedKeypoints(usize, usize),
    #[error("keypoint {0} outside the skeleton")]
    KeypointOutOfRange(usize),
    #[error("invalid detection for view {view}, keypoint {keypoint}: {reason}")]
    InvalidDetection { view: usize, keypoint: usize, reason: &'static str },
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate camera id {0}")]
    DuplicateCamera(usize),
}

/// The calibrated cameras of a capture, addressed by camera id.
#[derive(Debug, Clone, Default)]
pub struct CameraRig {
    cameras: Vec<CameraView>,
    by_id: BTreeMap<usize, usize>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraView>) -> Result<Self, TriangulationError> {
        let mut by_id = BTreeMap::new();
        for (i, cam) in cameras.iter().enumerate() {
            if by_id.insert(cam.id(), i).is_some() {
                return Err(TriangulationError::DuplicateCamera(cam.id()));
            }
        }
        Ok(Self { cameras, by_id })
    }

    pub fn get(&self, id: usize) -> Option<&CameraView> {
        self.by_id.get(&id).map(|&i| &self.cameras[i])
    }

    pub fn cameras(&self) -> &[CameraView] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Cameras ordered by id.
    pub fn iter(&self) -> impl Iterator<Item = &CameraView> {
        self.by_id.values().map(|&i| &self.cameras[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// Detections at or below this confidence are ignored.
    pub confidence_threshold: f64,
    /// Reprojection error, in pixels, under which a view counts as an inlier.
    pub reproj_inlier_sigma: f64,
    pub min_inliers: usize,
    /// Upper bound on sampled view pairs; all pairs are tried when there are fewer.
    pub max_ransac_iterations: usize,
    pub rng_seed: u64,
    pub refinement: LmConfig,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.2,
            reproj_inlier_sigma: 4.0,
            min_inliers: 3,
            max_ransac_iterations: 200,
            rng_seed: 0,
            refinement: LmConfig::default(),
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), TriangulationError> {
        let bad = |m: &str| Err(TriangulationError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad("confidence_threshold must lie in [0, 1]");
        }
        if !(self.reproj_inlier_sigma > 0.0) || !self.reproj_inlier_sigma.is_finite() {
            return bad("reproj_inlier_sigma must be positive");
        }
        if self.min_inliers < 2 {
            return bad("min_inliers must be at least 2");
        }
        if self.max_ransac_iterations == 0 {
            return bad("max_ransac_iterations must be positive");
        }
        Ok(())
    }

    fn with_seed(&self, rng_seed: u64) -> Self {
        Self { rng_seed, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulatedKeypoint {
    pub keypoint: usize,
    pub position: Point3D,
    /// Inlier view ids, ascending.
    pub inliers: Vec<usize>,
    /// Reprojection error of this keypoint in each inlier view.
    pub inlier_errors: Vec<f64>,
    pub inlier_confidences: Vec<f64>,
    pub mean_reproj_error: f64,
    /// Squared-error cost of the linear initializer over the refinement set.
    pub linear_cost: f64,
    /// Squared-error cost after refinement over the same set.
    pub refined_cost: f64,
    pub refinement_converged: bool,
}

impl TriangulatedKeypoint {
    pub fn confidence_sum(&self) -> f64 {
        self.inlier_confidences.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeypointOutcome {
    Triangulated(TriangulatedKeypoint),
    /// The best consensus had fewer than `min_inliers` views.
    NoConsensus { best_inliers: usize },
    /// Fewer than two views passed the confidence threshold.
    InsufficientCandidates { candidates: usize },
}

impl KeypointOutcome {
    pub fn triangulated(&self) -> Option<&TriangulatedKeypoint> {
        match self {
            KeypointOutcome::Triangulated(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, KeypointOutcome::Triangulated(_))
    }
}

/// A view's detections for every keypoint of a group.
struct Candidate<'a> {
    view: usize,
    camera: &'a CameraView,
    pixels: Vec<Point2D>,
    confidences: Vec<f64>,
}

impl Candidate<'_> {
    /// Mean reprojection error over the group, infinite when a point is behind the camera.
    fn mean_error(&self, points: &[Point3D]) -> f64 {
        let mut sum = 0.0;
        for (point, pixel) in points.iter().zip(&self.pixels) {
            match self.camera.project(point) {
                Ok(p) => sum += (p - pixel).norm(),
                Err(_) => return f64::INFINITY,
            }
        }
        sum / points.len() as f64
    }

    fn observation(&self, j: usize) -> Observation<'_> {
        Observation::new(self.camera, self.pixels[j])
    }
}

fn check_detection(det: &Detection2D) -> Result<(), TriangulationError> {
    let invalid = |reason| TriangulationError::InvalidDetection { view: det.view, keypoint: det.keypoint, reason };
    if !(0.0..=1.0).contains(&det.confidence) {
        return Err(invalid("confidence outside [0, 1]"));
    }
    if !det.location.x.is_finite() || !det.location.y.is_finite() {
        return Err(invalid("non-finite location"));
    }
    Ok(())
}

/// Detections that pass the confidence gate, ascending by view id.
pub fn candidate_detections(detections: &[Detection2D], confidence_threshold: f64) -> Vec<Detection2D> {
    let mut out: Vec<_> = detections.iter().filter(|d| d.confidence > confidence_threshold).copied().collect();
    out.sort_by_key(|d| d.view);
    out
}

struct Consensus {
    members: Vec<usize>,
    mean_error: f64,
}

impl Consensus {
    /// Larger sets win; then lower mean error; then the lower smallest view id.
    fn beats(&self, other: &Consensus) -> bool {
        if self.members.len() != other.members.len() {
            return self.members.len() > other.members.len();
        }
        if self.mean_error != other.mean_error {
            return self.mean_error < other.mean_error;
        }
        self.members.first() < other.members.first()
    }
}

fn score(candidates: &[Candidate<'_>], points: &[Point3D], sigma: f64) -> (Consensus, Vec<f64>) {
    let errors: Vec<f64> = candidates.iter().map(|c| c.mean_error(points)).collect();
    let members: Vec<usize> = (0..candidates.len()).filter(|&i| errors[i] <= sigma).collect();
    let mean_error = if members.is_empty() {
        f64::INFINITY
    } else {
        members.iter().map(|&i| errors[i]).sum::<f64>() / members.len() as f64
    };
    (Consensus { members, mean_error }, errors)
}

fn pair_from_index(k: usize, n: usize) -> (usize, usize) {
    // Row-major enumeration of i < j.
    let mut i = 0;
    let mut k = k;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

enum GroupOutcome {
    Found { points: Vec<Point3D>, members: Vec<usize>, linear_costs: Vec<f64>, refined_costs: Vec<f64>, converged: Vec<bool> },
    NoConsensus { best_inliers: usize },
    Insufficient { candidates: usize },
}

fn ransac_group(candidates: &[Candidate<'_>], group_size: usize, cfg: &RansacConfig) -> GroupOutcome {
    let n = candidates.len();
    if n < 2 {
        return GroupOutcome::Insufficient { candidates: n };
    }
    let sigma = cfg.reproj_inlier_sigma;
    let total_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total_pairs <= cfg.max_ransac_iterations {
        (0..total_pairs).map(|k| pair_from_index(k, n)).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        index::sample(&mut rng, total_pairs, cfg.max_ransac_iterations)
            .into_iter()
            .map(|k| pair_from_index(k, n))
            .collect()
    };

    let mut best: Option<(Consensus, Vec<Point3D>)> = None;
    let mut hypothesis = Vec::with_capacity(group_size);
    'pairs: for (a, b) in pairs {
        hypothesis.clear();
        for j in 0..group_size {
            match triangulate_pair(&candidates[a].observation(j), &candidates[b].observation(j)) {
                Ok(p) => hypothesis.push(p),
                Err(_) => continue 'pairs,
            }
        }
        // The sample itself has to be consistent with its own hypothesis.
        if candidates[a].mean_error(&hypothesis) > sigma || candidates[b].mean_error(&hypothesis) > sigma {
            continue;
        }
        let (consensus, _) = score(candidates, &hypothesis, sigma);
        if best.as_ref().map_or(true, |(b, _)| consensus.beats(b)) {
            best = Some((consensus, hypothesis.clone()));
        }
    }

    let Some((consensus, seed_points)) = best else {
        return GroupOutcome::NoConsensus { best_inliers: 0 };
    };
    if consensus.members.len() < cfg.min_inliers {
        return GroupOutcome::NoConsensus { best_inliers: consensus.members.len() };
    }

    let mut members = consensus.members;
    let mut points = seed_points;
    let mut linear_costs = vec![0.0; group_size];
    let mut refined_costs = vec![0.0; group_size];
    let mut converged = vec![true; group_size];
    for _ in 0..MAX_REFINE_ROUNDS {
        for j in 0..group_size {
            let obs: Vec<Observation<'_>> = members.iter().map(|&i| candidates[i].observation(j)).collect();
            let start = triangulate_linear(&obs).ok().filter(|p| obs.iter().all(|o| o.camera.depth(p) > 0.0));
            let start = start.unwrap_or(points[j]);
            match refine_triangulation(start, &obs, &cfg.refinement) {
                Ok(r) => {
                    points[j] = r.point;
                    linear_costs[j] = r.initial_cost;
                    refined_costs[j] = r.cost;
                    converged[j] = r.converged;
                }
                Err(_) => return GroupOutcome::NoConsensus { best_inliers: members.len() },
            }
        }
        let (rescored, _) = score(candidates, &points, sigma);
        if rescored.members == members {
            break;
        }
        if rescored.members.len() < cfg.min_inliers {
            return GroupOutcome::NoConsensus { best_inliers: rescored.members.len() };
        }
        members = rescored.members;
    }
    // Only views that agree with the final points are reported.
    members.retain(|&i| candidates[i].mean_error(&points) <= sigma);
    if members.len() < cfg.min_inliers {
        return GroupOutcome::NoConsensus { best_inliers: members.len() };
    }
    GroupOutcome::Found { points, members, linear_costs, refined_costs, converged }
}

fn keypoint_results(
    keypoints: &[usize],
    candidates: &[Candidate<'_>],
    outcome: GroupOutcome,
) -> Vec<KeypointOutcome> {
    match outcome {
        GroupOutcome::Insufficient { candidates } => {
            keypoints.iter().map(|_| KeypointOutcome::InsufficientCandidates { candidates }).collect()
        }
        GroupOutcome::NoConsensus { best_inliers } => {
            keypoints.iter().map(|_| KeypointOutcome::NoConsensus { best_inliers }).collect()
        }
        GroupOutcome::Found { points, members, linear_costs, refined_costs, converged } => keypoints
            .iter()
            .enumerate()
            .map(|(j, &keypoint)| {
                let inlier_errors: Vec<f64> = members
                    .iter()
                    .map(|&i| {
                        let c = &candidates[i];
                        c.camera.project(&points[j]).map(|p| (p - c.pixels[j]).norm()).unwrap_or(f64::INFINITY)
                    })
                    .collect();
                let mean_reproj_error = inlier_errors.iter().sum::<f64>() / inlier_errors.len() as f64;
                KeypointOutcome::Triangulated(TriangulatedKeypoint {
                    keypoint,
                    position: points[j],
                    inliers: members.iter().map(|&i| candidates[i].view).collect(),
                    inlier_confidences: members.iter().map(|&i| candidates[i].confidences[j]).collect(),
                    inlier_errors,
                    mean_reproj_error,
                    linear_cost: linear_costs[j],
                    refined_cost: refined_costs[j],
                    refinement_converged: converged[j],
                })
            })
            .collect(),
    }
}

/// Groups detections by view for the given keypoints, keeping only views
/// where every keypoint of the group passes the confidence gate.
fn build_candidates<'a>(
    detections: &[Detection2D],
    keypoints: &[usize],
    rig: &'a CameraRig,
    cfg: &RansacConfig,
) -> Result<Vec<Candidate<'a>>, TriangulationError> {
    let mut per_view: BTreeMap<usize, Vec<Option<Detection2D>>> = BTreeMap::new();
    for det in detections {
        check_detection(det)?;
        let slot = keypoints.iter().position(|&k| k == det.keypoint).ok_or(TriangulationError::MixedKeypoints(keypoints[0], det.keypoint))?;
        if rig.get(det.view).is_none() {
            return Err(TriangulationError::UnknownView(det.view));
        }
        let entry = per_view.entry(det.view).or_insert_with(|| vec![None; keypoints.len()]);
        if entry[slot].is_some() {
            return Err(TriangulationError::DuplicateDetection { view: det.view, keypoint: det.keypoint });
        }
        entry[slot] = Some(*det);
    }
    Ok(per_view
        .into_iter()
        .filter_map(|(view, dets)| {
            let dets: Vec<Detection2D> = dets.into_iter().collect::<Option<Vec<_>>>()?;
            if dets.iter().any(|d| d.confidence <= cfg.confidence_threshold) {
                return None;
            }
            Some(Candidate {
                view,
                camera: rig.get(view).expect("checked above"),
                pixels: dets.iter().map(|d| d.location).collect(),
                confidences: dets.iter().map(|d| d.confidence).collect(),
            })
        })
        .collect())
}

/// Robustly triangulates one keypoint from its detections across views.
pub fn ransac_triangulate_point(
    detections: &[Detection2D],
    rig: &CameraRig,
    cfg: &RansacConfig,
) -> Result<KeypointOutcome, TriangulationError> {
    cfg.validate()?;
    let Some(first) = detections.first() else {
        return Ok(KeypointOutcome::InsufficientCandidates { candidates: 0 });
    };
    let keypoints = [first.keypoint];
    let candidates = build_candidates(detections, &keypoints, rig, cfg)?;
    let outcome = ransac_group(&candidates, 1, cfg);
    Ok(keypoint_results(&keypoints, &candidates, outcome).remove(0))
}

/// Triangulates the four joints of finger `finger` with a shared inlier set.
///
/// Only views that detect all four joints above the confidence threshold
/// take part.
pub fn ransac_triangulate_finger(
    detections: &[Detection2D],
    rig: &CameraRig,
    skeleton: &HandSkeleton,
    finger: usize,
    cfg: &RansacConfig,
) -> Result<[KeypointOutcome; 4], TriangulationError> {
    cfg.validate()?;
    let keypoints = *skeleton.fingers().get(finger).ok_or(TriangulationError::KeypointOutOfRange(finger))?;
    let candidates = build_candidates(detections, &keypoints, rig, cfg)?;
    let outcome = ransac_group(&candidates, 4, cfg);
    let results = keypoint_results(&keypoints, &candidates, outcome);
    Ok(results.try_into().expect("four joints per finger"))
}

/// Triangulates every keypoint of one frame: the wrist on its own, each
/// finger as a group. RNG seeds are derived from `frame` so results do not
/// depend on processing order.
pub fn triangulate_frame(
    frame: u64,
    detections: &[Detection2D],
    rig: &CameraRig,
    skeleton: &HandSkeleton,
    cfg: &RansacConfig,
) -> Result<Vec<KeypointOutcome>, TriangulationError> {
    cfg.validate()?;
    let mut by_keypoint: Vec<Vec<Detection2D>> = vec![Vec::new(); KEYPOINT_COUNT];
    for det in detections {
        by_keypoint.get_mut(det.keypoint).ok_or(TriangulationError::KeypointOutOfRange(det.keypoint))?.push(*det);
    }
    let mut out = vec![KeypointOutcome::InsufficientCandidates { candidates: 0 }; KEYPOINT_COUNT];

    let wrist = skeleton.wrist();
    let wrist_cfg = cfg.with_seed(derive_seed(cfg.rng_seed, &[frame, 0]));
    out[wrist] = ransac_triangulate_point(&by_keypoint[wrist], rig, &wrist_cfg)?;

    for (f, finger) in skeleton.fingers().iter().enumerate() {
        let dets: Vec<Detection2D> = finger.iter().flat_map(|&k| by_keypoint[k].iter().copied()).collect();
        let finger_cfg = cfg.with_seed(derive_seed(cfg.rng_seed, &[frame, 1 + f as u64]));
        let results = ransac_triangulate_finger(&dets, rig, skeleton, f, &finger_cfg)?;
        for (&k, r) in finger.iter().zip(results) {
            out[k] = r;
        }
    }
    Ok(out)
}
