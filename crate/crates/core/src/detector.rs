//! Synthetic keypoint detector and the abstract trainer that stands in for
//! network retraining.
//!
//! With probability `pck[k]` a keypoint is detected correctly: ground truth
//! plus Gaussian jitter, with a confidence drawn from `confidence_correct`.
//! Otherwise the detection is a uniform point on the image with a confidence
//! drawn from `confidence_wrong`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2D;
use crate::seed::derive_seed;
use crate::skeleton::{HandSkeleton, KEYPOINT_COUNT};
use crate::triangulation::Detection2D;

/// Share of correct detections that must land within `sigma_pck`.
pub const CORRECT_COVERAGE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DetectorError {
    #[error("invalid detector model: {0}")]
    InvalidModel(String),
}

/// Uniform distribution over a sub-interval of [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceRange {
    pub low: f64,
    pub high: f64,
}

impl ConfidenceRange {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.high > self.low {
            rng.gen_range(self.low..self.high)
        } else {
            self.low
        }
    }
}

/// How failures of different joints relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Every keypoint fails independently.
    #[default]
    Independent,
    /// Once a finger joint fails, every joint further along that finger fails too.
    FingerChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorModel {
    /// Probability of a correct detection, per keypoint.
    pub pck: Vec<f64>,
    /// Radius, in pixels, within which a detection counts as correct.
    pub sigma_pck: f64,
    /// Standard deviation of the per-axis jitter on correct detections.
    pub correct_noise_sigma: f64,
    pub confidence_correct: ConfidenceRange,
    pub confidence_wrong: ConfidenceRange,
    pub image_width: u32,
    pub image_height: u32,
    pub failure_mode: FailureMode,
    pub rng_seed: u64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            pck: vec![0.6; KEYPOINT_COUNT],
            sigma_pck: 4.0,
            correct_noise_sigma: 1.0,
            confidence_correct: ConfidenceRange::new(0.5, 1.0),
            confidence_wrong: ConfidenceRange::new(0.0, 0.6),
            image_width: 1920,
            image_height: 1080,
            failure_mode: FailureMode::Independent,
            rng_seed: 0,
        }
    }
}

/// A simulated detection together with whether the simulator drew it as correct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledDetection {
    pub detection: Detection2D,
    pub correct: bool,
}

impl DetectorModel {
    pub fn with_uniform_pck(pck: f64) -> Self {
        Self { pck: vec![pck; KEYPOINT_COUNT], ..Default::default() }
    }

    /// Largest jitter for which a 2D Gaussian keeps [`CORRECT_COVERAGE`] of
    /// its mass inside `sigma_pck`.
    pub fn max_noise_sigma(sigma_pck: f64) -> f64 {
        sigma_pck / (-2.0 * (1.0 - CORRECT_COVERAGE).ln()).sqrt()
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidModel(m));
        if let Some(p) = self.pck.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("pck {p} outside [0, 1]"));
        }
        if !(self.sigma_pck > 0.0) {
            return bad("sigma_pck must be positive".into());
        }
        if !(self.correct_noise_sigma >= 0.0) || self.correct_noise_sigma > Self::max_noise_sigma(self.sigma_pck) + 1e-12 {
            return bad(format!(
                "correct_noise_sigma must lie in [0, {:.4}] so that 99% of correct detections fall within sigma_pck",
                Self::max_noise_sigma(self.sigma_pck)
            ));
        }
        for (name, r) in [("confidence_correct", self.confidence_correct), ("confidence_wrong", self.confidence_wrong)] {
            if !(0.0 <= r.low && r.low <= r.high && r.high <= 1.0) {
                return bad(format!("{name} must satisfy 0 <= low <= high <= 1"));
            }
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        Ok(())
    }

    /// Detections for one view of one frame. Equivalent to
    /// [`detect_labeled`](Self::detect_labeled) with every keypoint visible
    /// on the model's image size.
    pub fn detect(&self, truth: &[Point2D], frame: u64, view: usize) -> Vec<Detection2D> {
        self.detect_labeled(truth, None, frame, view, self.image_width, self.image_height)
            .into_iter()
            .map(|d| d.detection)
            .collect()
    }

    /// Detections with ground-truth correctness flags.
    ///
    /// Keypoints marked invisible always fail. The result is a pure function
    /// of `(rng_seed, frame, view, keypoint)` and the inputs.
    pub fn detect_labeled(
        &self,
        truth: &[Point2D],
        visible: Option<&[bool]>,
        frame: u64,
        view: usize,
        width: u32,
        height: u32,
    ) -> Vec<LabeledDetection> {
        let skeleton = HandSkeleton::hand();
        let jitter = Normal::new(0.0, self.correct_noise_sigma).expect("validated noise sigma");
        let mut succeeded = vec![false; truth.len()];
        let mut rngs: Vec<ChaCha8Rng> = (0..truth.len())
            .map(|k| ChaCha8Rng::seed_from_u64(derive_seed(self.rng_seed, &[frame, view as u64, k as u64])))
            .collect();
        for (k, rng) in rngs.iter_mut().enumerate() {
            let pck = self.pck.get(k).copied().unwrap_or(0.0);
            let is_visible = visible.map_or(true, |v| v[k]);
            // Always consume the draw so visibility does not shift the stream.
            let draw: f64 = rng.gen();
            succeeded[k] = is_visible && draw < pck;
        }
        if self.failure_mode == FailureMode::FingerChain && truth.len() == KEYPOINT_COUNT {
            for finger in skeleton.fingers() {
                if let Some(first_failure) = finger.iter().position(|&k| !succeeded[k]) {
                    for &k in &finger[first_failure..] {
                        succeeded[k] = false;
                    }
                }
            }
        }
        truth
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let rng = &mut rngs[k];
                let (location, confidence) = if succeeded[k] {
                    let p = Point2D::new(t.x + jitter.sample(rng), t.y + jitter.sample(rng));
                    (p, self.confidence_correct.sample(rng))
                } else {
                    let p = Point2D::new(rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
                    (p, self.confidence_wrong.sample(rng))
                };
                LabeledDetection { detection: Detection2D { view, keypoint: k, location, confidence }, correct: succeeded[k] }
            })
            .collect()
    }
}

/// Abstract detector quality between bootstrapping iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorQualityState {
    pub pck_per_keypoint: Vec<f64>,
    pub training_set_size: usize,
}

impl DetectorQualityState {
    pub fn uniform(pck: f64) -> Self {
        Self { pck_per_keypoint: vec![pck; KEYPOINT_COUNT], training_set_size: 0 }
    }

    pub fn mean_pck(&self) -> f64 {
        self.pck_per_keypoint.iter().sum::<f64>() / self.pck_per_keypoint.len().max(1) as f64
    }
}

/// Maps a keypoint's PCK and a count of new training labels to its new PCK.
///
/// Implementations must be nondecreasing in `new_labels`, stay in [0, 1],
/// and leave the PCK unchanged when `new_labels` is zero.
pub trait QualityRule {
    fn updated_pck(&self, pck: f64, new_labels: usize) -> f64;
}

/// `pck' = 1 − (1 − pck)·exp(−new_labels / κ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaturatingRule {
    pub kappa: f64,
}

impl Default for SaturatingRule {
    fn default() -> Self {
        Self { kappa: 1000.0 }
    }
}

impl QualityRule for SaturatingRule {
    fn updated_pck(&self, pck: f64, new_labels: usize) -> f64 {
        1.0 - (1.0 - pck) * (-(new_labels as f64) / self.kappa).exp()
    }
}

pub fn trainer_update(state: &DetectorQualityState, new_labels: usize, rule: &dyn QualityRule) -> DetectorQualityState {
    DetectorQualityState {
        pck_per_keypoint: state.pck_per_keypoint.iter().map(|&p| rule.updated_pck(p, new_labels).clamp(0.0, 1.0)).collect(),
        training_set_size: state.training_set_size + new_labels,
    }
}
