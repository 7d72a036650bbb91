//! Closed-form false positive analysis for multiview verification and the
//! Monte Carlo simulations that check it.
//!
//! For `V` views, at least `n` inliers, an inlier radius of `σ` pixels on a
//! `w×w` image and a detector with a given PCK:
//!
//! * `q2 = 2σ/w`: two uniform points triangulate consistently.
//! * `p_rest = Pr(B(V−2, πσ²/w²) ≥ n−2)` and `qn = q2·p_rest`.
//! * `ft = 1 − (1 − qn)^C(V,2)`.
//! * `tp_point = Pr(B(V, pck) ≥ n)` and `fp_point = (1 − tp_point)·ft`.
//! * For `P` keypoints, `TP = tp_point^P` and
//!   `FP = Σ_{k≥1} C(P,k) tp_point^{P−k} fp_point^k`.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{ConfidenceRange, DetectorModel};
use crate::geometry::{CameraView, Point2D, Point3D};
use crate::seed::derive_seed;
use crate::triangulation::{ransac_triangulate_point, CameraRig, Detection2D, KeypointOutcome, RansacConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanningError {
    #[error("domain error: {0}")]
    Domain(String),
}

fn domain<T>(msg: impl Into<String>) -> Result<T, PlanningError> {
    Err(PlanningError::Domain(msg.into()))
}

/// `ln C(n, k)`, accumulated as a product of ratios.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `ln Pr(X = l)` for `l` in `range`, with `0 < p < 1`.
fn log_pmf_terms(n: u64, p: f64, range: std::ops::Range<u64>) -> Vec<f64> {
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut ln_c = ln_choose(n, range.start);
    range
        .map(|l| {
            let t = ln_c + l as f64 * lp + (n - l) as f64 * lq;
            ln_c += ((n - l) as f64 / (l + 1) as f64).ln();
            t
        })
        .collect()
}

/// `(Pr(X < k), Pr(X ≥ k))` for `X ~ B(n, p)`. The smaller side is summed
/// directly in log space and the other is its complement, so neither loses
/// precision to cancellation.
pub fn binom_split(n: u64, p: f64, k: u64) -> Result<(f64, f64), PlanningError> {
    if !(0.0..=1.0).contains(&p) {
        return domain(format!("probability {p} outside [0, 1]"));
    }
    if k > n + 1 {
        return domain(format!("k = {k} exceeds n + 1 = {}", n + 1));
    }
    if k == 0 {
        return Ok((0.0, 1.0));
    }
    if k == n + 1 || p == 0.0 {
        return Ok((1.0, 0.0));
    }
    if p == 1.0 {
        return Ok((0.0, 1.0));
    }
    let head = log_sum_exp(&log_pmf_terms(n, p, 0..k)).exp().min(1.0);
    if head < 0.5 {
        return Ok((head, 1.0 - head));
    }
    let tail = log_sum_exp(&log_pmf_terms(n, p, k..n + 1)).exp().min(1.0);
    Ok((1.0 - tail, tail))
}

/// `Pr(X ≥ k)` for `X ~ B(n, p)`.
pub fn binom_tail(n: u64, p: f64, k: u64) -> Result<f64, PlanningError> {
    binom_split(n, p, k).map(|(_, tail)| tail)
}

/// One camera setup and detector to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetupSpec {
    pub views: u64,
    pub min_inliers: u64,
    /// Inlier radius, pixels.
    pub sigma: f64,
    /// Side of the square image, pixels.
    pub image_side: f64,
    pub pck: f64,
    pub keypoints: u64,
}

impl SetupSpec {
    pub fn validate(&self) -> Result<(), PlanningError> {
        if self.views < 2 {
            return domain("at least two views are required");
        }
        if self.min_inliers < 2 || self.min_inliers > self.views {
            return domain(format!("min_inliers must lie in [2, {}], got {}", self.views, self.min_inliers));
        }
        if !(self.sigma >= 0.0 && self.sigma < self.image_side && self.image_side.is_finite()) {
            return domain(format!("need 0 ≤ sigma < width, got sigma {} and width {}", self.sigma, self.image_side));
        }
        if !(0.0..=1.0).contains(&self.pck) {
            return domain(format!("pck {} outside [0, 1]", self.pck));
        }
        if self.keypoints == 0 {
            return domain("at least one keypoint is required");
        }
        Ok(())
    }

    pub fn pairs(&self) -> u64 {
        self.views * (self.views - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningReport {
    pub spec: SetupSpec,
    pub q2: f64,
    pub p_rest: f64,
    pub qn: f64,
    pub ft: f64,
    pub tp_point: f64,
    pub fp_point: f64,
    pub tp_frame: f64,
    pub fp_frame: f64,
    pub fdr: f64,
}

pub fn spurious_pair_prob(spec: &SetupSpec) -> f64 {
    2.0 * spec.sigma / spec.image_side
}

/// Probability that a single uniform point falls within `σ` of a given location.
pub fn support_prob(spec: &SetupSpec) -> f64 {
    (PI * spec.sigma * spec.sigma / (spec.image_side * spec.image_side)).min(1.0)
}

/// `(p_rest, qn)`.
pub fn spurious_support_prob(spec: &SetupSpec) -> Result<(f64, f64), PlanningError> {
    spec.validate()?;
    let p_rest = binom_tail(spec.views - 2, support_prob(spec), spec.min_inliers - 2)?;
    Ok((p_rest, spurious_pair_prob(spec) * p_rest))
}

pub fn false_triangulation_prob(spec: &SetupSpec) -> Result<f64, PlanningError> {
    let (_, qn) = spurious_support_prob(spec)?;
    Ok(-(spec.pairs() as f64 * (-qn).ln_1p()).exp_m1())
}

/// `(tp_point, fp_point)`.
pub fn point_rates(spec: &SetupSpec) -> Result<(f64, f64), PlanningError> {
    let ft = false_triangulation_prob(spec)?;
    let (miss, tp) = binom_split(spec.views, spec.pck, spec.min_inliers)?;
    Ok((tp, miss * ft))
}

/// `Σ_{k=1}^{P} C(P,k) tp^{P−k} fp^k`, term by term in log space.
pub fn frame_false_positive(tp: f64, fp: f64, keypoints: u64) -> f64 {
    if fp <= 0.0 {
        return 0.0;
    }
    let (ltp, lfp) = (tp.ln(), fp.ln());
    (1..=keypoints)
        .map(|k| {
            let tp_part = if keypoints == k { 0.0 } else { (keypoints - k) as f64 * ltp };
            (ln_choose(keypoints, k) + tp_part + k as f64 * lfp).exp()
        })
        .sum()
}

/// `(tp_frame, fp_frame, fdr)`; the FDR is 0 when both rates vanish.
pub fn frame_rates(spec: &SetupSpec) -> Result<(f64, f64, f64), PlanningError> {
    let (tp_point, fp_point) = point_rates(spec)?;
    let tp = tp_point.powi(spec.keypoints as i32);
    let fp = frame_false_positive(tp_point, fp_point, spec.keypoints);
    let fdr = if tp + fp > 0.0 { fp / (tp + fp) } else { 0.0 };
    Ok((tp, fp, fdr))
}

pub fn plan(spec: &SetupSpec) -> Result<PlanningReport, PlanningError> {
    let q2 = spurious_pair_prob(spec);
    let (p_rest, qn) = spurious_support_prob(spec)?;
    let ft = false_triangulation_prob(spec)?;
    let (tp_point, fp_point) = point_rates(spec)?;
    let (tp_frame, fp_frame, fdr) = frame_rates(spec)?;
    Ok(PlanningReport { spec: *spec, q2, p_rest, qn, ft, tp_point, fp_point, tp_frame, fp_frame, fdr })
}

pub fn plan_grid(grid: &[SetupSpec]) -> Result<Vec<PlanningReport>, PlanningError> {
    if grid.is_empty() {
        return domain("empty planning grid");
    }
    grid.iter().map(plan).collect()
}

/// Cartesian product of the given axes, views outermost.
pub fn grid(views: &[u64], inliers: &[u64], sigmas: &[f64], widths: &[f64], pcks: &[f64], keypoints: &[u64]) -> Vec<SetupSpec> {
    let mut out = Vec::new();
    for &v in views {
        for &n in inliers {
            for &sigma in sigmas {
                for &w in widths {
                    for &pck in pcks {
                        for &p in keypoints {
                            out.push(SetupSpec { views: v, min_inliers: n, sigma, image_side: w, pck, keypoints: p });
                        }
                    }
                }
            }
        }
    }
    out
}

/// PCK values 0.00, 0.05, …, 1.00.
pub fn pck_axis() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// The two camera setups compared in the planning figure (5 and 31 views),
/// for `n = 2..=5`, σ = 4, w = 368 and 21 keypoints.
pub fn preset_grid() -> Vec<SetupSpec> {
    grid(&[5, 31], &[2, 3, 4, 5], &[4.0], &[368.0], &pck_axis(), &[21])
}

pub const PLANNING_CSV_HEADER: &str = "V,n,sigma,w,pck,P,q2,qn,ft,tp_point,fp_point,tp,fp,fdr";

impl PlanningReport {
    pub fn csv_row(&self) -> String {
        let s = &self.spec;
        format!(
            "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            s.views, s.min_inliers, s.sigma, s.image_side, s.pck, s.keypoints, self.q2, self.qn, self.ft, self.tp_point, self.fp_point,
            self.tp_frame, self.fp_frame, self.fdr
        )
    }
}

/// A Monte Carlo rate estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub hits: u64,
    pub trials: u64,
}

impl Estimate {
    pub fn rate(&self) -> f64 {
        self.hits as f64 / self.trials.max(1) as f64
    }

    /// Binomial standard error at probability `p`.
    pub fn standard_error(&self, p: f64) -> f64 {
        (p * (1.0 - p) / self.trials.max(1) as f64).sqrt()
    }

    /// `|rate − p| ≤ k·se(p)`.
    pub fn agrees(&self, p: f64, k: f64) -> bool {
        (self.rate() - p).abs() <= k * self.standard_error(p).max(1.0 / self.trials.max(1) as f64)
    }

    /// `rate ≤ p + k·se(p)`, for formulas that bound the true rate from above.
    pub fn within_bound(&self, p: f64, k: f64) -> bool {
        self.rate() <= p + k * self.standard_error(p).max(1.0 / self.trials.max(1) as f64)
    }
}

const CHUNK: u64 = 1000;

/// Runs `trials` independent Bernoulli trials in parallel chunks, each with
/// its own seed, and counts successes.
fn count_hits<F>(trials: u64, seed: u64, trial: F) -> Estimate
where
    F: Fn(&mut ChaCha8Rng, u64) -> bool + Sync,
{
    let chunks = trials.div_ceil(CHUNK);
    let hits = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c]));
            let end = ((c + 1) * CHUNK).min(trials);
            (c * CHUNK..end).filter(|&i| trial(&mut rng, i)).count() as u64
        })
        .sum();
    Estimate { hits, trials }
}

/// Two uniform points on a rectified stereo pair, accepted when some 3D point
/// in front of both cameras projects within `σ` of each. Projections of a
/// single point share a row and have positive disparity `x1 − x2`.
pub fn mc_spurious_pair(sigma: f64, width: f64, trials: u64, seed: u64) -> Estimate {
    count_hits(trials, seed, |rng, _| {
        let (x1, y1) = (rng.gen_range(0.0..width), rng.gen_range(0.0..width));
        let (x2, y2) = (rng.gen_range(0.0..width), rng.gen_range(0.0..width));
        let dy = (y1 - y2).abs();
        if dy > 2.0 * sigma {
            return false;
        }
        let slack = (sigma * sigma - dy * dy / 4.0).max(0.0).sqrt();
        x1 - x2 + 2.0 * slack > 0.0
    })
}

/// A ring of `views` cameras with square `width`-pixel images, looking at the
/// origin from 2 m with a field of view of about 53°.
pub fn planning_rig(views: usize, width: u32) -> CameraRig {
    let cams = (0..views)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / views as f64;
            let el: f64 = [-0.25, 0.0, 0.25][i % 3];
            let eye = Point3D::new(200.0 * el.cos() * az.cos(), 200.0 * el.cos() * az.sin(), 200.0 * el.sin());
            CameraView::look_at(i, eye, Point3D::origin(), Vector3::z(), width as f64, width, width)
        })
        .collect::<Result<Vec<_>, _>>()
        .expect("ring cameras are valid");
    CameraRig::new(cams).expect("ring ids are unique")
}

fn planning_ransac(spec: &SetupSpec, seed: u64) -> RansacConfig {
    RansacConfig {
        confidence_threshold: 0.0,
        reproj_inlier_sigma: spec.sigma,
        min_inliers: spec.min_inliers as usize,
        // Enough iterations to try every view pair.
        max_ransac_iterations: spec.pairs() as usize,
        rng_seed: seed,
        ..Default::default()
    }
}

/// Uniform random detections in every view of a calibrated ring; a hit is
/// any consensus with at least `n` inliers.
pub fn mc_false_triangulation(spec: &SetupSpec, trials: u64, seed: u64) -> Result<Estimate, PlanningError> {
    spec.validate()?;
    let w = spec.image_side as u32;
    let rig = planning_rig(spec.views as usize, w);
    Ok(count_hits(trials, seed, |rng, i| {
        let dets: Vec<Detection2D> = (0..spec.views as usize)
            .map(|view| Detection2D {
                view,
                keypoint: 0,
                location: Point2D::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..w as f64)),
                confidence: 1.0,
            })
            .collect();
        let cfg = planning_ransac(spec, derive_seed(seed, &[u64::MAX, i]));
        matches!(ransac_triangulate_point(&dets, &rig, &cfg), Ok(KeypointOutcome::Triangulated(_)))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRateEstimate {
    /// Consensus holding at least `n` correct detections.
    pub true_positive: Estimate,
    /// Consensus whose point does not reproject within `σ` of the truth in
    /// every inlier view.
    pub false_positive: Estimate,
    /// Consensus on the true point that needed a wrong detection landing
    /// near the truth to reach `n` inliers. Neither of the above.
    pub lucky: Estimate,
}

/// Closed loop: the synthetic detector looks at a single point at the ring
/// center in every view, then RANSAC runs on its output.
pub fn mc_point_rates(spec: &SetupSpec, trials: u64, seed: u64) -> Result<PointRateEstimate, PlanningError> {
    spec.validate()?;
    let w = spec.image_side as u32;
    let rig = planning_rig(spec.views as usize, w);
    let truth: Vec<Vec<Point2D>> = rig.iter().map(|c| vec![c.project(&Point3D::origin()).expect("center is in front")]).collect();
    let n = spec.min_inliers as usize;
    let classes: Vec<u8> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let end = ((c + 1) * CHUNK).min(trials);
            let (rig, truth) = (&rig, &truth);
            (c * CHUNK..end).map(move |i| {
                let detector = DetectorModel {
                    pck: vec![spec.pck],
                    // Keeps correct detections well inside σ of the truth.
                    correct_noise_sigma: spec.sigma / 8.0,
                    sigma_pck: spec.sigma,
                    confidence_correct: ConfidenceRange::new(1.0, 1.0),
                    confidence_wrong: ConfidenceRange::new(1.0, 1.0),
                    image_width: w,
                    image_height: w,
                    rng_seed: derive_seed(seed, &[i]),
                    ..Default::default()
                };
                let labeled: Vec<_> = rig.iter().zip(truth).map(|(cam, t)| detector.detect_labeled(t, None, 0, cam.id(), w, w)[0]).collect();
                let dets: Vec<Detection2D> = labeled.iter().map(|d| d.detection).collect();
                let cfg = planning_ransac(spec, derive_seed(seed, &[u64::MAX, i]));
                match ransac_triangulate_point(&dets, rig, &cfg) {
                    Ok(KeypointOutcome::Triangulated(t)) => {
                        let correct = t.inliers.iter().filter(|&&v| labeled[v].correct).count();
                        let on_target = t.inliers.iter().all(|&v| {
                            let cam = rig.get(v).expect("inlier views come from the rig");
                            cam.project(&t.position).is_ok_and(|p| (p - truth[v][0]).norm() <= spec.sigma)
                        });
                        match (correct >= n, on_target) {
                            (true, _) => 1,
                            (false, false) => 2,
                            (false, true) => 3,
                        }
                    }
                    _ => 0,
                }
            })
        })
        .collect();
    let count = |class: u8| Estimate { hits: classes.iter().filter(|&&c| c == class).count() as u64, trials };
    Ok(PointRateEstimate { true_positive: count(1), false_positive: count(2), lucky: count(3) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(v: u64, n: u64, pck: f64) -> SetupSpec {
        SetupSpec { views: v, min_inliers: n, sigma: 4.0, image_side: 368.0, pck, keypoints: 1 }
    }

    #[test]
    fn binomial_tail_examples() {
        assert_eq!(binom_tail(10, 0.5, 0).unwrap(), 1.0);
        assert!((binom_tail(4, 0.5, 2).unwrap() - 11.0 / 16.0).abs() < 1e-15);
        assert_eq!(binom_tail(31, 1.0, 31).unwrap(), 1.0);
        assert_eq!(binom_tail(31, 0.3, 32).unwrap(), 0.0);
        assert!(binom_tail(5, 1.5, 2).is_err());
        assert!(binom_tail(5, 0.5, 7).is_err());
    }

    #[test]
    fn binomial_tail_matches_direct_enumeration() {
        for n in 0..=12u64 {
            for &p in &[0.05f64, 0.3, 0.5, 0.77, 0.99] {
                for k in 0..=n + 1 {
                    let mut direct = 0.0;
                    for mask in 0u32..(1 << n) {
                        let ones = mask.count_ones() as u64;
                        if ones >= k {
                            direct += p.powi(ones as i32) * (1.0 - p).powi((n - ones) as i32);
                        }
                    }
                    assert!((binom_tail(n, p, k).unwrap() - direct).abs() < 1e-12, "n={n} p={p} k={k}");
                }
            }
        }
    }

    #[test]
    fn tail_survives_extreme_parameters() {
        let t = binom_tail(2000, 1e-3, 40).unwrap();
        assert!(t > 0.0 && t < 1e-10);
        assert!((binom_tail(2000, 0.999, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spurious_pair_value() {
        assert!((spurious_pair_prob(&spec(5, 3, 0.5)) - 8.0 / 368.0).abs() < 1e-15);
        let zero = SetupSpec { sigma: 0.0, ..spec(5, 3, 0.5) };
        assert_eq!(spurious_pair_prob(&zero), 0.0);
        assert_eq!(spurious_support_prob(&zero).unwrap().1, 0.0);
    }

    #[test]
    fn support_with_two_inliers_is_free() {
        let s = spec(31, 2, 0.5);
        let (p_rest, qn) = spurious_support_prob(&s).unwrap();
        assert_eq!(p_rest, 1.0);
        assert_eq!(qn, spurious_pair_prob(&s));
    }

    #[test]
    fn two_views_two_inliers_reduce_to_q2() {
        let s = spec(2, 2, 0.5);
        assert!((false_triangulation_prob(&s).unwrap() - spurious_pair_prob(&s)).abs() < 1e-15);
    }

    #[test]
    fn five_views_tp_point() {
        let (tp, _) = point_rates(&spec(5, 3, 0.6)).unwrap();
        assert!((tp - 0.68256).abs() < 1e-12);
        let (tp, fp) = point_rates(&spec(5, 3, 1.0)).unwrap();
        assert_eq!((tp, fp), (1.0, 0.0));
    }

    #[test]
    fn single_keypoint_frame_rates_equal_point_rates() {
        let s = spec(5, 3, 0.6);
        let (tp, fp) = point_rates(&s).unwrap();
        let (tpf, fpf, fdr) = frame_rates(&s).unwrap();
        assert!((tp - tpf).abs() < 1e-15 && (fp - fpf).abs() < 1e-15);
        assert!((fdr - fp / (tp + fp)).abs() < 1e-15);
    }

    #[test]
    fn frame_false_positive_binomial_identity() {
        let (tp, fp): (f64, f64) = (0.99, 1e-4);
        assert!((tp.powi(21) - 0.8097278682212584).abs() < 1e-12);
        let direct = frame_false_positive(tp, fp, 21);
        assert!((direct - ((tp + fp).powi(21) - tp.powi(21))).abs() < 1e-12);
        assert_eq!(frame_false_positive(0.7, 0.0, 21), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1, 2, 0.5).validate().is_err());
        assert!(spec(5, 6, 0.5).validate().is_err());
        assert!(SetupSpec { sigma: 400.0, ..spec(5, 3, 0.5) }.validate().is_err());
        assert!(SetupSpec { keypoints: 0, ..spec(5, 3, 0.5) }.validate().is_err());
        assert!(plan_grid(&[]).is_err());
    }

    /// Exact acceptance probability of the rectified pair test, integrating
    /// over the row difference with Simpson's rule.
    fn rectified_acceptance(sigma: f64, w: f64) -> f64 {
        let f = |dy: f64| {
            let density = 2.0 / w * (1.0 - dy / w);
            let a = 2.0 * (sigma * sigma - dy * dy / 4.0).max(0.0).sqrt();
            density * (1.0 - (w - a).powi(2) / (2.0 * w * w))
        };
        let (n, h) = (2000, 2.0 * sigma / 2000.0);
        let inner: f64 = (1..n).map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h)).sum();
        h / 3.0 * (f(0.0) + inner + f(2.0 * sigma))
    }

    #[test]
    fn rectified_pair_simulation_matches_exact_region() {
        let exact = rectified_acceptance(4.0, 368.0);
        let est = mc_spurious_pair(4.0, 368.0, 1_000_000, 11);
        assert!(est.agrees(exact, 3.0), "{} vs {exact}", est.rate());
        // The linear approximation drops the disparity slack and sits a few percent low.
        let q2 = 8.0 / 368.0;
        assert!(q2 < exact && (exact - q2) / exact < 0.03, "{q2} vs {exact}");
    }
}
