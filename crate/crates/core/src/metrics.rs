//! Evaluation: PCK curves, per-joint breakdowns, the viewing-angle outlier
//! heatmap and hand crops derived from body keypoints.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point2D, Point3D};
use crate::pipeline::FrameRecord;
use crate::skeleton::{HandSkeleton, JointClass, KEYPOINT_COUNT};
use crate::triangulation::CameraRig;

/// Head-size multiple used as the per-example error scale.
pub const HEAD_SCALE_FACTOR: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    EmptyTestSet,
    #[error("sample {index} has non-positive scale {scale}")]
    InvalidScale { index: usize, scale: f64 },
    #[error("wrist and elbow coincide")]
    DegenerateArm,
    #[error("head length must be positive, got {0}")]
    InvalidHeadLength(f64),
    #[error("bin size {0} must be positive and divide 180")]
    InvalidBinSize(f64),
    #[error("degenerate hand pose: {0}")]
    DegenerateHand(&'static str),
}

/// One predicted keypoint with its ground truth and normalization scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointSample {
    pub keypoint: usize,
    pub prediction: Point2D,
    pub truth: Point2D,
    /// Pixel distance that corresponds to a normalized error of 1.
    pub scale: f64,
}

impl KeypointSample {
    pub fn normalized_error(&self) -> f64 {
        (self.prediction - self.truth).norm() / self.scale
    }
}

pub fn head_scale(head_length: f64) -> f64 {
    HEAD_SCALE_FACTOR * head_length
}

fn check(samples: &[KeypointSample]) -> Result<(), MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| !(s.scale > 0.0 && s.scale.is_finite())) {
        return Err(MetricsError::InvalidScale { index, scale: s.scale });
    }
    Ok(())
}

/// Fraction of samples whose normalized error is strictly below `sigma`.
pub fn pck(samples: &[KeypointSample], sigma: f64) -> Result<f64, MetricsError> {
    check(samples)?;
    Ok(samples.iter().filter(|s| s.normalized_error() < sigma).count() as f64 / samples.len() as f64)
}

/// PCK per joint class; classes without samples are absent.
pub fn pck_by_joint_class(
    samples: &[KeypointSample],
    sigma: f64,
    skeleton: &HandSkeleton,
) -> Result<BTreeMap<JointClass, f64>, MetricsError> {
    check(samples)?;
    let mut groups: BTreeMap<JointClass, Vec<KeypointSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(skeleton.joint_class(s.keypoint)).or_default().push(*s);
    }
    groups.into_iter().map(|(c, g)| Ok((c, pck(&g, sigma)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    /// Keyed by `"all"` and by joint class name.
    pub values: BTreeMap<String, Vec<f64>>,
}

impl PckCurve {
    pub fn evaluate(samples: &[KeypointSample], thresholds: &[f64], skeleton: &HandSkeleton) -> Result<Self, MetricsError> {
        check(samples)?;
        let mut errors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in samples {
            let e = s.normalized_error();
            errors.entry("all".into()).or_default().push(e);
            errors.entry(skeleton.joint_class(s.keypoint).name().into()).or_default().push(e);
        }
        let values = errors
            .into_iter()
            .map(|(k, mut errs)| {
                errs.sort_by(f64::total_cmp);
                let n = errs.len() as f64;
                // Count of errors strictly below each threshold.
                let curve = thresholds.iter().map(|&t| errs.partition_point(|&e| e < t) as f64 / n).collect();
                (k, curve)
            })
            .collect();
        Ok(Self { thresholds: thresholds.to_vec(), values })
    }

    pub const CSV_HEADER: &'static str = "group,threshold,pck";

    pub fn csv_rows(&self) -> Vec<String> {
        self.values
            .iter()
            .flat_map(|(group, vals)| self.thresholds.iter().zip(vals).map(move |(t, v)| format!("{group},{t},{v}")))
            .collect()
    }
}

/// Orthonormal hand frame: origin at the wrist, x toward the middle-finger
/// knuckle, z along the palm normal and y toward the index finger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandFrame {
    pub origin: Point3D,
    /// Columns are the local axes in world coordinates.
    pub axes: Matrix3<f64>,
}

pub const INDEX_MCP: usize = 5;
pub const MIDDLE_MCP: usize = 9;
pub const LITTLE_MCP: usize = 17;

impl HandFrame {
    pub fn from_points(wrist: Point3D, middle_mcp: Point3D, index_mcp: Point3D, little_mcp: Point3D) -> Result<Self, MetricsError> {
        let x = middle_mcp - wrist;
        let normal = (little_mcp - wrist).cross(&(index_mcp - wrist));
        if x.norm() < 1e-12 {
            return Err(MetricsError::DegenerateHand("wrist and middle knuckle coincide"));
        }
        let x = x.normalize();
        let z = normal - x * normal.dot(&x);
        if z.norm() < 1e-12 {
            return Err(MetricsError::DegenerateHand("knuckles are collinear with the wrist"));
        }
        let z = z.normalize();
        let y = z.cross(&x);
        Ok(Self { origin: wrist, axes: Matrix3::from_columns(&[x, y, z]) })
    }

    pub fn from_keypoints(kp: &[Point3D; KEYPOINT_COUNT]) -> Result<Self, MetricsError> {
        Self::from_points(kp[0], kp[MIDDLE_MCP], kp[INDEX_MCP], kp[LITTLE_MCP])
    }

    pub fn to_local(&self, p: &Point3D) -> Vector3<f64> {
        self.axes.transpose() * (p - self.origin)
    }

    /// Azimuth in [−180, 180) and elevation in [−90, 90] of `p`, degrees.
    pub fn view_angles(&self, p: &Point3D) -> (f64, f64) {
        let d = self.to_local(p);
        let mut phi = d.y.atan2(d.x).to_degrees();
        if phi >= 180.0 {
            phi -= 360.0;
        }
        let theta = (d.z / d.norm()).clamp(-1.0, 1.0).asin().to_degrees();
        (phi, theta)
    }
}

/// Detection outcomes of one camera looking at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewObservation {
    pub phi: f64,
    pub theta: f64,
    pub outliers: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAngleBin {
    pub phi_lo: f64,
    pub phi_hi: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub outliers: usize,
    pub total: usize,
}

impl ViewAngleBin {
    /// `None` for an empty bin.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.outliers as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub bin_deg: f64,
    /// Row-major: elevation outer, azimuth inner.
    pub bins: Vec<ViewAngleBin>,
}

impl Heatmap {
    pub const CSV_HEADER: &'static str = "phi_lo,phi_hi,theta_lo,theta_hi,outliers,total,fraction";

    pub fn phi_bins(&self) -> usize {
        (360.0 / self.bin_deg).round() as usize
    }

    pub fn theta_bins(&self) -> usize {
        (180.0 / self.bin_deg).round() as usize
    }

    pub fn bin_index(&self, phi: f64, theta: f64) -> usize {
        let (np, nt) = (self.phi_bins(), self.theta_bins());
        let wrapped = (phi + 180.0).rem_euclid(360.0);
        let i = ((wrapped / self.bin_deg) as usize).min(np - 1);
        let j = (((theta + 90.0) / self.bin_deg).max(0.0) as usize).min(nt - 1);
        j * np + i
    }

    /// Empty bins have an empty `fraction` field.
    pub fn csv_rows(&self) -> Vec<String> {
        self.bins
            .iter()
            .map(|b| {
                let f = b.fraction().map(|f| f.to_string()).unwrap_or_default();
                format!("{},{},{},{},{},{},{f}", b.phi_lo, b.phi_hi, b.theta_lo, b.theta_hi, b.outliers, b.total)
            })
            .collect()
    }
}

/// Labels every detection of a triangulated keypoint as inlier or outlier
/// and groups the counts by view. Views without such detections are skipped.
pub fn view_observations(frame: &FrameRecord, hand: &HandFrame, rig: &CameraRig) -> Vec<ViewObservation> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for d in &frame.detections {
        let Some(t) = frame.triangulations.get(d.keypoint).and_then(|o| o.triangulated()) else { continue };
        let c = counts.entry(d.view).or_default();
        c.1 += 1;
        if !t.inliers.contains(&d.view) {
            c.0 += 1;
        }
    }
    counts
        .into_iter()
        .filter_map(|(view, (outliers, total))| {
            let (phi, theta) = hand.view_angles(&rig.get(view)?.center());
            Some(ViewObservation { phi, theta, outliers, total })
        })
        .collect()
}

pub fn view_angle_heatmap(observations: &[ViewObservation], bin_deg: f64) -> Result<Heatmap, MetricsError> {
    let ratio = 180.0 / bin_deg;
    if !(bin_deg > 0.0 && (ratio - ratio.round()).abs() < 1e-9) {
        return Err(MetricsError::InvalidBinSize(bin_deg));
    }
    let (np, nt) = ((360.0 / bin_deg).round() as usize, ratio.round() as usize);
    let bins = (0..nt)
        .flat_map(|j| {
            (0..np).map(move |i| ViewAngleBin {
                phi_lo: -180.0 + i as f64 * bin_deg,
                phi_hi: -180.0 + (i + 1) as f64 * bin_deg,
                theta_lo: -90.0 + j as f64 * bin_deg,
                theta_hi: -90.0 + (j + 1) as f64 * bin_deg,
                outliers: 0,
                total: 0,
            })
        })
        .collect();
    let mut map = Heatmap { bin_deg, bins };
    for o in observations {
        let k = map.bin_index(o.phi, o.theta);
        map.bins[k].outliers += o.outliers;
        map.bins[k].total += o.total;
    }
    Ok(map)
}

/// Square hand crop in a body image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandCrop {
    pub center: Point2D,
    pub side: f64,
}

/// The hand sits past the wrist along the forearm by 15% of its length;
/// the crop side is 2.2 times the hand size, itself 0.7 head lengths.
pub fn hand_bbox_from_body(wrist: Point2D, elbow: Point2D, head_length: f64) -> Result<HandCrop, MetricsError> {
    if wrist == elbow {
        return Err(MetricsError::DegenerateArm);
    }
    if !(head_length > 0.0 && head_length.is_finite()) {
        return Err(MetricsError::InvalidHeadLength(head_length));
    }
    Ok(HandCrop { center: wrist + (wrist - elbow) * 0.15, side: 2.2 * HEAD_SCALE_FACTOR * head_length })
}
