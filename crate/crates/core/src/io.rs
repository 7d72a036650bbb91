//! File formats: camera calibration JSON, detection CSV, triangulation and
//! label JSON lines, and the bootstrapping report CSV.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraView, Point2D, Point3D};
use crate::pipeline::{FrameRecord, IterationReport, LabeledTrainingExample};
use crate::skeleton::KEYPOINT_COUNT;
use crate::triangulation::{CameraRig, Detection2D, KeypointOutcome, TriangulatedKeypoint};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{source_name}:{line}: {message}")]
    Parse { source_name: String, line: u64, message: String },
    #[error("{source_name}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Invariant { source_name: String, line: Option<u64>, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IoError {
    fn parse(source_name: &str, line: u64, message: impl ToString) -> Self {
        IoError::Parse { source_name: source_name.to_string(), line, message: message.to_string() }
    }

    fn invariant(source_name: &str, line: Option<u64>, message: impl ToString) -> Self {
        IoError::Invariant { source_name: source_name.to_string(), line, message: message.to_string() }
    }
}

impl From<csv::Error> for IoError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(e) => IoError::Io(e),
            other => IoError::parse("csv", 0, format!("{other:?}")),
        }
    }
}

/// One camera as stored on disk. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: usize,
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl From<&CameraView> for CameraRecord {
    fn from(c: &CameraView) -> Self {
        let row_major = |m: &Matrix3<f64>| std::array::from_fn(|i| m[(i / 3, i % 3)]);
        Self {
            id: c.id(),
            k: row_major(c.intrinsics()),
            r: row_major(c.rotation()),
            t: (*c.translation()).into(),
            width: c.width(),
            height: c.height(),
        }
    }
}

/// Reads a JSON array of cameras. Malformed JSON is a parse error; cameras
/// that fail validation, such as a non-orthonormal rotation, are invariant
/// violations.
pub fn read_calibration<R: Read>(reader: R, source_name: &str) -> Result<CameraRig, IoError> {
    let records: Vec<CameraRecord> =
        serde_json::from_reader(reader).map_err(|e| IoError::parse(source_name, e.line() as u64, e))?;
    let cameras = records
        .iter()
        .map(|r| {
            CameraView::new(r.id, Matrix3::from_row_slice(&r.k), Matrix3::from_row_slice(&r.r), Vector3::from(r.t), r.width, r.height)
                .map_err(|e| IoError::invariant(source_name, None, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    CameraRig::new(cameras).map_err(|e| IoError::invariant(source_name, None, e))
}

pub fn write_calibration<W: Write>(rig: &CameraRig, mut writer: W) -> Result<(), IoError> {
    let records: Vec<CameraRecord> = rig.iter().map(CameraRecord::from).collect();
    serde_json::to_writer_pretty(&mut writer, &records).map_err(std::io::Error::from)?;
    writeln!(writer)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DetectionRow {
    frame: usize,
    view: usize,
    keypoint: usize,
    x: f64,
    y: f64,
    confidence: f64,
}

pub const DETECTIONS_CSV_HEADER: &str = "frame,view,keypoint,x,y,confidence";

/// Reads detections grouped by frame. Every frame index that appears gets an
/// entry. Rows must name a known view and a keypoint in range, carry a
/// confidence in [0, 1] and not repeat a (frame, view, keypoint) triple.
pub fn read_detections<R: Read>(
    reader: R,
    rig: &CameraRig,
    source_name: &str,
) -> Result<BTreeMap<usize, Vec<Detection2D>>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| IoError::parse(source_name, 1, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != DETECTIONS_CSV_HEADER.split(',').collect::<Vec<_>>() {
        return Err(IoError::parse(source_name, 1, format!("expected header `{DETECTIONS_CSV_HEADER}`")));
    }
    let mut frames: BTreeMap<usize, Vec<Detection2D>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for result in rdr.records() {
        let record = result.map_err(|e| IoError::parse(source_name, e.position().map_or(0, |p| p.line()), format!("malformed row: {e}")))?;
        let line_no = record.position().map_or(0, |p| p.line());
        let row: DetectionRow =
            record.deserialize(Some(&headers)).map_err(|e| IoError::parse(source_name, line_no, format!("malformed row: {e}")))?;
        let line = Some(line_no);
        if !(row.x.is_finite() && row.y.is_finite()) {
            return Err(IoError::invariant(source_name, line, "non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&row.confidence) {
            return Err(IoError::invariant(source_name, line, format!("confidence {} outside [0, 1]", row.confidence)));
        }
        if row.keypoint >= KEYPOINT_COUNT {
            return Err(IoError::invariant(source_name, line, format!("keypoint {} out of range", row.keypoint)));
        }
        if rig.get(row.view).is_none() {
            return Err(IoError::invariant(source_name, line, format!("unknown view {}", row.view)));
        }
        if !seen.insert((row.frame, row.view, row.keypoint)) {
            return Err(IoError::invariant(
                source_name,
                line,
                format!("duplicate detection for frame {}, view {}, keypoint {}", row.frame, row.view, row.keypoint),
            ));
        }
        frames.entry(row.frame).or_default().push(Detection2D {
            view: row.view,
            keypoint: row.keypoint,
            location: Point2D::new(row.x, row.y),
            confidence: row.confidence,
        });
    }
    Ok(frames)
}

pub fn write_detections<W: Write>(frames: &BTreeMap<usize, Vec<Detection2D>>, writer: W) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(DETECTIONS_CSV_HEADER.split(','))?;
    for (&frame, dets) in frames {
        for d in dets {
            w.serialize(DetectionRow {
                frame,
                view: d.view,
                keypoint: d.keypoint,
                x: d.location.x,
                y: d.location.y,
                confidence: d.confidence,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const POINTS_CSV_HEADER: &str = "frame,view,keypoint,x,y";

/// 2D keypoints keyed by `(frame, view, keypoint)`.
pub type PointTable = BTreeMap<(usize, usize, usize), Point2D>;

/// Reads `frame,view,keypoint,x,y` rows. Further columns, such as the
/// confidence of a detections file, are ignored.
pub fn read_points<R: Read>(reader: R, source_name: &str) -> Result<PointTable, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| IoError::parse(source_name, 1, e))?.clone();
    let expected: Vec<&str> = POINTS_CSV_HEADER.split(',').collect();
    if headers.iter().take(5).collect::<Vec<_>>() != expected {
        return Err(IoError::parse(source_name, 1, format!("header must start with `{POINTS_CSV_HEADER}`")));
    }
    let mut out = PointTable::new();
    for result in rdr.records() {
        let record = result.map_err(|e| IoError::parse(source_name, e.position().map_or(0, |p| p.line()), e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).ok_or_else(|| IoError::parse(source_name, line, format!("missing column {}", expected[i])));
        let index = |i: usize| -> Result<usize, IoError> {
            field(i)?.parse().map_err(|_| IoError::parse(source_name, line, format!("bad {} `{}`", expected[i], record.get(i).unwrap_or(""))))
        };
        let coord = |i: usize| -> Result<f64, IoError> {
            field(i)?.parse().map_err(|_| IoError::parse(source_name, line, format!("bad {} `{}`", expected[i], record.get(i).unwrap_or(""))))
        };
        let key = (index(0)?, index(1)?, index(2)?);
        if out.insert(key, Point2D::new(coord(3)?, coord(4)?)).is_some() {
            return Err(IoError::invariant(source_name, Some(line), format!("duplicate entry for {key:?}")));
        }
    }
    Ok(out)
}

pub fn write_points<W: Write>(points: &PointTable, writer: W) -> Result<(), IoError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(POINTS_CSV_HEADER.split(','))?;
    for (&(f, v, k), p) in points {
        w.write_record([f.to_string(), v.to_string(), k.to_string(), p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-keypoint result as written to the triangulation JSON lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case", deny_unknown_fields)]
pub enum KeypointRecord {
    Triangulated {
        keypoint: usize,
        position: [f64; 3],
        inliers: Vec<usize>,
        inlier_errors: Vec<f64>,
        inlier_confidences: Vec<f64>,
        mean_reproj_error: f64,
        linear_cost: f64,
        refined_cost: f64,
        refinement_converged: bool,
    },
    NoConsensus {
        keypoint: usize,
        best_inliers: usize,
    },
    InsufficientCandidates {
        keypoint: usize,
        candidates: usize,
    },
}

impl KeypointRecord {
    pub fn from_outcome(keypoint: usize, outcome: &KeypointOutcome) -> Self {
        match outcome {
            KeypointOutcome::Triangulated(t) => KeypointRecord::Triangulated {
                keypoint,
                position: t.position.coords.into(),
                inliers: t.inliers.clone(),
                inlier_errors: t.inlier_errors.clone(),
                inlier_confidences: t.inlier_confidences.clone(),
                mean_reproj_error: t.mean_reproj_error,
                linear_cost: t.linear_cost,
                refined_cost: t.refined_cost,
                refinement_converged: t.refinement_converged,
            },
            KeypointOutcome::NoConsensus { best_inliers } => KeypointRecord::NoConsensus { keypoint, best_inliers: *best_inliers },
            KeypointOutcome::InsufficientCandidates { candidates } => {
                KeypointRecord::InsufficientCandidates { keypoint, candidates: *candidates }
            }
        }
    }

    pub fn keypoint(&self) -> usize {
        match self {
            KeypointRecord::Triangulated { keypoint, .. }
            | KeypointRecord::NoConsensus { keypoint, .. }
            | KeypointRecord::InsufficientCandidates { keypoint, .. } => *keypoint,
        }
    }

    pub fn into_outcome(self) -> KeypointOutcome {
        match self {
            KeypointRecord::Triangulated {
                keypoint,
                position,
                inliers,
                inlier_errors,
                inlier_confidences,
                mean_reproj_error,
                linear_cost,
                refined_cost,
                refinement_converged,
            } => KeypointOutcome::Triangulated(TriangulatedKeypoint {
                keypoint,
                position: Point3D::from(position),
                inliers,
                inlier_errors,
                inlier_confidences,
                mean_reproj_error,
                linear_cost,
                refined_cost,
                refinement_converged,
            }),
            KeypointRecord::NoConsensus { best_inliers, .. } => KeypointOutcome::NoConsensus { best_inliers },
            KeypointRecord::InsufficientCandidates { candidates, .. } => KeypointOutcome::InsufficientCandidates { candidates },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameTriangulation {
    pub frame: usize,
    pub score: f64,
    pub keypoints: Vec<KeypointRecord>,
}

impl From<&FrameRecord> for FrameTriangulation {
    fn from(r: &FrameRecord) -> Self {
        Self {
            frame: r.frame,
            score: r.score,
            keypoints: r.triangulations.iter().enumerate().map(|(k, o)| KeypointRecord::from_outcome(k, o)).collect(),
        }
    }
}

/// Writes one JSON object per item and line.
pub fn write_jsonl<W: Write, T: Serialize>(items: impl IntoIterator<Item = T>, mut writer: W) -> Result<(), IoError> {
    for item in items {
        serde_json::to_writer(&mut writer, &item).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads JSON lines, skipping blank ones; errors carry the line number.
pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R, source_name: &str) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::parse(source_name, i as u64 + 1, e))?);
    }
    Ok(out)
}

/// Rebuilds frame records from triangulation JSON lines. Detections are not
/// stored, so the records carry none.
pub fn read_triangulations<R: BufRead>(reader: R, window_size: usize, source_name: &str) -> Result<Vec<FrameRecord>, IoError> {
    let frames: Vec<FrameTriangulation> = read_jsonl(reader, source_name)?;
    frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let line = Some(i as u64 + 1);
            if f.keypoints.len() != KEYPOINT_COUNT {
                return Err(IoError::invariant(source_name, line, format!("expected {KEYPOINT_COUNT} keypoints, got {}", f.keypoints.len())));
            }
            if let Some(k) = f.keypoints.iter().enumerate().find(|(i, k)| k.keypoint() != *i) {
                return Err(IoError::invariant(source_name, line, format!("keypoint {} out of order", k.1.keypoint())));
            }
            let outcomes = f.keypoints.into_iter().map(KeypointRecord::into_outcome).collect();
            let record = FrameRecord::new(f.frame, Vec::new(), outcomes, window_size);
            if (record.score - f.score).abs() > 1e-9 * f.score.abs().max(1.0) {
                return Err(IoError::invariant(source_name, line, format!("stored score {} disagrees with inliers ({})", f.score, record.score)));
            }
            Ok(record)
        })
        .collect()
}

pub fn write_report<W: Write>(rows: &[IterationReport], writer: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["iteration", "pck_before", "frames_selected", "labels_emitted", "pck_after"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report<R: Read>(reader: R) -> Result<Vec<IterationReport>, IoError> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<Result<Vec<_>, _>>()?)
}

pub fn read_labels<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<LabeledTrainingExample>, IoError> {
    read_jsonl(reader, source_name)
}
