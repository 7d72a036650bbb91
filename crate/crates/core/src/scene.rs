//! Synthetic capture scenes: a ring of calibrated cameras, a moving
//! articulated hand, and capsule occluders.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraView, GeometryError, Point2D, Point3D};
use crate::occlusion::{keypoint_visible, Capsule};
use crate::skeleton::KEYPOINT_COUNT;
use crate::triangulation::CameraRig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingConfig {
    pub views: usize,
    /// Distance from each camera to the ring center, world units.
    pub radius: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    /// Camera elevations in degrees, assigned cyclically around the ring.
    pub elevations_deg: Vec<f64>,
    pub target: [f64; 3],
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            views: 31,
            radius: 200.0,
            focal: 1400.0,
            width: 1920,
            height: 1080,
            elevations_deg: vec![-15.0, 10.0, 30.0],
            target: [0.0, 0.0, 0.0],
        }
    }
}

/// Cameras evenly spaced in azimuth, all looking at `target`, z up.
pub fn camera_ring(cfg: &RingConfig) -> Result<CameraRig, GeometryError> {
    let target = Point3D::from(cfg.target);
    let elevations = if cfg.elevations_deg.is_empty() { vec![0.0] } else { cfg.elevations_deg.clone() };
    let cameras = (0..cfg.views)
        .map(|i| {
            let az = TAU * i as f64 / cfg.views as f64;
            let el = elevations[i % elevations.len()].to_radians();
            let eye = target + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * cfg.radius;
            CameraView::look_at(i, eye, target, Vector3::z(), cfg.focal, cfg.width, cfg.height)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CameraRig::new(cameras).expect("ring ids are unique"))
}

/// Rigid placement and finger curl of the hand model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandPose {
    pub wrist: Point3D,
    /// Hand-local to world rotation. Local x points from the wrist to the
    /// fingers, local z is the palm normal, local y points to the thumb side.
    pub orientation: Rotation3<f64>,
    /// Flexion of every finger joint, radians.
    pub curl: f64,
}

/// Knuckle positions in the hand frame, thumb first, centimeters.
const KNUCKLES: [[f64; 3]; 5] = [[2.6, 2.8, -0.5], [9.0, 2.4, 0.0], [9.3, 0.3, 0.0], [8.8, -1.7, 0.0], [8.0, -3.6, 0.0]];
/// Lengths of the three segments beyond each knuckle.
const SEGMENTS: [[f64; 3]; 5] = [[3.6, 3.1, 2.6], [4.0, 2.4, 2.0], [4.5, 2.8, 2.1], [4.2, 2.6, 2.0], [3.4, 2.0, 1.8]];

impl HandPose {
    pub fn keypoints(&self) -> [Point3D; KEYPOINT_COUNT] {
        let mut local = [Point3D::origin(); KEYPOINT_COUNT];
        for f in 0..5 {
            let knuckle = Point3D::from(KNUCKLES[f]);
            let mut direction = if f == 0 { Vector3::new(0.6, 0.8, 0.1).normalize() } else { knuckle.coords.normalize() };
            let hinge = Unit::new_normalize(direction.cross(&Vector3::z()));
            let bend = Rotation3::from_axis_angle(&hinge, if f == 0 { 0.5 * self.curl } else { self.curl });
            let mut joint = knuckle;
            local[1 + 4 * f] = joint;
            for (s, &len) in SEGMENTS[f].iter().enumerate() {
                direction = bend * direction;
                joint += direction * len;
                local[2 + 4 * f + s] = joint;
            }
        }
        local.map(|p| self.wrist + self.orientation * p.coords)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub frames: usize,
    pub ring: RingConfig,
    pub occluders: Vec<Capsule>,
    /// Mean wrist position.
    pub hand_center: [f64; 3],
    /// Peak wrist displacement along each world axis.
    pub motion_amplitude: f64,
    /// Frames per cycle of the wrist trajectory.
    pub motion_period: f64,
    /// Peak yaw about the world z axis, degrees.
    pub yaw_amplitude_deg: f64,
    pub max_curl: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 900,
            ring: RingConfig::default(),
            occluders: default_occluders(),
            hand_center: [0.0, 0.0, -5.0],
            motion_amplitude: 4.0,
            motion_period: 150.0,
            yaw_amplitude_deg: 15.0,
            max_curl: 0.6,
        }
    }
}

/// The hand's owner stands behind it (−x) and a second person faces them
/// across the capture volume (+x). Together they hide the hand from
/// roughly half of a surrounding camera ring.
pub fn default_occluders() -> Vec<Capsule> {
    vec![
        Capsule::new(Point3D::new(-34.5, 0.0, -90.0), Point3D::new(-34.5, 0.0, 50.0), 30.0),
        Capsule::new(Point3D::new(46.0, 0.0, -90.0), Point3D::new(46.0, 0.0, 50.0), 32.0),
    ]
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub rig: CameraRig,
    pub occluders: Vec<Capsule>,
    pub poses: Vec<HandPose>,
    pub keypoints: Vec<[Point3D; KEYPOINT_COUNT]>,
}

impl SyntheticScene {
    pub fn generate(cfg: &SceneConfig) -> Result<Self, GeometryError> {
        let rig = camera_ring(&cfg.ring)?;
        let center = Point3D::from(cfg.hand_center);
        // Fingers point up (+z), palm faces +x.
        let base = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            Vector3::z(),
            -Vector3::y(),
            Vector3::x(),
        ]));
        let poses: Vec<HandPose> = (0..cfg.frames)
            .map(|f| {
                let phase = TAU * f as f64 / cfg.motion_period;
                let wrist = center
                    + Vector3::new(0.2 * phase.sin(), (0.7 * phase).sin(), (1.3 * phase).cos()) * cfg.motion_amplitude;
                let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), cfg.yaw_amplitude_deg.to_radians() * (0.6 * phase).sin());
                let curl = 0.5 * cfg.max_curl * (1.0 - (0.8 * phase + PI / 3.0).cos());
                HandPose { wrist, orientation: yaw * base, curl }
            })
            .collect();
        let keypoints = poses.iter().map(HandPose::keypoints).collect();
        Ok(Self { rig, occluders: cfg.occluders.clone(), poses, keypoints })
    }

    pub fn frame_count(&self) -> usize {
        self.keypoints.len()
    }

    /// Per-keypoint visibility of `frame` in `camera`.
    pub fn visibility(&self, frame: usize, camera: &CameraView) -> Vec<bool> {
        self.keypoints[frame].iter().map(|x| keypoint_visible(camera, x, &self.occluders)).collect()
    }

    /// Ground-truth 2D keypoints; `None` when a point is behind the camera.
    pub fn projections(&self, frame: usize, camera: &CameraView) -> Option<Vec<Point2D>> {
        self.keypoints[frame].iter().map(|x| camera.project(x).ok()).collect()
    }
}
