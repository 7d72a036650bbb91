//! Pinhole cameras, projection, linear triangulation and reprojection-error
//! refinement.
//!
//! World units are centimeters throughout the crate; pixels are image units.
//! There is no lens distortion model.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Matrix4, OMatrix, Point2, Point3, Vector3, U4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point2D = Point2<f64>;
pub type Point3D = Point3<f64>;

/// Tolerance used when validating a user-supplied rotation matrix.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth {depth} in camera {camera}")]
    NonPositiveDepth { camera: usize, depth: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: usize, reason: String },
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// A calibrated pinhole camera mapping world points to pixels through `K [R | t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    id: usize,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: u32,
    height: u32,
    projection: Matrix3x4<f64>,
    center: Point3D,
}

impl CameraView {
    /// Builds a camera after validating its parameters.
    ///
    /// `rotation` must be orthonormal with determinant +1 to within
    /// [`ROTATION_TOLERANCE`]; it is re-orthonormalized before being stored so
    /// that `RᵀR = I` holds to machine precision afterwards.
    pub fn new(
        id: usize,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let invalid = |reason: String| GeometryError::InvalidCamera { id, reason };
        if intrinsics.iter().chain(rotation.iter()).chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite parameter".into()));
        }
        if intrinsics[(1, 0)] != 0.0 || intrinsics[(2, 0)] != 0.0 || intrinsics[(2, 1)] != 0.0 {
            return Err(invalid("intrinsics must be upper-triangular".into()));
        }
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 || intrinsics[(2, 2)] <= 0.0 {
            return Err(invalid("intrinsics must have positive diagonal".into()));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be positive".into()));
        }
        let gram_error = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if gram_error > ROTATION_TOLERANCE {
            return Err(invalid(format!("rotation is not orthonormal (|RᵀR - I| = {gram_error:.3e})")));
        }
        if rotation.determinant() < 0.0 {
            return Err(invalid("rotation has negative determinant".into()));
        }
        let svd = rotation.svd(true, true);
        let rotation = svd.u.unwrap() * svd.v_t.unwrap();

        let mut extrinsics = Matrix3x4::zeros();
        extrinsics.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        extrinsics.set_column(3, &translation);
        let projection = intrinsics * extrinsics;
        let center = Point3D::from(-(rotation.transpose() * translation));

        Ok(Self { id, intrinsics, rotation, translation, width, height, projection, center })
    }

    /// Camera at `eye` looking at `target`, square pixels, principal point at
    /// the image center. `up` only needs to be non-parallel to the view direction.
    pub fn look_at(
        id: usize,
        eye: Point3D,
        target: Point3D,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).try_normalize(1e-12).ok_or(GeometryError::DegenerateGeometry("eye equals target"))?;
        // Image y grows downward, so the camera y axis points along -up.
        let right = forward.cross(&up).try_normalize(1e-12).ok_or(GeometryError::DegenerateGeometry("up parallel to view"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        let intrinsics = Matrix3::new(
            focal, 0.0, width as f64 / 2.0,
            0.0, focal, height as f64 / 2.0,
            0.0, 0.0, 1.0,
        );
        Self::new(id, intrinsics, rotation, translation, width, height)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// The full `K [R | t]` matrix.
    pub fn projection_matrix(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3D {
        self.center
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, point: &Point3D) -> f64 {
        self.rotation.row(2).transpose().dot(&point.coords) + self.translation.z
    }

    pub fn project(&self, point: &Point3D) -> Result<Point2D, GeometryError> {
        let h = self.projection * point.to_homogeneous();
        if !(h.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth { camera: self.id, depth: self.depth(point) });
        }
        Ok(Point2D::new(h.x / h.z, h.y / h.z))
    }

    /// Projection together with its derivative with respect to the world point.
    pub fn project_with_jacobian(&self, point: &Point3D) -> Result<(Point2D, Matrix2x3<f64>), GeometryError> {
        let h = self.projection * point.to_homogeneous();
        if !(h.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth { camera: self.id, depth: self.depth(point) });
        }
        let m = self.projection.fixed_view::<3, 3>(0, 0);
        let inv_z = 1.0 / h.z;
        let u = h.x * inv_z;
        let v = h.y * inv_z;
        let mut jac = Matrix2x3::zeros();
        for c in 0..3 {
            jac[(0, c)] = (m[(0, c)] - u * m[(2, c)]) * inv_z;
            jac[(1, c)] = (m[(1, c)] - v * m[(2, c)]) * inv_z;
        }
        Ok((Point2D::new(u, v), jac))
    }

    pub fn contains(&self, pixel: &Point2D) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    /// Maps a pixel to normalized image coordinates, `K⁻¹ x`.
    pub fn normalize(&self, pixel: &Point2D) -> Point2D {
        let k = &self.intrinsics;
        let w = k[(2, 2)];
        let y = (pixel.y * w - k[(1, 2)]) / k[(1, 1)];
        let x = (pixel.x * w - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
        Point2D::new(x, y)
    }
}

/// Euclidean pixel distance between the projection of `point` and `pixel`.
pub fn reprojection_error(camera: &CameraView, point: &Point3D, pixel: &Point2D) -> Result<f64, GeometryError> {
    Ok((camera.project(point)? - pixel).norm())
}

/// One 2D measurement of a world point.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub camera: &'a CameraView,
    pub pixel: Point2D,
}

impl<'a> Observation<'a> {
    pub fn new(camera: &'a CameraView, pixel: Point2D) -> Self {
        Self { camera, pixel }
    }
}

/// The two DLT rows contributed by one observation, in normalized coordinates
/// and with the homogeneous coordinate rescaled by `scale`.
fn dlt_rows(obs: &Observation<'_>, scale: f64) -> [[f64; 4]; 2] {
    let n = obs.camera.normalize(&obs.pixel);
    let r = obs.camera.rotation();
    let t = obs.camera.translation();
    let mut rows = [[0.0; 4]; 2];
    for (row, (coord, axis)) in rows.iter_mut().zip([(n.x, 0), (n.y, 1)]) {
        for c in 0..3 {
            row[c] = coord * r[(2, c)] - r[(axis, c)];
        }
        row[3] = (coord * t.z - t[axis]) / scale;
    }
    rows
}

/// Homogeneous DLT triangulation from two or more observations.
pub fn triangulate_linear(observations: &[Observation<'_>]) -> Result<Point3D, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::TooFewObservations { needed: 2, got: observations.len() });
    }
    if observations.iter().any(|o| !o.pixel.x.is_finite() || !o.pixel.y.is_finite()) {
        return Err(GeometryError::NonFinite("observation"));
    }
    // Balance the homogeneous column against the rotation columns.
    let scale = observations.iter().map(|o| o.camera.translation().norm()).sum::<f64>() / observations.len() as f64;
    let scale = scale.max(1.0);

    let (singular_values, v_t) = if observations.len() == 2 {
        let mut a = Matrix4::zeros();
        for (i, obs) in observations.iter().enumerate() {
            for (j, row) in dlt_rows(obs, scale).iter().enumerate() {
                for c in 0..4 {
                    a[(2 * i + j, c)] = row[c];
                }
            }
        }
        let svd = a.svd(false, true);
        (svd.singular_values.as_slice().to_vec(), svd.v_t.unwrap())
    } else {
        let mut a = OMatrix::<f64, nalgebra::Dyn, U4>::zeros(2 * observations.len());
        for (i, obs) in observations.iter().enumerate() {
            for (j, row) in dlt_rows(obs, scale).iter().enumerate() {
                for c in 0..4 {
                    a[(2 * i + j, c)] = row[c];
                }
            }
        }
        let svd = a.svd(false, true);
        let v_t = svd.v_t.unwrap();
        (svd.singular_values.as_slice().to_vec(), Matrix4::from_fn(|r, c| v_t[(r, c)]))
    };

    // nalgebra does not sort singular values for every shape.
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| singular_values[b].total_cmp(&singular_values[a]));
    let largest = singular_values[order[0]];
    let smallest = order[3];
    let second_smallest = singular_values[order[2]];
    if !(largest > 0.0) || second_smallest <= largest * 1e-10 {
        return Err(GeometryError::DegenerateGeometry("rank-deficient triangulation system"));
    }
    let h = v_t.row(smallest);
    let w = h[3] / scale;
    let norm = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    if w.abs() <= norm * 1e-12 {
        return Err(GeometryError::DegenerateGeometry("point at infinity"));
    }
    let point = Point3D::new(h[0] / w, h[1] / w, h[2] / w);
    if point.coords.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::DegenerateGeometry("non-finite triangulation"));
    }
    Ok(point)
}

/// Linear triangulation of a pair of views by inhomogeneous least squares.
///
/// Cheaper than [`triangulate_linear`]; used to generate RANSAC hypotheses.
pub fn triangulate_pair(first: &Observation<'_>, second: &Observation<'_>) -> Result<Point3D, GeometryError> {
    let mut normal = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for obs in [first, second] {
        for row in dlt_rows(obs, 1.0) {
            let a = Vector3::new(row[0], row[1], row[2]);
            normal += a * a.transpose();
            rhs -= a * row[3];
        }
    }
    let det = normal.determinant();
    if !(det.abs() > 1e-14 * normal.norm_squared().powf(1.5)) {
        return Err(GeometryError::DegenerateGeometry("rank-deficient pair system"));
    }
    let inverse = normal.try_inverse().ok_or(GeometryError::DegenerateGeometry("singular pair system"))?;
    let point = Point3D::from(inverse * rhs);
    if point.coords.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::DegenerateGeometry("non-finite triangulation"));
    }
    Ok(point)
}

/// Levenberg-Marquardt schedule for [`refine_triangulation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub initial_damping: f64,
    /// Multiplier applied to the damping on a rejected step, divisor on an accepted one.
    pub damping_factor: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { initial_damping: 1e-3, damping_factor: 10.0, max_iterations: 50, relative_tolerance: 1e-10 }
    }
}

/// Outcome of a nonlinear refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub point: Point3D,
    /// Per-observation reprojection error in pixels, in input order.
    pub residuals: Vec<f64>,
    /// Sum of squared residuals at `point`.
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    /// False when the iteration budget ran out before the tolerance was met;
    /// `point` is still the best iterate found.
    pub converged: bool,
}

fn total_cost(point: &Point3D, observations: &[Observation<'_>]) -> Option<f64> {
    let mut cost = 0.0;
    for obs in observations {
        let p = obs.camera.project(point).ok()?;
        cost += (p - obs.pixel).norm_squared();
    }
    Some(cost)
}

/// Minimizes the summed squared reprojection error of a single 3D point.
pub fn refine_triangulation(
    initial: Point3D,
    observations: &[Observation<'_>],
    config: &LmConfig,
) -> Result<Refinement, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::TooFewObservations { needed: 2, got: observations.len() });
    }
    if initial.coords.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite("initial point"));
    }
    for obs in observations {
        obs.camera.project(&initial)?;
    }
    let initial_cost = total_cost(&initial, observations).expect("depths checked above");

    let mut point = initial;
    let mut cost = initial_cost;
    let mut damping = config.initial_damping;
    let mut converged = cost == 0.0;
    let mut iterations = 0;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for obs in observations {
            let (proj, jac) = obs.camera.project_with_jacobian(&point)?;
            let r = proj - obs.pixel;
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * r;
        }
        let mut improved = false;
        while damping < 1e12 {
            let mut lhs = jtj;
            for i in 0..3 {
                lhs[(i, i)] += damping * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = lhs.cholesky().map(|c| c.solve(&(-jtr))) else {
                damping *= config.damping_factor;
                continue;
            };
            let candidate = point + step;
            match total_cost(&candidate, observations) {
                Some(new_cost) if new_cost < cost => {
                    let decrease = (cost - new_cost) / cost;
                    point = candidate;
                    cost = new_cost;
                    damping /= config.damping_factor;
                    improved = true;
                    if decrease < config.relative_tolerance || cost == 0.0 {
                        converged = true;
                    }
                    break;
                }
                _ => damping *= config.damping_factor,
            }
        }
        if !improved {
            // No descent direction left at this precision: a stationary point.
            converged = true;
        }
    }

    let residuals = observations
        .iter()
        .map(|obs| reprojection_error(obs.camera, &point, &obs.pixel))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Refinement { point, residuals, cost, initial_cost, iterations, converged })
}
