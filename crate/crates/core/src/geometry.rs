//! Primitives, cameras and the world -> camera -> screen projection of
//! Gaussian covariances.
//!
//! Conventions: cameras look down their +z axis with +x right and +y down
//! (image rows grow downwards). Pixel `(col, row)` covers the unit square
//! starting at `(col, row)` on the continuous image plane, so its center is
//! at `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::{Error, Result};

/// Primitives closer to the camera than this (camera-space z, world units)
/// are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Number of projected standard deviations the image rectangle is expanded
/// by in the visibility test.
pub const VISIBILITY_SIGMAS: f64 = 3.0;

/// Smallest eigenvalue (px^2) a projected covariance may have.
pub const MIN_COV2D_EIGENVALUE: f64 = 1e-12;

const UNIT_TOLERANCE: f64 = 1e-9;

/// Quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Quat {
        self.scaled(1.0 / self.norm())
    }

    pub fn scaled(self, k: f64) -> Quat {
        Quat::new(self.w * k, self.x * k, self.y * k, self.z * k)
    }

    pub fn add(self, o: Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(self, b: Quat) -> Quat {
        let a = self;
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Reverse pass of `a ⊗ b`: returns `(dL/da, dL/db)`.
    pub fn mul_vjp(a: Quat, b: Quat, g: Quat) -> (Quat, Quat) {
        // q = N(b) a and q = M(a) b; the gradients are the transposed products.
        let ga = Quat::new(
            b.w * g.w + b.x * g.x + b.y * g.y + b.z * g.z,
            -b.x * g.w + b.w * g.x - b.z * g.y + b.y * g.z,
            -b.y * g.w + b.z * g.x + b.w * g.y - b.x * g.z,
            -b.z * g.w - b.y * g.x + b.x * g.y + b.w * g.z,
        );
        let gb = Quat::new(
            a.w * g.w + a.x * g.x + a.y * g.y + a.z * g.z,
            -a.x * g.w + a.w * g.x + a.z * g.y - a.y * g.z,
            -a.y * g.w - a.z * g.x + a.w * g.y + a.x * g.z,
            -a.z * g.w + a.y * g.x - a.x * g.y + a.w * g.z,
        );
        (ga, gb)
    }

    /// Reverse pass of `q / |q|`.
    pub fn normalize_vjp(q: Quat, g: Quat) -> Quat {
        let n = q.norm();
        let u = q.scaled(1.0 / n);
        let radial = u.dot(g);
        g.add(u.scaled(-radial)).scaled(1.0 / n)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Reverse pass of [`Quat::to_rotation_matrix`] given `dL/dR`.
    pub fn rotation_matrix_vjp(self, g: &Matrix3<f64>) -> Quat {
        let Quat { w, x, y, z } = self;
        let dw = Matrix3::new(
            0.0,
            -2.0 * z,
            2.0 * y,
            2.0 * z,
            0.0,
            -2.0 * x,
            -2.0 * y,
            2.0 * x,
            0.0,
        );
        let dx = Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        );
        let dy = Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        );
        let dz = Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        );
        Quat::new(g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz))
    }
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

/// One anisotropic Gaussian with flat RGB appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub id: usize,
    pub position: Vector3<f64>,
    pub rotation: Quat,
    /// Per-axis standard deviation, world units.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Minimum sampling interval T̂ (world units per pixel); `None` while
    /// untracked.
    pub min_sampling_interval: Option<f64>,
}

impl GaussianPrimitive {
    pub fn new(
        id: usize,
        position: Vector3<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        GaussianPrimitive {
            id,
            position,
            rotation: Quat::IDENTITY,
            scale,
            opacity,
            color,
            min_sampling_interval: None,
        }
    }

    pub fn with_rotation(mut self, rotation: Quat) -> Self {
        self.rotation = rotation;
        self
    }

    /// Maximum sampling frequency ν̂ = 1 / T̂.
    pub fn max_sampling_frequency(&self) -> Option<f64> {
        self.min_sampling_interval.map(|t| 1.0 / t)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(self.rotation, self.scale)
    }

    /// Rejects NaN/inf parameters, naming the offending field.
    pub fn check_finite(&self) -> Result<()> {
        let bad = |field| Err(Error::NonFinitePrimitive { id: self.id, field });
        if !self.position.iter().all(|v| v.is_finite()) {
            return bad("position");
        }
        if !self.rotation.is_finite() {
            return bad("rotation");
        }
        if !self.scale.iter().all(|v| v.is_finite()) {
            return bad("scale");
        }
        if !self.opacity.is_finite() {
            return bad("opacity");
        }
        if !self.color.iter().all(|v| v.is_finite()) {
            return bad("color");
        }
        if let Some(t) = self.min_sampling_interval {
            if !t.is_finite() {
                return bad("min_sampling_interval");
            }
        }
        Ok(())
    }
}

/// Pinhole camera with square pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// Focal length in pixels.
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub index: usize,
}

impl CameraModel {
    pub fn new(
        focal: f64,
        principal_point: Vector2<f64>,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        index: usize,
    ) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "focal length must be positive, got {focal}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "camera resolution {width}x{height} is empty"
            )));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        if ortho > UNIT_TOLERANCE || rotation.determinant() < 0.0 {
            return Err(Error::InvalidParameter(
                "camera rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(CameraModel {
            focal,
            principal_point,
            width,
            height,
            rotation,
            translation,
            index,
        })
    }

    /// Camera at `eye` looking at `target`, principal point at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        index: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidParameter(
                "look-at up vector is parallel to the view direction".into(),
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let pp = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
        CameraModel::new(focal, pp, width, height, rotation, translation, index)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pinhole projection of a camera-space point onto the image plane.
    pub fn project_camera_point(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.focal * x.x / x.z + self.principal_point.x,
            self.focal * x.y / x.z + self.principal_point.y,
        )
    }

    /// Same camera with focal length, principal point and resolution scaled
    /// together (the zoom protocol). Rejects factors that leave no pixels.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale factor must be positive, got {factor}"
            )));
        }
        let width = (self.width as f64 * factor).round() as usize;
        let height = (self.height as f64 * factor).round() as usize;
        if width < 1 || height < 1 {
            return Err(Error::InvalidParameter(format!(
                "scale factor {factor} reduces {}x{} below one pixel",
                self.width, self.height
            )));
        }
        Ok(CameraModel {
            focal: self.focal * factor,
            principal_point: self.principal_point * factor,
            width,
            height,
            ..self.clone()
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Projected screen-space covariance (px^2) and the camera-space depth of
/// the primitive center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2D {
    pub matrix: Matrix2<f64>,
    pub depth: f64,
}

impl Covariance2D {
    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }
}

/// Result of projecting one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub center: Vector2<f64>,
    pub covariance: Covariance2D,
    pub camera_point: Vector3<f64>,
}

/// Σ = R S Sᵀ Rᵀ for a unit quaternion and positive per-axis scales.
pub fn build_covariance(rotation: Quat, scale: Vector3<f64>) -> Result<Matrix3<f64>> {
    if !rotation.is_unit() {
        return Err(Error::NonUnitQuaternion(rotation.norm()));
    }
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "scales must be positive, got {scale:?}"
        )));
    }
    Ok(covariance_from_axes(
        &rotation.to_rotation_matrix(),
        &scale.component_mul(&scale),
    ))
}

/// `R diag(variances) Rᵀ`.
pub fn covariance_from_axes(r: &Matrix3<f64>, variances: &Vector3<f64>) -> Matrix3<f64> {
    r * Matrix3::from_diagonal(variances) * r.transpose()
}

/// Jacobian of the pinhole map at camera-space point `x`.
pub fn projection_jacobian(focal: f64, x: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        focal * iz,
        0.0,
        -focal * x.x * iz2,
        0.0,
        focal * iz,
        -focal * x.y * iz2,
    )
}

/// Top-left 2x2 block of `J V Σ Vᵀ Jᵀ`, without any eigenvalue clamp.
pub fn project_covariance(
    camera: &CameraModel,
    camera_point: &Vector3<f64>,
    cov: &Matrix3<f64>,
) -> Matrix2<f64> {
    let j = projection_jacobian(camera.focal, camera_point);
    let t = j * camera.rotation;
    t * cov * t.transpose()
}

/// Clamps the eigenvalues of a symmetric 2x2 matrix to at least
/// [`MIN_COV2D_EIGENVALUE`]. Returns the matrix unchanged when no clamp is needed.
pub fn clamp_covariance2d(m: &Matrix2<f64>) -> (Matrix2<f64>, bool) {
    let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mid + rad, mid - rad);
    if l2 >= MIN_COV2D_EIGENVALUE {
        return (*m, false);
    }
    // Eigenvector of the larger eigenvalue.
    let v1 = if rad > 0.0 {
        if b.abs() > 1e-300 {
            Vector2::new(b, l1 - a).normalize()
        } else if a >= c {
            Vector2::new(1.0, 0.0)
        } else {
            Vector2::new(0.0, 1.0)
        }
    } else {
        Vector2::new(1.0, 0.0)
    };
    let v2 = Vector2::new(-v1.y, v1.x);
    let l1 = l1.max(MIN_COV2D_EIGENVALUE);
    let l2 = l2.max(MIN_COV2D_EIGENVALUE);
    (v1 * v1.transpose() * l1 + v2 * v2.transpose() * l2, true)
}

/// Projects a Gaussian with world center `position` and world covariance
/// `cov`. Returns `None` (culled) when the center is at or in front of the
/// near plane.
pub fn project_gaussian(
    camera: &CameraModel,
    position: &Vector3<f64>,
    cov: &Matrix3<f64>,
) -> Option<Projection> {
    let x = camera.world_to_camera(position);
    if !(x.z > NEAR_PLANE) {
        return None;
    }
    let raw = project_covariance(camera, &x, cov);
    let (matrix, _) = clamp_covariance2d(&raw);
    Some(Projection {
        center: camera.project_camera_point(&x),
        covariance: Covariance2D { matrix, depth: x.z },
        camera_point: x,
    })
}

/// Visibility indicator: in front of the near plane and the projected
/// center inside the image rectangle grown by three projected standard
/// deviations per axis.
pub fn visibility(camera: &CameraModel, position: &Vector3<f64>, cov: &Matrix3<f64>) -> bool {
    match project_gaussian(camera, position, cov) {
        None => false,
        Some(proj) => {
            let m = proj.covariance.matrix;
            let mx = VISIBILITY_SIGMAS * m[(0, 0)].max(0.0).sqrt();
            let my = VISIBILITY_SIGMAS * m[(1, 1)].max(0.0).sqrt();
            let c = proj.center;
            c.x >= -mx
                && c.x <= camera.width as f64 + mx
                && c.y >= -my
                && c.y <= camera.height as f64 + my
        }
    }
}
