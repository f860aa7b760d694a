//! Per-primitive stage of the renderer: deform to time `t`, cull, apply the
//! object-space filter, project, apply the screen-space filter. The reverse
//! pass walks the same chain backwards to the primitive parameters and the
//! keyframes the deformation read.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::deformation::{deform_vjp, DeformGrad, DeformedState};
use crate::filters::{
    object_filter, screen_filter, screen_filter_vjp, FilterConfig, ObjectFilter, ScreenFilter,
};
use crate::geometry::{
    clamp_covariance2d, covariance_from_axes, project_covariance, projection_jacobian, visibility,
    CameraModel, GaussianPrimitive, Quat,
};
use crate::scene::Scene;
use crate::{Error, Result};

/// A primitive ready for blending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    /// Position in the scene's primitive vector.
    pub index: usize,
    pub id: usize,
    pub mean: Vector2<f64>,
    /// Inverse of the filtered screen covariance, `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// `α · object normalization · screen normalization`.
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
    /// Largest eigenvalue of the filtered screen covariance (px²).
    pub max_variance: f64,
}

/// Forward intermediates needed by [`preprocess_backward`].
#[derive(Debug, Clone, Copy)]
pub struct SplatCache {
    pub state: DeformedState,
    pub object: ObjectFilter,
    pub rotation_t: Matrix3<f64>,
    pub cov3d: Matrix3<f64>,
    pub camera_point: Vector3<f64>,
    pub cov2d: Matrix2<f64>,
    pub cov2d_clamped: bool,
    pub filtered2d: Matrix2<f64>,
    pub screen_normalization: f64,
}

/// Gradient of the per-splat outputs, accumulated over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub mean: Vector2<f64>,
    /// With respect to the conic parameters `(a, b, c)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl SplatGrad {
    pub fn accumulate(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Gradient with respect to one primitive's own parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveGrad {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Default for PrimitiveGrad {
    fn default() -> Self {
        PrimitiveGrad {
            position: Vector3::zeros(),
            rotation: Quat::new(0.0, 0.0, 0.0, 0.0),
            scale: Vector3::zeros(),
            opacity: 0.0,
            color: Vector3::zeros(),
        }
    }
}

/// Sampling interval used by the frequency filters for `g`: its own T̂ or
/// the scene fallback.
pub fn effective_interval(g: &GaussianPrimitive, fallback: Option<f64>) -> Option<f64> {
    g.min_sampling_interval.or(fallback)
}

/// Resolves the fallback interval for a render, failing only when a
/// frequency filter is active and no primitive is tracked.
pub fn fallback_interval(scene: &Scene, filter: &FilterConfig) -> Result<Option<f64>> {
    let median = scene.median_sampling_interval();
    if filter.kind.uses_frequency() && median.is_none() && !scene.is_empty() {
        return Err(Error::MissingSamplingRate);
    }
    Ok(median)
}

/// Runs the per-primitive stage for primitive `k`. `None` means culled:
/// behind the near plane or outside the 3σ-expanded image rectangle.
pub fn preprocess_primitive(
    scene: &Scene,
    k: usize,
    camera: &CameraModel,
    t: f64,
    filter: &FilterConfig,
    fallback: Option<f64>,
) -> Option<(Splat, SplatCache)> {
    let g = &scene.primitives[k];
    let state = scene.deformed(k, t);
    let rotation_t = state.rotation.to_rotation_matrix();
    let raw_cov = covariance_from_axes(&rotation_t, &state.scale.component_mul(&state.scale));
    if !visibility(camera, &state.position, &raw_cov) {
        return None;
    }
    let interval = if filter.kind.uses_frequency() {
        effective_interval(g, fallback)
    } else {
        None
    };
    let object = object_filter(filter.kind, &state.scale, &g.scale, interval, filter);
    let cov3d = covariance_from_axes(&rotation_t, &object.variances);
    let camera_point = camera.world_to_camera(&state.position);
    let raw2d = project_covariance(camera, &camera_point, &cov3d);
    let (cov2d, cov2d_clamped) = clamp_covariance2d(&raw2d);
    let (filtered2d, screen_normalization) =
        screen_filter(filter.kind.screen_filter(), &cov2d, filter.sigma_s);
    let det = filtered2d.determinant();
    let conic = [
        filtered2d[(1, 1)] / det,
        -filtered2d[(0, 1)] / det,
        filtered2d[(0, 0)] / det,
    ];
    let (a, b, c) = (filtered2d[(0, 0)], filtered2d[(0, 1)], filtered2d[(1, 1)]);
    let max_variance = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let splat = Splat {
        index: k,
        id: g.id,
        mean: camera.project_camera_point(&camera_point),
        conic,
        opacity: g.opacity * object.normalization * screen_normalization,
        color: g.color,
        depth: camera_point.z,
        max_variance,
    };
    let cache = SplatCache {
        state,
        object,
        rotation_t,
        cov3d,
        camera_point,
        cov2d,
        cov2d_clamped,
        filtered2d,
        screen_normalization,
    };
    Some((splat, cache))
}

/// Reverse pass of [`preprocess_primitive`].
pub fn preprocess_backward(
    scene: &Scene,
    k: usize,
    camera: &CameraModel,
    t: f64,
    filter: &FilterConfig,
    cache: &SplatCache,
    grad: &SplatGrad,
) -> (PrimitiveGrad, DeformGrad) {
    let g = &scene.primitives[k];
    let on = cache.object.normalization;
    let sn = cache.screen_normalization;

    // conic = filtered⁻¹, gradient as a full symmetric matrix.
    let conic = cache
        .filtered2d
        .try_inverse()
        .unwrap_or_else(Matrix2::zeros);
    let g_conic = Matrix2::new(
        grad.conic[0],
        0.5 * grad.conic[1],
        0.5 * grad.conic[1],
        grad.conic[2],
    );
    let g_filtered = -(conic * g_conic * conic);
    let g_screen_norm = grad.opacity * g.opacity * on;
    let g_object_norm = grad.opacity * g.opacity * sn;
    let g_alpha = grad.opacity * on * sn;

    let mut g_cov2d = screen_filter_vjp(
        filter.kind.screen_filter(),
        &cache.cov2d,
        filter.sigma_s,
        &g_filtered,
        g_screen_norm,
    );
    if filter.kind.screen_filter() == ScreenFilter::None && cache.cov2d_clamped {
        g_cov2d = Matrix2::zeros();
    }

    // cov2d = T Σ Tᵀ with T = J W.
    let x = cache.camera_point;
    let f = camera.focal;
    let jac = projection_jacobian(f, &x);
    let tmat = jac * camera.rotation;
    let g_cov3d = tmat.transpose() * g_cov2d * tmat;
    let g_t: Matrix2x3<f64> = g_cov2d * tmat * cache.cov3d * 2.0;
    let g_j = g_t * camera.rotation.transpose();

    let (iz, iz2) = (1.0 / x.z, 1.0 / (x.z * x.z));
    let iz3 = iz2 * iz;
    let mut g_x = Vector3::new(
        f * iz * grad.mean.x,
        f * iz * grad.mean.y,
        -f * iz2 * (x.x * grad.mean.x + x.y * grad.mean.y),
    );
    g_x.x += g_j[(0, 2)] * (-f * iz2);
    g_x.y += g_j[(1, 2)] * (-f * iz2);
    g_x.z += g_j[(0, 0)] * (-f * iz2)
        + g_j[(1, 1)] * (-f * iz2)
        + g_j[(0, 2)] * (2.0 * f * x.x * iz3)
        + g_j[(1, 2)] * (2.0 * f * x.y * iz3);
    let g_position_t = camera.rotation.transpose() * g_x;

    // Σ = R diag(v) Rᵀ.
    let r = cache.rotation_t;
    let local = r.transpose() * g_cov3d * r;
    let g_var = Vector3::new(local[(0, 0)], local[(1, 1)], local[(2, 2)]);
    let g_r = g_cov3d * r * Matrix3::from_diagonal(&cache.object.variances) * 2.0;
    let (g_scale_t, g_scale_base) = cache.object.backward(&g_var, g_object_norm);
    let g_rotation_t = cache.state.rotation.rotation_matrix_vjp(&g_r);

    let track = &scene.tracks[k];
    let mut d = deform_vjp(
        g,
        track,
        t,
        &cache.state,
        g_position_t,
        g_rotation_t,
        g_scale_t,
    );
    d.scale += g_scale_base;
    let prim = PrimitiveGrad {
        position: d.position,
        rotation: d.rotation,
        scale: d.scale,
        opacity: g_alpha,
        color: grad.color,
    };
    (prim, d)
}
