//! Per-primitive minimum sampling interval T̂ (world units per pixel) and
//! its reciprocal, the maximum sampling frequency ν̂ = 1/T̂.
//!
//! A camera at depth `d` with focal length `f` (pixels) samples a primitive
//! every `d / f` world units. Early in training T̂ is the smallest such ratio
//! over the cameras that see the primitive's base position; later it is
//! refined with a momentum rule fed by the depths the rasterizer already
//! computed for every rendered view.

use crate::deformation::{deform, DeformationTrack};
use crate::geometry::{
    build_covariance, covariance_from_axes, visibility, CameraModel, GaussianPrimitive,
};
use crate::scene::Scene;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackerMode {
    Static,
    Momentum,
}

/// Camera-space depth of one primitive center in one rendered view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthObservation {
    /// Position of the primitive in the scene's primitive vector.
    pub index: usize,
    pub depth: f64,
}

/// Schedule and momentum state for T̂. The per-primitive values live on
/// [`GaussianPrimitive::min_sampling_interval`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyTracker {
    /// λ_v in (0, 1].
    pub momentum: f64,
    /// First iteration that uses the momentum rule.
    pub switch_iteration: usize,
}

impl FrequencyTracker {
    pub fn new(momentum: f64, switch_iteration: usize) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "momentum λ_v must lie in (0, 1], got {momentum}"
            )));
        }
        Ok(FrequencyTracker {
            momentum,
            switch_iteration,
        })
    }

    pub fn mode_at(&self, iteration: usize) -> TrackerMode {
        if iteration < self.switch_iteration {
            TrackerMode::Static
        } else {
            TrackerMode::Momentum
        }
    }

    /// Recomputes the static estimate for every primitive from its base
    /// position. Unseen primitives become untracked.
    pub fn refresh_static(&self, scene: &mut Scene, cameras: &[CameraModel]) {
        for g in &mut scene.primitives {
            g.min_sampling_interval = static_interval(g, cameras);
        }
    }

    /// Applies one momentum step to primitive `g` for an observation at
    /// depth `depth` through a camera with focal length `focal`.
    pub fn observe(&self, g: &mut GaussianPrimitive, depth: f64, focal: f64) -> Result<()> {
        let ratio = depth / focal;
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "observed depth/focal ratio {ratio} is not positive"
            )));
        }
        g.min_sampling_interval = Some(match g.min_sampling_interval {
            Some(current) => momentum_update(current, ratio, self.momentum)?,
            // First sighting of a previously unseen primitive.
            None => ratio,
        });
        Ok(())
    }

    /// Batch entry point: one momentum step per primitive that appears in a
    /// rendered view's depth list. Each primitive appears at most once per view.
    pub fn observe_view(
        &self,
        scene: &mut Scene,
        depths: &[DepthObservation],
        focal: f64,
    ) -> Result<()> {
        for obs in depths {
            self.observe(&mut scene.primitives[obs.index], obs.depth, focal)?;
        }
        Ok(())
    }
}

/// `(1 - λ) T̂ + λ min(T̂, observed)`.
pub fn momentum_update(current: f64, observed: f64, momentum: f64) -> Result<f64> {
    if !(observed > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "observed sampling interval {observed} is not positive"
        )));
    }
    Ok((1.0 - momentum) * current + momentum * current.min(observed))
}

/// Minimum of `d_n / f_n` over the cameras that see the primitive's base
/// position; `None` when no camera sees it.
pub fn static_interval(g: &GaussianPrimitive, cameras: &[CameraModel]) -> Option<f64> {
    let cov = build_covariance(g.rotation.normalized(), g.scale).ok()?;
    cameras
        .iter()
        .filter(|cam| visibility(cam, &g.position, &cov))
        .map(|cam| cam.world_to_camera(&g.position).z / cam.focal)
        .min_by(f64::total_cmp)
}

/// Exhaustive minimum of `d_n(t) / f_n` over every camera and timestep in
/// which the deformed primitive is visible.
pub fn brute_force_interval(
    g: &GaussianPrimitive,
    track: &DeformationTrack,
    cameras: &[CameraModel],
    times: &[f64],
) -> Option<f64> {
    let mut best: Option<f64> = None;
    for &t in times {
        let state = deform(g, track, t);
        let r = state.rotation.to_rotation_matrix();
        let cov = covariance_from_axes(&r, &state.scale.component_mul(&state.scale));
        for cam in cameras {
            if visibility(cam, &state.position, &cov) {
                let ratio = cam.world_to_camera(&state.position).z / cam.focal;
                best = Some(best.map_or(ratio, |b: f64| b.min(ratio)));
            }
        }
    }
    best
}
