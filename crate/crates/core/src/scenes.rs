//! Procedural dynamic scenes, camera rigs and supersampled ground truth.

use std::f64::consts::{PI, TAU};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::deformation::{DeformationTrack, Keyframe};
use crate::filters::{FilterConfig, FilterKind};
use crate::geometry::{CameraModel, GaussianPrimitive, Quat};
use crate::metrics::average_images;
use crate::rasterizer::{render, RenderJob, RenderedImage};
use crate::scene::Scene;
use crate::{Error, Result};

/// Keyframes per ground-truth track, at `k / (GT_KEYFRAMES - 1)`.
pub const GT_KEYFRAMES: usize = 33;
pub const DEFAULT_TIMESTEPS: usize = 8;
pub const DEFAULT_RIG_RADIUS: f64 = 4.0;
/// Amplitude base of the pulsing profile: per-axis scale multiplier
/// `PULSE_BASE^sin(2π(t + φ))`.
pub const PULSE_BASE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneProfile {
    OrbitingBlobs,
    PulsingGrid,
    ThinStructures,
}

impl SceneProfile {
    pub const ALL: [SceneProfile; 3] = [
        SceneProfile::OrbitingBlobs,
        SceneProfile::PulsingGrid,
        SceneProfile::ThinStructures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneProfile::OrbitingBlobs => "orbiting_blobs",
            SceneProfile::PulsingGrid => "pulsing_grid",
            SceneProfile::ThinStructures => "thin_structures",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SceneProfile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scene profile '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RigProfile {
    /// One camera per timestep along an arc.
    MonocularArc,
    /// Fixed ring; every camera sees every timestep.
    MultiviewRing,
}

impl RigProfile {
    pub fn name(self) -> &'static str {
        match self {
            RigProfile::MonocularArc => "monocular_arc",
            RigProfile::MultiviewRing => "multiview_ring",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "monocular_arc" => Ok(RigProfile::MonocularArc),
            "multiview_ring" => Ok(RigProfile::MultiviewRing),
            other => Err(Error::InvalidParameter(format!(
                "unknown rig profile '{other}'"
            ))),
        }
    }
}

/// `count` evenly spaced times over [0, 1].
pub fn timesteps(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn keyframe_times() -> Vec<f64> {
    timesteps(GT_KEYFRAMES)
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q = Quat::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.1 && n <= 1.0 {
            return q.normalized();
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(0.15..1.0),
        rng.random_range(0.15..1.0),
        rng.random_range(0.15..1.0),
    )
}

/// Per-axis scale multiplier of the pulsing profile.
pub fn pulse_multiplier(t: f64, phase: f64) -> f64 {
    PULSE_BASE.powf((TAU * (t + phase)).sin())
}

/// Deterministic procedural scene with its ground-truth deformation.
pub fn make_scene(profile: SceneProfile, seed: u64, count: usize) -> Result<Scene> {
    if count == 0 {
        return Err(Error::InvalidParameter(
            "primitive count must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = keyframe_times();
    let mut prims = Vec::with_capacity(count);
    let mut tracks = Vec::with_capacity(count);
    match profile {
        SceneProfile::OrbitingBlobs => {
            for i in 0..count {
                let p = Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
                let s = Vector3::new(
                    rng.random_range(0.05..0.15),
                    rng.random_range(0.05..0.15),
                    rng.random_range(0.05..0.15),
                );
                let g = GaussianPrimitive::new(
                    i,
                    p,
                    s,
                    rng.random_range(0.6..0.95),
                    random_color(&mut rng),
                )
                .with_rotation(random_unit_quat(&mut rng));
                let radius = rng.random_range(0.1..0.3);
                let phase = rng.random_range(0.0..TAU);
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let kfs = times
                    .iter()
                    .map(|&t| {
                        let a = phase + dir * TAU * t;
                        Keyframe {
                            delta_position: Vector3::new(
                                radius * (a.cos() - phase.cos()),
                                radius * (a.sin() - phase.sin()),
                                0.0,
                            ),
                            ..Keyframe::zero(t)
                        }
                    })
                    .collect();
                prims.push(g);
                tracks.push(DeformationTrack::new(kfs)?);
            }
        }
        SceneProfile::PulsingGrid => {
            let side = (count as f64).cbrt().ceil() as usize;
            let spacing = if side > 1 {
                1.2 / (side - 1) as f64
            } else {
                0.0
            };
            for i in 0..count {
                let (a, b, c) = (i % side, (i / side) % side, i / (side * side));
                let p = Vector3::new(
                    -0.6 + spacing * a as f64,
                    -0.6 + spacing * b as f64,
                    -0.6 + spacing * c as f64,
                );
                let s = Vector3::repeat(rng.random_range(0.03..0.05));
                let g = GaussianPrimitive::new(
                    i,
                    p,
                    s,
                    rng.random_range(0.6..0.95),
                    random_color(&mut rng),
                );
                // Phases on a 1/8 grid so the keyframe grid hits both extremes.
                let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0..8) as f64 / 8.0);
                let kfs = times
                    .iter()
                    .map(|&t| {
                        let m = Vector3::from_fn(|ax, _| pulse_multiplier(t, phases[ax]));
                        Keyframe {
                            delta_scale: s.component_mul(&m) - s,
                            ..Keyframe::zero(t)
                        }
                    })
                    .collect();
                prims.push(g);
                tracks.push(DeformationTrack::new(kfs)?);
            }
        }
        SceneProfile::ThinStructures => {
            for i in 0..count {
                let p = Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                );
                let width = rng.random_range(0.01..0.02);
                let s = Vector3::new(rng.random_range(0.2..0.4), width, width);
                let g = GaussianPrimitive::new(
                    i,
                    p,
                    s,
                    rng.random_range(0.7..0.95),
                    random_color(&mut rng),
                )
                .with_rotation(random_unit_quat(&mut rng));
                let axis = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    1.0,
                )
                .normalize();
                let amplitude = rng.random_range(0.05..0.15);
                let kfs = times
                    .iter()
                    .map(|&t| Keyframe {
                        delta_rotation: Quat::from_axis_angle(axis, amplitude * (TAU * t).sin()),
                        ..Keyframe::zero(t)
                    })
                    .collect();
                prims.push(g);
                tracks.push(DeformationTrack::new(kfs)?);
            }
        }
    }
    Scene::new(prims, tracks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigSpec {
    pub profile: RigProfile,
    pub count: usize,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub radius: f64,
    /// Arc start and end angles in radians (monocular rig only).
    pub arc: (f64, f64),
    /// Camera height above the scene center.
    pub elevation: f64,
}

impl RigSpec {
    pub fn new(profile: RigProfile, count: usize, focal: f64, width: usize, height: usize) -> Self {
        RigSpec {
            profile,
            count,
            focal,
            width,
            height,
            radius: DEFAULT_RIG_RADIUS,
            arc: (-PI / 3.0, PI / 3.0),
            elevation: 0.0,
        }
    }
}

/// Cameras on a circle around the z axis, all aimed at the origin.
pub fn make_rig(spec: &RigSpec) -> Result<Vec<CameraModel>> {
    if spec.count == 0 {
        return Err(Error::InvalidParameter(
            "camera count must be at least 1".into(),
        ));
    }
    let angle = |i: usize| match spec.profile {
        RigProfile::MultiviewRing => TAU * i as f64 / spec.count as f64,
        RigProfile::MonocularArc => {
            if spec.count == 1 {
                spec.arc.0
            } else {
                spec.arc.0 + (spec.arc.1 - spec.arc.0) * i as f64 / (spec.count - 1) as f64
            }
        }
    };
    (0..spec.count)
        .map(|i| {
            let a = angle(i);
            let eye = Vector3::new(spec.radius * a.cos(), spec.radius * a.sin(), spec.elevation);
            CameraModel::look_at(
                eye,
                Vector3::zeros(),
                Vector3::z(),
                spec.focal,
                spec.width,
                spec.height,
                i,
            )
        })
        .collect()
}

/// Box-filtered `supersample`× render, computed as the mean of
/// `supersample²` base-resolution renders whose principal point is shifted
/// to each sub-pixel center. Uses the unfiltered renderer.
pub fn render_supersampled(
    scene: &Scene,
    camera: &CameraModel,
    t: f64,
    supersample: usize,
    background: Vector3<f64>,
) -> Result<RenderedImage> {
    if supersample == 0 {
        return Err(Error::InvalidParameter(
            "supersample factor must be at least 1".into(),
        ));
    }
    let cfg = FilterConfig::new(FilterKind::None);
    let n = supersample as f64;
    let shifts: Vec<Vector2<f64>> = (0..supersample * supersample)
        .map(|k| {
            let (i, j) = (k % supersample, k / supersample);
            Vector2::new(0.5 - (i as f64 + 0.5) / n, 0.5 - (j as f64 + 0.5) / n)
        })
        .collect();
    let images = shifts
        .par_iter()
        .map(|shift| {
            let mut cam = camera.clone();
            cam.principal_point += shift;
            Ok(render(&RenderJob::new(scene, &cam, t, cfg).with_background(background))?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    average_images(&images)
}

/// One training or evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: usize,
    pub time: f64,
    pub image: RenderedImage,
}

/// Cameras, timestamps and images of one capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub cameras: Vec<CameraModel>,
    pub times: Vec<f64>,
    pub views: Vec<View>,
    pub background: Vector3<f64>,
    pub supersample: usize,
}

/// Which (camera, time) pairs a rig observes: every pair for a ring, the
/// diagonal for a monocular arc.
pub fn rig_pairs(profile: RigProfile, cameras: usize, times: usize) -> Result<Vec<(usize, usize)>> {
    match profile {
        RigProfile::MultiviewRing => Ok((0..cameras)
            .flat_map(|c| (0..times).map(move |t| (c, t)))
            .collect()),
        RigProfile::MonocularArc => {
            if cameras != times {
                return Err(Error::InvalidParameter(format!(
                    "a monocular rig needs one camera per timestep, got {cameras} cameras and {times} timesteps"
                )));
            }
            Ok((0..cameras).map(|i| (i, i)).collect())
        }
    }
}

/// Renders the supersampled reference for every observed (camera, time).
pub fn render_ground_truth(
    name: &str,
    scene: &Scene,
    cameras: &[CameraModel],
    profile: RigProfile,
    times: &[f64],
    supersample: usize,
    background: Vector3<f64>,
) -> Result<Dataset> {
    let pairs = rig_pairs(profile, cameras.len(), times.len())?;
    let views = pairs
        .iter()
        .map(|&(c, ti)| {
            Ok(View {
                camera: c,
                time: times[ti],
                image: render_supersampled(scene, &cameras[c], times[ti], supersample, background)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: name.to_string(),
        cameras: cameras.to_vec(),
        times: times.to_vec(),
        views,
        background,
        supersample,
    })
}
