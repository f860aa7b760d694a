//! Finite-difference verification of the analytic gradients.
//!
//! The objective is a fixed random linear functional of the rendered image
//! plus a weighted scale loss. Rendering uses [`RenderOptions::smooth`] so
//! the objective is differentiable, and random configurations keep every
//! filter branch and scale-loss indicator away from its switching point.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformation::{deform, DeformationTrack, Keyframe, SCALE_FLOOR};
use crate::filters::{FilterConfig, FilterKind};
use crate::geometry::{CameraModel, GaussianPrimitive, Quat};
use crate::rasterizer::{render_full, RenderJob, RenderOptions};
use crate::scene::Scene;
use crate::Result;

use super::backward::{render_backward, scale_loss_backward, Param, ParamGroup, SceneGrad};
use super::loss::{scale_band, scale_loss, ScaleLossMode};

pub const FD_STEP: f64 = 1e-4;
/// Components whose gradients are this small relative to the largest
/// component of their group are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub scene: Scene,
    pub camera: CameraModel,
    pub time: f64,
    pub filter: FilterConfig,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub mode: ScaleLossMode,
}

impl GradCheckCase {
    fn job<'a>(&'a self, scene: &'a Scene) -> RenderJob<'a> {
        RenderJob::new(scene, &self.camera, self.time, self.filter)
            .with_options(RenderOptions::smooth())
    }

    pub fn objective(&self, scene: &Scene) -> Result<f64> {
        let out = render_full(&self.job(scene))?;
        let image: f64 = out
            .image
            .color
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| c * w)
            .sum();
        Ok(image + self.lambda * scale_loss(scene, self.time, &self.filter, self.mode).value)
    }

    pub fn analytic(&self) -> Result<SceneGrad> {
        let job = self.job(&self.scene);
        let out = render_full(&job)?;
        let mut grad = render_backward(&job, &out, &self.weights)?;
        let sl = scale_loss(&self.scene, self.time, &self.filter, self.mode);
        scale_loss_backward(&self.scene, self.time, &sl, self.lambda, &mut grad);
        Ok(grad)
    }

    pub fn finite_difference(&self, p: Param, h: f64) -> Result<f64> {
        let mut plus = self.scene.clone();
        p.nudge(&mut plus, h);
        let mut minus = self.scene.clone();
        p.nudge(&mut minus, -h);
        Ok((self.objective(&plus)? - self.objective(&minus)?) / (2.0 * h))
    }
}

/// Relative distance of each per-axis quantity from its nearest switching
/// point; configurations closer than this are resampled.
const BRANCH_MARGIN: f64 = 0.1;

fn far_from(x: f64, edge: f64) -> bool {
    edge == 0.0 || (x / edge - 1.0).abs() > BRANCH_MARGIN
}

fn branch_safe(scene: &Scene, t: f64, filter: &FilterConfig) -> bool {
    for (k, g) in scene.primitives.iter().enumerate() {
        let Some(interval) = g.min_sampling_interval else {
            return false;
        };
        let unit = filter.sigma_s * interval * interval;
        let (lo, hi) = scale_band(interval, filter);
        // Every keyframe's raw scale must clear the floor, not only the
        // interpolated one, so nudging a keyframe cannot cross it.
        for kf in scene.tracks[k].keyframes() {
            if (g.scale + kf.delta_scale).min() < 10.0 * SCALE_FLOOR {
                return false;
            }
        }
        let st = deform(g, &scene.tracks[k], t).scale;
        for a in 0..3 {
            let sq = st[a] * st[a];
            let ratio = sq / (g.scale[a] * g.scale[a]);
            let ok = far_from(sq, filter.rho_thre * unit)
                && far_from(ratio, filter.rho_min)
                && far_from(ratio, filter.rho_max)
                && far_from(sq, lo)
                && far_from(sq, hi);
            if !ok {
                return false;
            }
        }
    }
    true
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Quat {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 {
        Vector3::z()
    } else {
        axis.normalize()
    };
    Quat::from_axis_angle(axis, rng.random_range(-max_angle..max_angle))
}

/// A random three-primitive scene in front of a 20x20 camera, keyframes at
/// 0, 0.5 and 1, and a query time between keyframes. `kind` picks the filter.
pub fn random_case(seed: u64, kind: FilterKind) -> GradCheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h, f) = (20, 20, 40.0);
    let camera = CameraModel::new(
        f,
        Vector2::new(10.0, 10.0),
        w,
        h,
        Matrix3::identity(),
        Vector3::zeros(),
        0,
    )
    .expect("valid camera");
    let mut filter = FilterConfig::new(kind);
    filter.rho_thre = 0.05;
    loop {
        let times = [0.0, 0.5, 1.0];
        let time = if rng.random_bool(0.5) {
            rng.random_range(0.05..0.45)
        } else {
            rng.random_range(0.55..0.95)
        };
        let interval = 0.05;
        let mut prims = Vec::new();
        let mut tracks = Vec::new();
        for i in 0..3 {
            let z = rng.random_range(2.5..4.0);
            let p = Vector3::new(
                rng.random_range(-0.3..0.3) * z / 3.0,
                rng.random_range(-0.3..0.3) * z / 3.0,
                z,
            );
            let mut s = Vector3::new(
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
                rng.random_range(0.05..0.2),
            );
            // Sometimes one axis lives in the masked regime or in the
            // scale-loss band.
            let tiny = rng.random_range(0..4);
            if tiny < 3 {
                s[tiny] = if rng.random_bool(0.5) {
                    rng.random_range(0.0025..0.004)
                } else {
                    rng.random_range(0.006..0.009)
                };
            }
            let opacity = rng.random_range(0.2..0.9);
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            let mut g = GaussianPrimitive::new(i, p, s, opacity, color)
                .with_rotation(random_rotation(&mut rng, 3.0));
            g.min_sampling_interval = Some(interval * rng.random_range(0.8..1.2));
            let kfs = times
                .iter()
                .map(|&t| {
                    let mut ds = Vector3::zeros();
                    for a in 0..3 {
                        if a != tiny {
                            ds[a] = s[a] * rng.random_range(-0.6..1.5);
                        }
                    }
                    Keyframe {
                        time: t,
                        delta_position: Vector3::new(
                            rng.random_range(-0.1..0.1),
                            rng.random_range(-0.1..0.1),
                            rng.random_range(-0.1..0.1),
                        ),
                        delta_rotation: random_rotation(&mut rng, 0.8),
                        delta_scale: ds,
                    }
                })
                .collect();
            prims.push(g);
            tracks.push(DeformationTrack::new(kfs).expect("valid track"));
        }
        let scene = Scene::new(prims, tracks).expect("parallel vectors");
        if kind.uses_frequency() && !branch_safe(&scene, time, &filter) {
            continue;
        }
        let weights = (0..3 * w * h)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let lambda = if kind == FilterKind::Adaptive4d {
            2e3
        } else {
            0.0
        };
        let mode = if rng.random_bool(0.5) {
            ScaleLossMode::Sum
        } else {
            ScaleLossMode::Mean
        };
        return GradCheckCase {
            scene,
            camera,
            time,
            filter,
            weights,
            lambda,
            mode,
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub cases: usize,
    pub components: usize,
    pub max_rel_err: f64,
}

/// Central-difference step for `p`. Scale components use a step relative to
/// the smallest raw scale along that axis, which may be tiny.
pub fn fd_step(scene: &Scene, p: Param) -> f64 {
    let axis_min = |k: usize, a: usize| {
        let g = &scene.primitives[k];
        scene.tracks[k]
            .keyframes()
            .iter()
            .map(|kf| g.scale[a] + kf.delta_scale[a])
            .fold(g.scale[a], f64::min)
    };
    match p {
        Param::Scale(k, a) | Param::DeltaScale(k, _, a) => FD_STEP * axis_min(k, a).min(1.0),
        _ => FD_STEP,
    }
}

/// Relative error with an absolute floor.
pub fn relative_error(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor)
}

/// Compares every component of `group` in `cases` random configurations,
/// cycling through the filter kinds.
pub fn check_group(group: ParamGroup, cases: usize, seed: u64) -> Result<GroupReport> {
    let mut report = GroupReport {
        group,
        cases,
        components: 0,
        max_rel_err: 0.0,
    };
    for c in 0..cases {
        let kind = FilterKind::ALL[c % FilterKind::ALL.len()];
        let case = random_case(seed.wrapping_mul(1000).wrapping_add(c as u64), kind);
        let grad = case.analytic()?;
        let params = group.params(&case.scene);
        let scale = params
            .iter()
            .map(|&p| grad.get(p).abs())
            .fold(0.0, f64::max);
        let floor = (RELATIVE_FLOOR * scale).max(1e-9);
        for p in params {
            let fd = case.finite_difference(p, fd_step(&case.scene, p))?;
            let err = relative_error(grad.get(p), fd, floor);
            report.components += 1;
            report.max_rel_err = report.max_rel_err.max(err);
        }
    }
    Ok(report)
}
