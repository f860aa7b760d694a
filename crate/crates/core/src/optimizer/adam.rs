use crate::geometry::Quat;
use crate::scene::Scene;

use super::backward::{ParamGroup, SceneGrad};
use super::LearningRates;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-15;
/// Opacity stays this far from 0 and 1 so its logit is finite.
const OPACITY_MARGIN: f64 = 1e-6;

/// Moment estimates of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamGroup {
    pub group: ParamGroup,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamGroup {
    fn update(&mut self, values: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            values[i] -= lr * mh / (vh.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Adam over every parameter group. Scales are optimized in log space and
/// opacity in logit space.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub groups: Vec<AdamGroup>,
}

fn logit(a: f64) -> f64 {
    let a = a.clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN);
    (a / (1.0 - a)).ln()
}

fn sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).clamp(OPACITY_MARGIN, 1.0 - OPACITY_MARGIN)
}

fn push_quat(out: &mut Vec<f64>, q: Quat) {
    out.extend_from_slice(&q.to_array());
}

/// Current values of a group in optimizer space.
fn read(scene: &Scene, group: ParamGroup) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, g) in scene.primitives.iter().enumerate() {
        match group {
            ParamGroup::Position => out.extend(g.position.iter()),
            ParamGroup::Rotation => push_quat(&mut out, g.rotation),
            ParamGroup::Scale => out.extend(g.scale.iter().map(|s| s.ln())),
            ParamGroup::Opacity => out.push(logit(g.opacity)),
            ParamGroup::Color => out.extend(g.color.iter()),
            ParamGroup::DeltaPosition => scene.tracks[k]
                .keyframes()
                .iter()
                .for_each(|kf| out.extend(kf.delta_position.iter())),
            ParamGroup::DeltaRotation => scene.tracks[k]
                .keyframes()
                .iter()
                .for_each(|kf| push_quat(&mut out, kf.delta_rotation)),
            ParamGroup::DeltaScale => scene.tracks[k]
                .keyframes()
                .iter()
                .for_each(|kf| out.extend(kf.delta_scale.iter())),
        }
    }
    out
}

/// Gradient of a group in optimizer space.
fn gradient(scene: &Scene, grad: &SceneGrad, group: ParamGroup) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, g) in scene.primitives.iter().enumerate() {
        let p = &grad.primitives[k];
        match group {
            ParamGroup::Position => out.extend(p.position.iter()),
            ParamGroup::Rotation => push_quat(&mut out, p.rotation),
            ParamGroup::Scale => out.extend(p.scale.iter().zip(g.scale.iter()).map(|(d, s)| d * s)),
            ParamGroup::Opacity => out.push(p.opacity * g.opacity * (1.0 - g.opacity)),
            ParamGroup::Color => out.extend(p.color.iter()),
            ParamGroup::DeltaPosition => grad.keyframes[k]
                .iter()
                .for_each(|kf| out.extend(kf.delta_position.iter())),
            ParamGroup::DeltaRotation => grad.keyframes[k]
                .iter()
                .for_each(|kf| push_quat(&mut out, kf.delta_rotation)),
            ParamGroup::DeltaScale => grad.keyframes[k]
                .iter()
                .for_each(|kf| out.extend(kf.delta_scale.iter())),
        }
    }
    out
}

fn write(scene: &mut Scene, group: ParamGroup, values: &[f64]) {
    let mut it = values.iter().copied();
    let mut next = || it.next().expect("parameter vector length");
    for k in 0..scene.len() {
        let (prims, tracks) = (&mut scene.primitives, &mut scene.tracks);
        let g = &mut prims[k];
        match group {
            ParamGroup::Position => g.position.iter_mut().for_each(|v| *v = next()),
            ParamGroup::Rotation => {
                g.rotation = Quat::new(next(), next(), next(), next()).normalized();
            }
            ParamGroup::Scale => g.scale.iter_mut().for_each(|v| *v = next().exp()),
            ParamGroup::Opacity => g.opacity = sigmoid(next()),
            ParamGroup::Color => g.color.iter_mut().for_each(|v| *v = next().clamp(0.0, 1.0)),
            ParamGroup::DeltaPosition => {
                for kf in tracks[k].keyframes_mut() {
                    kf.delta_position.iter_mut().for_each(|v| *v = next());
                }
            }
            ParamGroup::DeltaRotation => {
                for kf in tracks[k].keyframes_mut() {
                    kf.delta_rotation = Quat::new(next(), next(), next(), next()).normalized();
                }
            }
            ParamGroup::DeltaScale => {
                for kf in tracks[k].keyframes_mut() {
                    kf.delta_scale.iter_mut().for_each(|v| *v = next());
                }
            }
        }
    }
}

fn is_deformation(group: ParamGroup) -> bool {
    matches!(
        group,
        ParamGroup::DeltaPosition | ParamGroup::DeltaRotation | ParamGroup::DeltaScale
    )
}

impl Adam {
    pub fn new(scene: &Scene, lr: &LearningRates) -> Self {
        let groups = ParamGroup::ALL
            .iter()
            .map(|&group| {
                let n = group.params(scene).len();
                let rate = match group {
                    ParamGroup::Position => lr.position,
                    ParamGroup::Rotation => lr.rotation,
                    ParamGroup::Scale => lr.scale,
                    ParamGroup::Opacity => lr.opacity,
                    ParamGroup::Color => lr.color,
                    _ => lr.deformation,
                };
                AdamGroup {
                    group,
                    lr: rate,
                    step: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Adam { groups }
    }

    /// One update. `position_lr` overrides the position group's rate;
    /// deformation groups only move when `joint` is set.
    pub fn step(&mut self, scene: &mut Scene, grad: &SceneGrad, position_lr: f64, joint: bool) {
        for g in &mut self.groups {
            if is_deformation(g.group) && !joint {
                continue;
            }
            if g.m.is_empty() {
                continue;
            }
            let lr = if g.group == ParamGroup::Position {
                position_lr
            } else {
                g.lr
            };
            let mut values = read(scene, g.group);
            let grads = gradient(scene, grad, g.group);
            g.update(&mut values, &grads, lr);
            write(scene, g.group, &values);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GaussianPrimitive;
    use nalgebra::Vector3;

    #[test]
    fn single_scalar_matches_reference_adam() {
        let mut g = AdamGroup {
            group: ParamGroup::Color,
            lr: 0.1,
            step: 0,
            m: vec![0.0],
            v: vec![0.0],
        };
        let mut x = [1.0];
        // Reference: first step moves by lr · sign(g).
        g.update(&mut x, &[0.5], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-12);
        let (m, v) = (0.9 * 0.05 + 0.1 * -0.25, 0.999 * 0.00025 + 0.001 * 0.0625);
        let expected =
            0.9 - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + ADAM_EPSILON);
        g.update(&mut x, &[-0.25], 0.1);
        assert!((x[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn read_write_round_trip_and_invariants() {
        let g = GaussianPrimitive::new(
            0,
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(0.5, 0.2, 0.1),
            0.3,
            Vector3::new(0.2, 0.4, 0.6),
        )
        .with_rotation(Quat::new(0.9, 0.1, 0.3, -0.2).normalized());
        let mut scene = Scene::from_static(vec![g]);
        let before = scene.clone();
        for group in ParamGroup::ALL {
            let v = read(&scene, group);
            write(&mut scene, group, &v);
        }
        let a = &scene.primitives[0];
        let b = &before.primitives[0];
        assert!((a.scale - b.scale).norm() < 1e-15);
        assert!((a.opacity - b.opacity).abs() < 1e-15);
        // Writing pushes colors back into [0, 1] and renormalizes rotations.
        write(&mut scene, ParamGroup::Color, &[1.5, -0.2, 0.5]);
        assert_eq!(scene.primitives[0].color, Vector3::new(1.0, 0.0, 0.5));
        write(&mut scene, ParamGroup::Rotation, &[2.0, 0.0, 0.0, 0.0]);
        assert!(scene.primitives[0].rotation.is_unit());
    }
}
