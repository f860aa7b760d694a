use nalgebra::Vector3;
use rayon::prelude::*;

use crate::deformation::{deform_vjp, DeformGrad, KeyframeGrad};
use crate::geometry::Quat;
use crate::rasterizer::preprocess::preprocess_backward;
use crate::rasterizer::{blend_backward, PrimitiveGrad, RenderJob, RenderOutput, SplatGrad};
use crate::scene::Scene;
use crate::{Error, Result};

use super::loss::ScaleLoss;

/// Gradient with respect to every learnable parameter of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub primitives: Vec<PrimitiveGrad>,
    /// One entry per keyframe of every track.
    pub keyframes: Vec<Vec<KeyframeGrad>>,
}

impl SceneGrad {
    pub fn zeros(scene: &Scene) -> Self {
        SceneGrad {
            primitives: vec![PrimitiveGrad::default(); scene.len()],
            keyframes: scene
                .tracks
                .iter()
                .map(|t| vec![KeyframeGrad::default(); t.len()])
                .collect(),
        }
    }

    fn add_deform(&mut self, k: usize, d: &DeformGrad) {
        let p = &mut self.primitives[k];
        p.position += d.position;
        p.rotation = p.rotation.add(d.rotation);
        p.scale += d.scale;
        for (j, g) in d.keyframes.iter().flatten() {
            self.keyframes[k][*j].accumulate(g);
        }
    }

    pub fn check_finite(&self, scene: &Scene) -> Result<()> {
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        for (k, p) in self.primitives.iter().enumerate() {
            let id = scene.primitives[k].id;
            let bad = |field| Err(Error::NonFiniteGradient { id, field });
            if !finite(&p.position) {
                return bad("position");
            }
            if !p.rotation.is_finite() {
                return bad("rotation");
            }
            if !finite(&p.scale) {
                return bad("scale");
            }
            if !p.opacity.is_finite() {
                return bad("opacity");
            }
            if !finite(&p.color) {
                return bad("color");
            }
            for g in &self.keyframes[k] {
                if !finite(&g.delta_position)
                    || !g.delta_rotation.is_finite()
                    || !finite(&g.delta_scale)
                {
                    return bad("deformation keyframe");
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::Position(k, a) => self.primitives[k].position[a],
            Param::Rotation(k, c) => self.primitives[k].rotation.to_array()[c],
            Param::Scale(k, a) => self.primitives[k].scale[a],
            Param::Opacity(k) => self.primitives[k].opacity,
            Param::Color(k, c) => self.primitives[k].color[c],
            Param::DeltaPosition(k, j, a) => self.keyframes[k][j].delta_position[a],
            Param::DeltaRotation(k, j, c) => self.keyframes[k][j].delta_rotation.to_array()[c],
            Param::DeltaScale(k, j, a) => self.keyframes[k][j].delta_scale[a],
        }
    }
}

/// Address of one scalar parameter: primitive index, keyframe index, component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Position(usize, usize),
    Rotation(usize, usize),
    Scale(usize, usize),
    Opacity(usize),
    Color(usize, usize),
    DeltaPosition(usize, usize, usize),
    DeltaRotation(usize, usize, usize),
    DeltaScale(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    DeltaPosition,
    DeltaRotation,
    DeltaScale,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::DeltaPosition,
        ParamGroup::DeltaRotation,
        ParamGroup::DeltaScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Scale => "scale",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Color => "color",
            ParamGroup::DeltaPosition => "delta_position",
            ParamGroup::DeltaRotation => "delta_rotation",
            ParamGroup::DeltaScale => "delta_scale",
        }
    }

    /// Every scalar of this group in `scene`.
    pub fn params(self, scene: &Scene) -> Vec<Param> {
        let mut out = Vec::new();
        for k in 0..scene.len() {
            let nk = scene.tracks[k].len();
            match self {
                ParamGroup::Position => out.extend((0..3).map(|a| Param::Position(k, a))),
                ParamGroup::Rotation => out.extend((0..4).map(|c| Param::Rotation(k, c))),
                ParamGroup::Scale => out.extend((0..3).map(|a| Param::Scale(k, a))),
                ParamGroup::Opacity => out.push(Param::Opacity(k)),
                ParamGroup::Color => out.extend((0..3).map(|c| Param::Color(k, c))),
                ParamGroup::DeltaPosition => out.extend(
                    (0..nk).flat_map(|j| (0..3).map(move |a| Param::DeltaPosition(k, j, a))),
                ),
                ParamGroup::DeltaRotation => out.extend(
                    (0..nk).flat_map(|j| (0..4).map(move |c| Param::DeltaRotation(k, j, c))),
                ),
                ParamGroup::DeltaScale => out
                    .extend((0..nk).flat_map(|j| (0..3).map(move |a| Param::DeltaScale(k, j, a)))),
            }
        }
        out
    }
}

fn quat_add_component(q: &mut Quat, c: usize, delta: f64) {
    let mut a = q.to_array();
    a[c] += delta;
    *q = Quat::from_array(a);
}

impl Param {
    /// Adds `delta` to the addressed parameter (raw, unnormalized).
    pub fn nudge(self, scene: &mut Scene, delta: f64) {
        match self {
            Param::Position(k, a) => scene.primitives[k].position[a] += delta,
            Param::Rotation(k, c) => {
                quat_add_component(&mut scene.primitives[k].rotation, c, delta)
            }
            Param::Scale(k, a) => scene.primitives[k].scale[a] += delta,
            Param::Opacity(k) => scene.primitives[k].opacity += delta,
            Param::Color(k, c) => scene.primitives[k].color[c] += delta,
            Param::DeltaPosition(k, j, a) => {
                scene.tracks[k].keyframes_mut()[j].delta_position[a] += delta
            }
            Param::DeltaRotation(k, j, c) => quat_add_component(
                &mut scene.tracks[k].keyframes_mut()[j].delta_rotation,
                c,
                delta,
            ),
            Param::DeltaScale(k, j, a) => {
                scene.tracks[k].keyframes_mut()[j].delta_scale[a] += delta
            }
        }
    }
}

/// Gradient of a scalar function of the rendered image, given its gradient
/// with respect to the pixel colors, through blending, filtering, projection
/// and deformation.
pub fn render_backward(
    job: &RenderJob,
    out: &RenderOutput,
    grad_color: &[f64],
) -> Result<SceneGrad> {
    let splat_grads = blend_backward(job, &out.splats, &out.tile_lists, &out.pixels, grad_color);
    let zero = SplatGrad::default();
    let per_splat: Vec<Option<(usize, PrimitiveGrad, DeformGrad)>> = out
        .splats
        .par_iter()
        .zip(&out.caches)
        .zip(&splat_grads)
        .map(|((splat, cache), g)| {
            if *g == zero {
                return None;
            }
            let (p, d) = preprocess_backward(
                job.scene,
                splat.index,
                job.camera,
                job.time,
                &job.filter,
                cache,
                g,
            );
            Some((splat.index, p, d))
        })
        .collect();
    let mut grad = SceneGrad::zeros(job.scene);
    for (k, p, d) in per_splat.into_iter().flatten() {
        grad.add_deform(k, &d);
        let slot = &mut grad.primitives[k];
        slot.opacity += p.opacity;
        slot.color += p.color;
    }
    grad.check_finite(job.scene)?;
    Ok(grad)
}

/// Adds `weight ·` the scale-loss gradient at time `t`.
pub fn scale_loss_backward(
    scene: &Scene,
    t: f64,
    loss: &ScaleLoss,
    weight: f64,
    grad: &mut SceneGrad,
) {
    if weight == 0.0 {
        return;
    }
    for (k, g) in loss.grad.iter().enumerate() {
        if *g == Vector3::zeros() {
            continue;
        }
        let state = scene.deformed(k, t);
        let d = deform_vjp(
            &scene.primitives[k],
            &scene.tracks[k],
            t,
            &state,
            Vector3::zeros(),
            Quat::new(0.0, 0.0, 0.0, 0.0),
            g * weight,
        );
        grad.add_deform(k, &d);
    }
}
