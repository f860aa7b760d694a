//! Keyframed per-primitive deformation: `p(t) = p + Δp(t)`,
//! `r(t) = Δr(t) ⊗ r`, `s(t) = max(s + Δs(t), floor)`.
//!
//! Δp and Δs are interpolated linearly between the keyframes bracketing `t`,
//! Δr spherically. Queries outside the keyframe range clamp to the nearest
//! end keyframe.

use nalgebra::Vector3;

use crate::geometry::{GaussianPrimitive, Quat};
use crate::{Error, Result};

/// Lower bound applied to every deformed scale axis (world units).
pub const SCALE_FLOOR: f64 = 1e-4;

/// Below this `1 - cos θ` the slerp weights switch to their series expansion.
const SLERP_SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub time: f64,
    pub delta_position: Vector3<f64>,
    pub delta_rotation: Quat,
    pub delta_scale: Vector3<f64>,
}

impl Keyframe {
    pub fn zero(time: f64) -> Self {
        Keyframe {
            time,
            delta_position: Vector3::zeros(),
            delta_rotation: Quat::IDENTITY,
            delta_scale: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeformationTrack {
    keyframes: Vec<Keyframe>,
}

/// Primitive geometry at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformedState {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    /// Axes where `s + Δs(t)` fell below [`SCALE_FLOOR`].
    pub floored: [bool; 3],
}

/// Keyframe pair bracketing a query time and the blend weight of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lower: usize,
    pub upper: usize,
    pub weight: f64,
}

/// Gradient with respect to one keyframe's deltas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeGrad {
    pub delta_position: Vector3<f64>,
    pub delta_rotation: Quat,
    pub delta_scale: Vector3<f64>,
}

impl Default for KeyframeGrad {
    fn default() -> Self {
        KeyframeGrad {
            delta_position: Vector3::zeros(),
            delta_rotation: Quat::new(0.0, 0.0, 0.0, 0.0),
            delta_scale: Vector3::zeros(),
        }
    }
}

impl KeyframeGrad {
    pub fn accumulate(&mut self, o: &KeyframeGrad) {
        self.delta_position += o.delta_position;
        self.delta_rotation = self.delta_rotation.add(o.delta_rotation);
        self.delta_scale += o.delta_scale;
    }
}

/// Gradient of a deformation with respect to the base primitive and the
/// (at most two) keyframes it read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformGrad {
    pub position: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub keyframes: [Option<(usize, KeyframeGrad)>; 2],
}

impl DeformationTrack {
    pub fn new(keyframes: Vec<Keyframe>) -> Result<Self> {
        for (i, k) in keyframes.iter().enumerate() {
            if !(0.0..=1.0).contains(&k.time) {
                return Err(Error::InvalidParameter(format!(
                    "keyframe time {} outside [0, 1]",
                    k.time
                )));
            }
            if i > 0 && !(k.time > keyframes[i - 1].time) {
                return Err(Error::InvalidParameter(
                    "keyframe times must be strictly increasing".into(),
                ));
            }
            if k.delta_rotation.norm() == 0.0 {
                return Err(Error::InvalidParameter(
                    "keyframe rotation delta is the zero quaternion".into(),
                ));
            }
        }
        Ok(DeformationTrack { keyframes })
    }

    /// Identity track with one zero keyframe per listed time.
    pub fn zeros(times: &[f64]) -> Result<Self> {
        DeformationTrack::new(times.iter().map(|&t| Keyframe::zero(t)).collect())
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [Keyframe] {
        &mut self.keyframes
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn bracket(&self, t: f64) -> Option<Bracket> {
        let n = self.keyframes.len();
        if n == 0 {
            return None;
        }
        let first = &self.keyframes[0];
        if n == 1 || t <= first.time {
            return Some(Bracket {
                lower: 0,
                upper: 0,
                weight: 0.0,
            });
        }
        if t >= self.keyframes[n - 1].time {
            return Some(Bracket {
                lower: n - 1,
                upper: n - 1,
                weight: 0.0,
            });
        }
        // First keyframe strictly after t.
        let upper = self.keyframes.partition_point(|k| k.time <= t);
        let lower = upper - 1;
        let (t0, t1) = (self.keyframes[lower].time, self.keyframes[upper].time);
        Some(Bracket {
            lower,
            upper,
            weight: (t - t0) / (t1 - t0),
        })
    }

    /// Interpolated `(Δp, Δr, Δs)` at `t`; identity for an empty track.
    pub fn deltas_at(&self, t: f64) -> (Vector3<f64>, Quat, Vector3<f64>) {
        match self.bracket(t) {
            None => (Vector3::zeros(), Quat::IDENTITY, Vector3::zeros()),
            Some(b) => {
                let (k0, k1, u) = (&self.keyframes[b.lower], &self.keyframes[b.upper], b.weight);
                let dp = k0.delta_position * (1.0 - u) + k1.delta_position * u;
                let ds = k0.delta_scale * (1.0 - u) + k1.delta_scale * u;
                let dr = if b.lower == b.upper {
                    k0.delta_rotation.normalized()
                } else {
                    slerp(k0.delta_rotation, k1.delta_rotation, u)
                };
                (dp, dr, ds)
            }
        }
    }

    /// Renormalizes every rotation delta.
    pub fn normalize_rotations(&mut self) {
        for k in &mut self.keyframes {
            k.delta_rotation = k.delta_rotation.normalized();
        }
    }
}

/// Deformed geometry of `g` at normalized time `t`. Opacity and color do
/// not change over time.
pub fn deform(g: &GaussianPrimitive, track: &DeformationTrack, t: f64) -> DeformedState {
    let (dp, dr, ds) = track.deltas_at(t);
    let raw = g.scale + ds;
    let floored = [
        raw.x < SCALE_FLOOR,
        raw.y < SCALE_FLOOR,
        raw.z < SCALE_FLOOR,
    ];
    DeformedState {
        position: g.position + dp,
        rotation: dr.mul(g.rotation.normalized()),
        scale: raw.map(|v| v.max(SCALE_FLOOR)),
        floored,
    }
}

/// Per-axis `s_t² / s²`.
pub fn scale_ratio(g: &GaussianPrimitive, track: &DeformationTrack, t: f64) -> Vector3<f64> {
    let st = deform(g, track, t).scale;
    st.component_mul(&st)
        .component_div(&g.scale.component_mul(&g.scale))
}

/// Reverse pass of [`deform`] given gradients on the deformed position,
/// rotation and scale.
pub fn deform_vjp(
    g: &GaussianPrimitive,
    track: &DeformationTrack,
    t: f64,
    state: &DeformedState,
    grad_position: Vector3<f64>,
    grad_rotation: Quat,
    grad_scale: Vector3<f64>,
) -> DeformGrad {
    let mut gs = grad_scale;
    for a in 0..3 {
        if state.floored[a] {
            gs[a] = 0.0;
        }
    }
    let (_, dr, _) = track.deltas_at(t);
    let base_rot = g.rotation.normalized();
    let (g_dr, g_base_rot) = Quat::mul_vjp(dr, base_rot, grad_rotation);
    let mut out = DeformGrad {
        position: grad_position,
        rotation: Quat::normalize_vjp(g.rotation, g_base_rot),
        scale: gs,
        keyframes: [None, None],
    };
    let Some(b) = track.bracket(t) else {
        return out;
    };
    let k0 = &track.keyframes[b.lower];
    if b.lower == b.upper {
        out.keyframes[0] = Some((
            b.lower,
            KeyframeGrad {
                delta_position: grad_position,
                delta_rotation: Quat::normalize_vjp(k0.delta_rotation, g_dr),
                delta_scale: gs,
            },
        ));
        return out;
    }
    let k1 = &track.keyframes[b.upper];
    let u = b.weight;
    let (ga, gb) = slerp_vjp(k0.delta_rotation, k1.delta_rotation, u, g_dr);
    out.keyframes[0] = Some((
        b.lower,
        KeyframeGrad {
            delta_position: grad_position * (1.0 - u),
            delta_rotation: ga,
            delta_scale: gs * (1.0 - u),
        },
    ));
    out.keyframes[1] = Some((
        b.upper,
        KeyframeGrad {
            delta_position: grad_position * u,
            delta_rotation: gb,
            delta_scale: gs * u,
        },
    ));
    out
}

/// Slerp weights `(k0, k1)` and their derivatives with respect to `cos θ`.
fn slerp_weights(c: f64, u: f64) -> (f64, f64, f64, f64) {
    if 1.0 - c < SLERP_SERIES_THRESHOLD {
        // k(θ) ≈ w (1 - (w² - 1) θ² / 6) with θ² ≈ 2 (1 - c).
        let e = 1.0 - c;
        let w0 = 1.0 - u;
        let k0 = w0 * (1.0 - (w0 * w0 - 1.0) * e / 3.0);
        let k1 = u * (1.0 - (u * u - 1.0) * e / 3.0);
        return (k0, k1, w0 * (w0 * w0 - 1.0) / 3.0, u * (u * u - 1.0) / 3.0);
    }
    let theta = c.clamp(-1.0, 1.0).acos();
    let s = theta.sin();
    let (a0, a1) = ((1.0 - u) * theta, u * theta);
    let k0 = a0.sin() / s;
    let k1 = a1.sin() / s;
    // dk/dθ, then dθ/dc = -1/sin θ.
    let dk0 = ((1.0 - u) * a0.cos() * s - a0.sin() * theta.cos()) / (s * s);
    let dk1 = (u * a1.cos() * s - a1.sin() * theta.cos()) / (s * s);
    (k0, k1, -dk0 / s, -dk1 / s)
}

/// Spherical interpolation between the normalized inputs along the shorter arc.
pub fn slerp(a: Quat, b: Quat, u: f64) -> Quat {
    let a = a.normalized();
    let mut b = b.normalized();
    let mut c = a.dot(b);
    if c < 0.0 {
        b = b.scaled(-1.0);
        c = -c;
    }
    let (k0, k1, _, _) = slerp_weights(c.min(1.0), u);
    a.scaled(k0).add(b.scaled(k1))
}

/// Reverse pass of [`slerp`] with respect to the raw (unnormalized) inputs.
pub fn slerp_vjp(a_raw: Quat, b_raw: Quat, u: f64, g: Quat) -> (Quat, Quat) {
    let a = a_raw.normalized();
    let mut b = b_raw.normalized();
    let mut c = a.dot(b);
    let flipped = c < 0.0;
    if flipped {
        b = b.scaled(-1.0);
        c = -c;
    }
    let clipped = c > 1.0;
    let (k0, k1, dk0, dk1) = slerp_weights(c.min(1.0), u);
    let gc = if clipped {
        0.0
    } else {
        g.dot(a) * dk0 + g.dot(b) * dk1
    };
    let ga = g.scaled(k0).add(b.scaled(gc));
    let mut gb = g.scaled(k1).add(a.scaled(gc));
    if flipped {
        gb = gb.scaled(-1.0);
    }
    (
        Quat::normalize_vjp(a_raw, ga),
        Quat::normalize_vjp(b_raw, gb),
    )
}
