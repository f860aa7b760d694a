use crate::deformation::{deform, DeformationTrack, DeformedState};
use crate::geometry::GaussianPrimitive;
use crate::{Error, Result};

/// Primitives plus one deformation track per primitive (parallel vectors).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub primitives: Vec<GaussianPrimitive>,
    pub tracks: Vec<DeformationTrack>,
}

impl Scene {
    pub fn new(primitives: Vec<GaussianPrimitive>, tracks: Vec<DeformationTrack>) -> Result<Self> {
        if primitives.len() != tracks.len() {
            return Err(Error::InvalidParameter(format!(
                "{} primitives but {} deformation tracks",
                primitives.len(),
                tracks.len()
            )));
        }
        Ok(Scene { primitives, tracks })
    }

    /// Scene whose primitives never move.
    pub fn from_static(primitives: Vec<GaussianPrimitive>) -> Self {
        let tracks = vec![DeformationTrack::default(); primitives.len()];
        Scene { primitives, tracks }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn deformed(&self, k: usize, t: f64) -> DeformedState {
        deform(&self.primitives[k], &self.tracks[k], t)
    }

    /// Median of the tracked minimum sampling intervals; used for primitives
    /// that no camera has ever seen.
    pub fn median_sampling_interval(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .primitives
            .iter()
            .filter_map(|p| p.min_sampling_interval)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.primitives {
            p.check_finite()?;
        }
        for (p, track) in self.primitives.iter().zip(&self.tracks) {
            for k in track.keyframes() {
                let finite = k
                    .delta_position
                    .iter()
                    .chain(k.delta_scale.iter())
                    .all(|v| v.is_finite())
                    && k.delta_rotation.is_finite();
                if !finite {
                    return Err(Error::NonFinitePrimitive {
                        id: p.id,
                        field: "deformation keyframe",
                    });
                }
            }
        }
        Ok(())
    }
}
