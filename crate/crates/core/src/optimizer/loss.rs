use nalgebra::Vector3;

use crate::filters::FilterConfig;
use crate::metrics::ssim_core;
use crate::rasterizer::RenderedImage;
use crate::scene::Scene;
use crate::Result;

/// Weight of the structural term in the color loss.
pub const LAMBDA_SSIM: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ColorLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    /// d(value)/d(rendered color), interleaved RGB.
    pub grad: Vec<f64>,
}

/// `(1 - λ) · L1 + λ · (1 - SSIM)` with λ = 0.2. SSIM here accepts any image
/// size.
pub fn color_loss(rendered: &RenderedImage, target: &RenderedImage) -> Result<ColorLoss> {
    rendered.same_size(target)?;
    let n = rendered.color.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut grad = Vec::with_capacity(rendered.color.len());
    for (r, t) in rendered.color.iter().zip(&target.color) {
        let d = r - t;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push((1.0 - LAMBDA_SSIM) * sign / n);
    }
    l1 /= n;
    let (ssim, ssim_grad) = ssim_core(rendered, target, true);
    for (g, s) in grad.iter_mut().zip(ssim_grad.unwrap_or_default()) {
        *g -= LAMBDA_SSIM * s;
    }
    let value = (1.0 - LAMBDA_SSIM) * l1 + LAMBDA_SSIM * (1.0 - ssim);
    Ok(ColorLoss {
        value,
        l1,
        ssim,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleLossMode {
    Sum,
    /// Divided by the number of primitives with at least one active axis.
    Mean,
}

impl ScaleLossMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ScaleLossMode::Sum),
            "mean" => Ok(ScaleLossMode::Mean),
            other => Err(crate::Error::InvalidParameter(format!(
                "unknown scale loss mode '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleLossMode::Sum => "sum",
            ScaleLossMode::Mean => "mean",
        }
    }
}

/// Open interval of squared scales in which the scale penalty is active:
/// `(ρ_thre · σ_s · T̂², ρ_min · σ_s · T̂²)`.
pub fn scale_band(interval: f64, filter: &FilterConfig) -> (f64, f64) {
    let unit = filter.sigma_s * interval * interval;
    (filter.rho_thre * unit, filter.rho_min * unit)
}

/// Whether a squared scale lies strictly inside the band.
pub fn band_active(scale_sq: f64, interval: f64, filter: &FilterConfig) -> bool {
    let (lo, hi) = scale_band(interval, filter);
    scale_sq > lo && scale_sq < hi
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLoss {
    pub value: f64,
    pub active_primitives: usize,
    /// d(value)/d(s_t) per primitive.
    pub grad: Vec<Vector3<f64>>,
}

/// `Σ (ρ_min σ_s T̂² − s_t²)` over primitive axes inside the band, at time
/// `t`. Primitives without a tracked interval use the scene median; with no
/// tracked interval at all the loss is zero.
pub fn scale_loss(scene: &Scene, t: f64, filter: &FilterConfig, mode: ScaleLossMode) -> ScaleLoss {
    let fallback = scene.median_sampling_interval();
    let mut value = 0.0;
    let mut active_primitives = 0;
    let mut grad = vec![Vector3::zeros(); scene.len()];
    for (k, g) in scene.primitives.iter().enumerate() {
        let Some(interval) = g.min_sampling_interval.or(fallback) else {
            continue;
        };
        let state = scene.deformed(k, t);
        let (_, hi) = scale_band(interval, filter);
        let mut any = false;
        for a in 0..3 {
            let s = state.scale[a];
            if band_active(s * s, interval, filter) {
                value += hi - s * s;
                grad[k][a] = -2.0 * s;
                any = true;
            }
        }
        if any {
            active_primitives += 1;
        }
    }
    if mode == ScaleLossMode::Mean && active_primitives > 0 {
        let k = active_primitives as f64;
        value /= k;
        grad.iter_mut().for_each(|g| *g /= k);
    }
    ScaleLoss {
        value,
        active_primitives,
        grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::FilterKind;
    use crate::geometry::GaussianPrimitive;
    use crate::metrics::ssim;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> RenderedImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RenderedImage::from_rgb(
            w,
            h,
            (0..3 * w * h).map(|_| rng.random_range(0.1..0.9)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = random_image(12, 12, 1);
        let l = color_loss(&a, &a).unwrap();
        assert!(l.value.abs() < 1e-15);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn constant_offset_example() {
        let t = random_image(16, 16, 2);
        let r = RenderedImage::from_rgb(16, 16, t.color.iter().map(|v| v + 0.1).collect()).unwrap();
        let l = color_loss(&r, &t).unwrap();
        assert!((l.l1 * (1.0 - LAMBDA_SSIM) - 0.08).abs() < 1e-12);
        let s = ssim(&r, &t).unwrap();
        assert!((l.value - (0.08 + 0.2 * (1.0 - s))).abs() < 1e-12);
        assert!(color_loss(&r, &random_image(16, 15, 3)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_on_8x8() {
        let t = random_image(8, 8, 4);
        let r = random_image(8, 8, 5);
        let l = color_loss(&r, &t).unwrap();
        let h = 1e-6;
        for i in 0..r.color.len() {
            let mut p = r.clone();
            p.color[i] += h;
            let mut m = r.clone();
            m.color[i] -= h;
            let fd =
                (color_loss(&p, &t).unwrap().value - color_loss(&m, &t).unwrap().value) / (2.0 * h);
            let err = (fd - l.grad[i]).abs() / fd.abs().max(l.grad[i].abs());
            assert!(err <= 1e-4, "component {i}: {fd} vs {}", l.grad[i]);
        }
    }

    fn one_primitive(scale: f64, interval: f64) -> Scene {
        let mut g = GaussianPrimitive::new(
            0,
            Vector3::zeros(),
            Vector3::new(scale, 1.0, 1.0),
            0.5,
            Vector3::zeros(),
        );
        g.min_sampling_interval = Some(interval);
        Scene::from_static(vec![g])
    }

    #[test]
    fn scale_loss_examples() {
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        let interval = 0.01;
        let hi = cfg.rho_min * cfg.sigma_s * interval * interval;
        // Everything above the band.
        let l = scale_loss(&one_primitive(1.0, interval), 0.0, &cfg, ScaleLossMode::Sum);
        assert_eq!((l.value, l.active_primitives), (0.0, 0));
        // s² = 0.5 hi.
        let s = (0.5 * hi).sqrt();
        let l = scale_loss(&one_primitive(s, interval), 0.0, &cfg, ScaleLossMode::Sum);
        assert!((l.value - 0.5 * hi).abs() < 1e-18);
        assert_eq!(l.active_primitives, 1);
        assert!((l.grad[0].x + 2.0 * s).abs() < 1e-15);
        // Below the threshold band.
        let lo = cfg.rho_thre * cfg.sigma_s * interval * interval;
        let l = scale_loss(
            &one_primitive((0.5 * lo).sqrt(), interval),
            0.0,
            &cfg,
            ScaleLossMode::Sum,
        );
        assert_eq!(l.active_primitives, 0);
    }

    #[test]
    fn mean_mode_divides_by_active_count() {
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        let interval = 0.01;
        let hi = cfg.rho_min * cfg.sigma_s * interval * interval;
        let mut scene = one_primitive((0.5 * hi).sqrt(), interval);
        let mut g = scene.primitives[0].clone();
        g.id = 1;
        g.scale.x = (0.75 * hi).sqrt();
        scene = Scene::from_static(vec![scene.primitives[0].clone(), g]);
        let sum = scale_loss(&scene, 0.0, &cfg, ScaleLossMode::Sum);
        let mean = scale_loss(&scene, 0.0, &cfg, ScaleLossMode::Mean);
        assert_eq!(sum.active_primitives, 2);
        assert!((mean.value - sum.value / 2.0).abs() < 1e-18);
        assert!((sum.value - 0.75 * hi).abs() < 1e-15);
    }
}
