//! Image-quality metrics: PSNR, windowed SSIM, high-band spectral energy and
//! the coverage-inflation ratio, plus the CSV table writer.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::filters::FilterConfig;
use crate::geometry::CameraModel;
use crate::rasterizer::{render, RenderJob, RenderedImage};
use crate::scene::Scene;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Accumulated alpha above which a pixel counts as covered.
pub const COVERAGE_ALPHA: f64 = 0.01;

pub const CSV_HEADER: &str = "scene,filter,scale_factor,psnr,ssim,highband,coverage";

/// `10 log10(1 / MSE)` over all channels; `inf` for identical images.
pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    a.same_size(b)?;
    let n = a.color.len().max(1) as f64;
    let mse = a
        .color
        .iter()
        .zip(&b.color)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "same"-size convolution with zero padding. The kernel is
/// symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &RenderedImage, c: usize) -> Vec<f64> {
    img.color.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, optionally with its gradient with
/// respect to `a` (interleaved RGB like the image). Works for any size.
pub(crate) fn ssim_core(
    a: &RenderedImage,
    b: &RenderedImage,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let taps = gaussian_window();
    let total = (3 * n) as f64;
    let mut sum = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; 3 * n]);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &taps);
        let my = blur(&y, w, h, &taps);
        let exx = blur(&xx, w, h, &taps);
        let eyy = blur(&yy, w, h, &taps);
        let exy = blur(&xy, w, h, &taps);
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            if want_grad {
                let ds_dux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 / (b1 * b2);
                d_mx[i] = (ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy) / total;
                d_exx[i] = ds_dsxx / total;
                d_exy[i] = ds_dsxy / total;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = blur(&d_mx, w, h, &taps);
            let ge = blur(&d_exx, w, h, &taps);
            let gxy = blur(&d_exy, w, h, &taps);
            for i in 0..n {
                g[3 * i + c] = gm[i] + 2.0 * x[i] * ge[i] + y[i] * gxy[i];
            }
        }
    }
    (sum / total, grad)
}

/// Windowed SSIM (11x11 Gaussian, σ = 1.5), mean over pixels and channels.
pub fn ssim(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    a.same_size(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width,
            height: a.height,
            window: SSIM_WINDOW,
        });
    }
    Ok(ssim_core(a, b, false).0)
}

/// Fraction of spectral energy (all channels, DC included in the total)
/// at radial frequencies above `(1 - band_fraction)` of Nyquist. Returns 0
/// for an all-zero image.
pub fn highband_energy(img: &RenderedImage, band_fraction: f64) -> Result<f64> {
    if !(band_fraction > 0.0 && band_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "band fraction must lie in (0, 1), got {band_fraction}"
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let freq = |k: usize, n: usize| -> f64 {
        let k = k as f64;
        let n_f = n as f64;
        if k <= n_f / 2.0 {
            k / n_f
        } else {
            (k - n_f) / n_f
        }
    };
    let cutoff = (1.0 - band_fraction) * 0.5;
    let (mut high, mut total) = (0.0, 0.0);
    for c in 0..3 {
        let mut buf: Vec<Complex<f64>> = channel(img, c)
            .into_iter()
            .map(|v| Complex::new(v, 0.0))
            .collect();
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                let e = col[y].norm_sqr();
                total += e;
                let (fx, fy) = (freq(x, w), freq(y, h));
                if (fx * fx + fy * fy).sqrt() > cutoff {
                    high += e;
                }
            }
        }
    }
    Ok(if total > 0.0 { high / total } else { 0.0 })
}

/// Number of pixels whose accumulated alpha exceeds [`COVERAGE_ALPHA`].
pub fn coverage(img: &RenderedImage) -> usize {
    img.transmittance
        .iter()
        .filter(|&&t| 1.0 - t > COVERAGE_ALPHA)
        .count()
}

/// Ratio of covered pixel counts between renders under `filter_a` and
/// `filter_b`; `None` when the second render covers nothing.
pub fn coverage_inflation(
    scene: &Scene,
    camera: &CameraModel,
    t: f64,
    filter_a: &FilterConfig,
    filter_b: &FilterConfig,
) -> Result<Option<f64>> {
    let a = render(&RenderJob::new(scene, camera, t, *filter_a))?.0;
    let b = render(&RenderJob::new(scene, camera, t, *filter_b))?.0;
    Ok(coverage_ratio(&a, &b))
}

pub fn coverage_ratio(a: &RenderedImage, b: &RenderedImage) -> Option<f64> {
    let den = coverage(b);
    (den > 0).then(|| coverage(a) as f64 / den as f64)
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scene: String,
    pub filter: String,
    pub scale_factor: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub highband: f64,
    pub coverage: usize,
}

impl MetricsRow {
    /// Computes every metric of `rendered` against `reference`.
    pub fn measure(
        scene: &str,
        filter: &str,
        scale_factor: f64,
        rendered: &RenderedImage,
        reference: &RenderedImage,
    ) -> Result<Self> {
        rendered.same_size(reference)?;
        let ssim = if rendered.width >= SSIM_WINDOW && rendered.height >= SSIM_WINDOW {
            ssim(rendered, reference)?
        } else {
            f64::NAN
        };
        Ok(MetricsRow {
            scene: scene.to_string(),
            filter: filter.to_string(),
            scale_factor,
            psnr: psnr(rendered, reference)?,
            ssim,
            highband: highband_energy(rendered, DEFAULT_BAND_FRACTION)?,
            coverage: coverage(rendered),
        })
    }
}

/// Top quartile of the spectrum.
pub const DEFAULT_BAND_FRACTION: f64 = 0.25;

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scene, r.filter, r.scale_factor, r.psnr, r.ssim, r.highband, r.coverage
        );
    }
    out
}

/// Arithmetic mean; an infinite entry makes the mean infinite.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Averages images of equal size.
pub fn average_images(images: &[RenderedImage]) -> Result<RenderedImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidParameter("no images to average".into()))?;
    let mut out = RenderedImage::filled(first.width, first.height, Vector3::zeros());
    out.transmittance.iter_mut().for_each(|t| *t = 0.0);
    for img in images {
        first.same_size(img)?;
        for (o, v) in out.color.iter_mut().zip(&img.color) {
            *o += v;
        }
        for (o, v) in out.transmittance.iter_mut().zip(&img.transmittance) {
            *o += v;
        }
    }
    let k = images.len() as f64;
    out.color.iter_mut().for_each(|v| *v /= k);
    out.transmittance.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> RenderedImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        RenderedImage::from_rgb(w, h, (0..3 * w * h).map(|_| rng.random()).collect()).unwrap()
    }

    fn constant(w: usize, h: usize, v: f64) -> RenderedImage {
        RenderedImage::from_rgb(w, h, vec![v; 3 * w * h]).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(
            psnr(&constant(4, 4, 0.0), &constant(4, 4, 1.0)).unwrap(),
            0.0
        );
        let p = psnr(&constant(4, 4, 0.3), &constant(4, 4, 0.4)).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
        assert!(psnr(&constant(4, 4, 0.3), &constant(4, 5, 0.3)).is_err());
        let b = random_image(8, 8, 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv =
            RenderedImage::from_rgb(24, 20, a.color.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        let b = random_image(24, 20, 4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        assert!(matches!(
            ssim(&constant(8, 30, 0.5), &constant(8, 30, 0.5)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn ssim_of_constant_images_matches_closed_form() {
        // Inside the image the window sums to one: μ = v, σ = 0. Near the
        // border zero padding scales both means by the clipped window mass m.
        let (w, h, u, v) = (16, 16, 0.4, 0.7);
        let taps = gaussian_window();
        let r = SSIM_WINDOW as isize / 2;
        let mass = |i: usize, n: usize| -> f64 {
            taps.iter()
                .enumerate()
                .filter(|(k, _)| {
                    let j = i as isize + *k as isize - r;
                    j >= 0 && j < n as isize
                })
                .map(|(_, t)| t)
                .sum()
        };
        let mut expected = 0.0;
        for y in 0..h {
            for x in 0..w {
                let m = mass(x, w) * mass(y, h);
                let (mx, my) = (m * u, m * v);
                let (sxx, syy, sxy) = (
                    m * u * u - mx * mx,
                    m * v * v - my * my,
                    m * u * v - mx * my,
                );
                expected += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
            }
        }
        expected /= (w * h) as f64;
        let got = ssim(&constant(w, h, u), &constant(w, h, v)).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(9, 7, 5);
        let b = random_image(9, 7, 6);
        let (_, g) = ssim_core(&a, &b, true);
        let g = g.unwrap();
        let h = 1e-6;
        for i in (0..a.color.len()).step_by(5) {
            let mut p = a.clone();
            p.color[i] += h;
            let mut m = a.clone();
            m.color[i] -= h;
            let fd = (ssim_core(&p, &b, false).0 - ssim_core(&m, &b, false).0) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn highband_examples() {
        assert_eq!(highband_energy(&constant(16, 16, 0.7), 0.25).unwrap(), 0.0);
        assert_eq!(highband_energy(&constant(16, 16, 0.0), 0.25).unwrap(), 0.0);
        // An impulse has a flat spectrum: the result is the fraction of bins
        // in the band, counted here independently.
        let (w, h) = (32, 24);
        let mut imp = constant(w, h, 0.0);
        imp.color[3 * (5 * w + 7)] = 1.0;
        let mut inside = 0usize;
        for y in 0..h {
            for x in 0..w {
                let fx = if x <= w / 2 {
                    x as f64
                } else {
                    x as f64 - w as f64
                } / w as f64;
                let fy = if y <= h / 2 {
                    y as f64
                } else {
                    y as f64 - h as f64
                } / h as f64;
                if fx.hypot(fy) > 0.75 * 0.5 {
                    inside += 1;
                }
            }
        }
        let expected = inside as f64 / (w * h) as f64;
        assert!((highband_energy(&imp, 0.25).unwrap() - expected).abs() < 1e-12);
        assert!(highband_energy(&imp, 0.0).is_err());
    }

    #[test]
    fn lowpass_reduces_highband() {
        let noise = random_image(32, 32, 7);
        let taps = gaussian_window();
        let mut smooth = noise.clone();
        for c in 0..3 {
            let b = blur(&channel(&noise, c), 32, 32, &taps);
            for (i, v) in b.into_iter().enumerate() {
                smooth.color[3 * i + c] = v;
            }
        }
        assert!(highband_energy(&smooth, 0.25).unwrap() < highband_energy(&noise, 0.25).unwrap());
    }

    #[test]
    fn coverage_examples() {
        use crate::filters::FilterKind;
        use crate::geometry::GaussianPrimitive;
        let cam = CameraModel::look_at(
            Vector3::new(0.0, -4.0, 0.0),
            Vector3::zeros(),
            Vector3::z(),
            40.0,
            32,
            32,
            0,
        )
        .unwrap();
        let empty = Scene::default();
        let mip = FilterConfig::new(FilterKind::Mip2d);
        let dil = FilterConfig::new(FilterKind::Dilation2d);
        assert_eq!(
            coverage_inflation(&empty, &cam, 0.0, &mip, &mip).unwrap(),
            None
        );
        let prims = (0..20)
            .map(|i| {
                let x = -0.8 + 0.08 * i as f64;
                GaussianPrimitive::new(
                    i,
                    Vector3::new(x, 0.0, 0.3 * (i % 3) as f64 - 0.3),
                    Vector3::repeat(0.02),
                    0.9,
                    Vector3::new(1.0, 1.0, 1.0),
                )
            })
            .collect();
        let scene = Scene::from_static(prims);
        assert_eq!(
            coverage_inflation(&scene, &cam, 0.0, &mip, &mip).unwrap(),
            Some(1.0)
        );
        let small = cam.scaled(0.125).unwrap();
        let ratio = coverage_inflation(&scene, &small, 0.0, &dil, &mip)
            .unwrap()
            .unwrap_or(f64::INFINITY);
        assert!(ratio > 1.0);
    }

    #[test]
    fn csv_has_expected_columns() {
        let row = MetricsRow {
            scene: "s".into(),
            filter: "mip2d".into(),
            scale_factor: 0.5,
            psnr: 30.0,
            ssim: 0.9,
            highband: 0.01,
            coverage: 12,
        };
        let csv = to_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scene,filter,scale_factor,psnr,ssim,highband,coverage"
        );
        assert_eq!(lines.next().unwrap(), "s,mip2d,0.5,30,0.9,0.01,12");
    }
}
