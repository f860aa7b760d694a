//! Low-pass filters applied to Gaussians before blending.
//!
//! Two stages exist:
//!
//! * an object-space stage (`smoothing3d`, `adaptive4d`) that widens the 3D
//!   covariance by an amount tied to the primitive's maximum sampling
//!   frequency ν̂ and attenuates opacity by the determinant ratio, and
//! * a screen-space stage (`dilation2d`, `mip2d`) acting on the projected
//!   2x2 covariance in pixel units.
//!
//! [`FilterKind::Smoothing3d`] and [`FilterKind::Adaptive4d`] pair their
//! object-space stage with the 2D mip filter.
//!
//! Both object-space filters are evaluated in the primitive's own rotated
//! frame: the added variance goes onto `S_t²` before recomposing with `R_t`.
//! For the isotropic smoothing filter this is identical to adding `c·I` in
//! world space; for the adaptive filter it lets every axis carry its own
//! dilation.

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::geometry::{covariance_from_axes, Covariance2D, Quat};
use crate::{Error, Result};

/// Floor applied to determinants before taking ratios.
pub const DETERMINANT_FLOOR: f64 = 1e-30;

pub const DEFAULT_SIGMA_S: f64 = 0.2;
pub const DEFAULT_RHO_MIN: f64 = 0.2;
pub const DEFAULT_RHO_MAX: f64 = 5.0;
pub const DEFAULT_EPSILON: f64 = 1e-4;
/// ρ_thre for the monocular scene profile.
pub const RHO_THRE_MONOCULAR: f64 = 0.05;
/// ρ_thre for the multi-view scene profile.
pub const RHO_THRE_MULTIVIEW: f64 = 5e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    None,
    Dilation2d,
    Mip2d,
    Smoothing3d,
    Adaptive4d,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::None,
        FilterKind::Dilation2d,
        FilterKind::Mip2d,
        FilterKind::Smoothing3d,
        FilterKind::Adaptive4d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::None => "none",
            FilterKind::Dilation2d => "dilation2d",
            FilterKind::Mip2d => "mip2d",
            FilterKind::Smoothing3d => "smoothing3d",
            FilterKind::Adaptive4d => "adaptive4d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown filter kind '{s}'")))
    }

    /// Whether this kind needs per-primitive sampling intervals.
    pub fn uses_frequency(self) -> bool {
        matches!(self, FilterKind::Smoothing3d | FilterKind::Adaptive4d)
    }

    pub fn screen_filter(self) -> ScreenFilter {
        match self {
            FilterKind::None => ScreenFilter::None,
            FilterKind::Dilation2d => ScreenFilter::Dilation,
            FilterKind::Mip2d | FilterKind::Smoothing3d | FilterKind::Adaptive4d => {
                ScreenFilter::Mip
            }
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScreenFilter {
    None,
    Dilation,
    Mip,
}

/// How the adaptive filter turns per-axis ratios into dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveMode {
    /// One ρ_adapt and mask decision per axis, applied in the primitive frame.
    PerAxis,
    /// A single scalar: ρ_adapt from the geometric mean of the axis ratios,
    /// masked when the smallest axis falls below the threshold.
    Isotropic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub sigma_s: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_thre: f64,
    pub epsilon: f64,
    /// Training sampling rate divided by the current rendering rate: 1 while
    /// training, 8 for a 1/8-resolution render.
    pub render_rate_ratio: f64,
    pub adaptive_mode: AdaptiveMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig::new(FilterKind::Adaptive4d)
    }
}

impl FilterConfig {
    pub fn new(kind: FilterKind) -> Self {
        FilterConfig {
            kind,
            sigma_s: DEFAULT_SIGMA_S,
            rho_min: DEFAULT_RHO_MIN,
            rho_max: DEFAULT_RHO_MAX,
            rho_thre: RHO_THRE_MONOCULAR,
            epsilon: DEFAULT_EPSILON,
            render_rate_ratio: 1.0,
            adaptive_mode: AdaptiveMode::PerAxis,
        }
    }

    pub fn with_kind(mut self, kind: FilterKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.sigma_s > 0.0) {
            return bad(format!("sigma_s must be positive, got {}", self.sigma_s));
        }
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho_max) {
            return bad(format!(
                "need 0 < rho_min <= rho_max, got {} and {}",
                self.rho_min, self.rho_max
            ));
        }
        if !(self.rho_thre >= 0.0) {
            return bad(format!(
                "rho_thre must be non-negative, got {}",
                self.rho_thre
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < self.rho_min) {
            return bad(format!(
                "epsilon must lie in (0, rho_min), got {}",
                self.epsilon
            ));
        }
        if !(self.render_rate_ratio > 0.0) {
            return bad(format!(
                "render_rate_ratio must be positive, got {}",
                self.render_rate_ratio
            ));
        }
        Ok(())
    }

    /// Configuration for rendering at a different sampling rate. When the
    /// rate drops (`ratio > 1`) ρ_min is raised by [`rescale_rho_min`];
    /// otherwise it is left alone.
    pub fn for_render_rate(&self, ratio: f64) -> Self {
        let mut c = *self;
        c.render_rate_ratio = ratio;
        if ratio > 1.0 {
            c.rho_min = rescale_rho_min(self.rho_min, ratio);
            c.rho_max = c.rho_max.max(c.rho_min);
        }
        c
    }
}

/// `min(1, ρ_min · ratio²)`.
pub fn rescale_rho_min(rho_min: f64, ratio: f64) -> f64 {
    (rho_min * ratio * ratio).min(1.0)
}

/// Screen-space filter output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilteredGaussian2D {
    pub covariance: Matrix2<f64>,
    /// Opacity attenuation in (0, 1].
    pub normalization: f64,
    pub depth: f64,
}

/// Object-space filter output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Filtered3D {
    pub covariance: Matrix3<f64>,
    pub normalization: f64,
}

fn det_ratio_sqrt(det: f64, det_filtered: f64) -> f64 {
    (det.max(DETERMINANT_FLOOR) / det_filtered.max(DETERMINANT_FLOOR)).sqrt()
}

/// `Σ + σ_s I`, opacity unchanged.
pub fn dilation2d(cov: &Covariance2D, sigma_s: f64) -> FilteredGaussian2D {
    FilteredGaussian2D {
        covariance: cov.matrix + Matrix2::identity() * sigma_s,
        normalization: 1.0,
        depth: cov.depth,
    }
}

/// `Σ + σ_s I` with opacity scaled by `sqrt(|Σ| / |Σ + σ_s I|)`.
pub fn mip2d(cov: &Covariance2D, sigma_s: f64) -> FilteredGaussian2D {
    let covariance = cov.matrix + Matrix2::identity() * sigma_s;
    FilteredGaussian2D {
        covariance,
        normalization: det_ratio_sqrt(cov.matrix.determinant(), covariance.determinant()),
        depth: cov.depth,
    }
}

/// 3D smoothing: `Σ + (σ_s / ν̂²) I`, opacity scaled by the determinant ratio.
pub fn smoothing3d(cov: &Matrix3<f64>, max_frequency: f64, sigma_s: f64) -> Filtered3D {
    let added = sigma_s / (max_frequency * max_frequency);
    let covariance = cov + Matrix3::identity() * added;
    Filtered3D {
        covariance,
        normalization: det_ratio_sqrt(cov.determinant(), covariance.determinant()),
    }
}

/// `clip(ratio, ρ_min, ρ_max)` per axis.
pub fn rho_adapt(scale_ratio: &Vector3<f64>, rho_min: f64, rho_max: f64) -> Vector3<f64> {
    scale_ratio.map(|r| r.clamp(rho_min, rho_max))
}

/// Per-axis dilation coefficient: `ρ_adapt σ_s` when `s_t² ≥ ρ_thre σ_s / ν̂²`,
/// otherwise the masked value `ε σ_s`.
pub fn sigma_adapt(
    scale_t: &Vector3<f64>,
    rho: &Vector3<f64>,
    max_frequency: f64,
    config: &FilterConfig,
) -> Vector3<f64> {
    let threshold = config.rho_thre * config.sigma_s / (max_frequency * max_frequency);
    Vector3::from_fn(|i, _| {
        if scale_t[i] * scale_t[i] >= threshold {
            rho[i] * config.sigma_s
        } else {
            config.epsilon * config.sigma_s
        }
    })
}

/// 4D scale-adaptive filter for a primitive with deformed rotation
/// `rotation_t`, deformed scale `scale_t` and base scale `scale`.
pub fn adaptive4d(
    rotation_t: Quat,
    scale_t: &Vector3<f64>,
    scale: &Vector3<f64>,
    max_frequency: f64,
    config: &FilterConfig,
) -> Filtered3D {
    let f = object_filter(
        FilterKind::Adaptive4d,
        scale_t,
        scale,
        Some(1.0 / max_frequency),
        config,
    );
    Filtered3D {
        covariance: covariance_from_axes(&rotation_t.to_rotation_matrix(), &f.variances),
        normalization: f.normalization,
    }
}

/// Which branch of the adaptive rule an axis took; gradients only flow
/// through `Ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisBranch {
    Fixed,
    Ratio,
    Clipped,
    Masked,
}

/// Object-space filter evaluated in the primitive frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectFilter {
    pub kind: FilterKind,
    pub mode: AdaptiveMode,
    /// Filtered per-axis variances `s_t² + added`.
    pub variances: Vector3<f64>,
    pub added: Vector3<f64>,
    pub normalization: f64,
    scale_t: Vector3<f64>,
    scale: Vector3<f64>,
    /// `σ_s T̂²`, the unit of added variance.
    unit: f64,
    branches: [AxisBranch; 3],
    /// Unclipped isotropic ratio (geometric mean); only used in isotropic mode.
    iso_ratio: f64,
    det_clamped: bool,
}

impl ObjectFilter {
    pub fn branches(&self) -> [AxisBranch; 3] {
        self.branches
    }

    /// Reverse pass: given `dL/dvariances` and `dL/dnormalization`, returns
    /// `(dL/ds_t, dL/ds)`. The sampling interval is a constant.
    pub fn backward(
        &self,
        grad_variances: &Vector3<f64>,
        grad_normalization: f64,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let mut g_st = Vector3::zeros();
        let mut g_s = Vector3::zeros();
        let mut g_var = *grad_variances;
        if self.normalization != 1.0 && !self.det_clamped {
            let gn = grad_normalization * self.normalization;
            for i in 0..3 {
                g_st[i] += gn / self.scale_t[i];
                g_var[i] -= 0.5 * gn / self.variances[i];
            }
        }
        for i in 0..3 {
            g_st[i] += 2.0 * self.scale_t[i] * g_var[i];
        }
        if self.kind != FilterKind::Adaptive4d {
            return (g_st, g_s);
        }
        match self.mode {
            AdaptiveMode::PerAxis => {
                for i in 0..3 {
                    if self.branches[i] == AxisBranch::Ratio {
                        // added = σ_s T̂² · s_t² / s².
                        let s2 = self.scale[i] * self.scale[i];
                        g_st[i] += g_var[i] * self.unit * 2.0 * self.scale_t[i] / s2;
                        g_s[i] -= g_var[i] * self.unit * 2.0 * self.scale_t[i] * self.scale_t[i]
                            / (s2 * self.scale[i]);
                    }
                }
            }
            AdaptiveMode::Isotropic => {
                if self.branches[0] == AxisBranch::Ratio {
                    // added = σ_s T̂² · (Π s_t²/s²)^{1/3} on every axis.
                    let total: f64 = g_var.sum();
                    let k = total * self.unit * 2.0 * self.iso_ratio / 3.0;
                    for i in 0..3 {
                        g_st[i] += k / self.scale_t[i];
                        g_s[i] -= k / self.scale[i];
                    }
                }
            }
        }
        (g_st, g_s)
    }
}

/// Object-space stage for any filter kind. Kinds without an object stage
/// return the unfiltered variances and normalization 1. `interval` is T̂ and
/// must be present for the frequency-based kinds.
pub fn object_filter(
    kind: FilterKind,
    scale_t: &Vector3<f64>,
    scale: &Vector3<f64>,
    interval: Option<f64>,
    config: &FilterConfig,
) -> ObjectFilter {
    let sq = scale_t.component_mul(scale_t);
    let mut out = ObjectFilter {
        kind,
        mode: config.adaptive_mode,
        variances: sq,
        added: Vector3::zeros(),
        normalization: 1.0,
        scale_t: *scale_t,
        scale: *scale,
        unit: 0.0,
        branches: [AxisBranch::Fixed; 3],
        iso_ratio: 1.0,
        det_clamped: false,
    };
    if !kind.uses_frequency() {
        return out;
    }
    let interval = interval.expect("frequency filters need a sampling interval");
    let unit = config.sigma_s * interval * interval;
    out.unit = unit;
    let threshold = config.rho_thre * unit;
    match kind {
        FilterKind::Smoothing3d => out.added = Vector3::repeat(unit),
        FilterKind::Adaptive4d => match config.adaptive_mode {
            AdaptiveMode::PerAxis => {
                for i in 0..3 {
                    if sq[i] < threshold {
                        out.branches[i] = AxisBranch::Masked;
                        out.added[i] = config.epsilon * config.sigma_s * interval * interval;
                    } else {
                        let ratio = sq[i] / (scale[i] * scale[i]);
                        let rho = ratio.clamp(config.rho_min, config.rho_max);
                        out.branches[i] =
                            if rho == ratio && ratio != config.rho_min && ratio != config.rho_max {
                                AxisBranch::Ratio
                            } else {
                                AxisBranch::Clipped
                            };
                        out.added[i] = rho * config.sigma_s * interval * interval;
                    }
                }
            }
            AdaptiveMode::Isotropic => {
                let masked = sq.min() < threshold;
                let ratio = (sq.component_div(&scale.component_mul(scale)))
                    .product()
                    .cbrt();
                out.iso_ratio = ratio;
                let branch;
                let value = if masked {
                    branch = AxisBranch::Masked;
                    config.epsilon
                } else {
                    let rho = ratio.clamp(config.rho_min, config.rho_max);
                    branch = if rho == ratio && ratio != config.rho_min && ratio != config.rho_max {
                        AxisBranch::Ratio
                    } else {
                        AxisBranch::Clipped
                    };
                    rho
                };
                out.branches = [branch; 3];
                out.added = Vector3::repeat(value * config.sigma_s * interval * interval);
            }
        },
        _ => unreachable!(),
    }
    out.variances = sq + out.added;
    let det = sq.product();
    let det_f = out.variances.product();
    out.det_clamped = det < DETERMINANT_FLOOR || det_f < DETERMINANT_FLOOR;
    out.normalization = det_ratio_sqrt(det, det_f);
    out
}

/// Screen-space stage: returns the filtered covariance and its opacity factor.
pub fn screen_filter(
    filter: ScreenFilter,
    cov: &Matrix2<f64>,
    sigma_s: f64,
) -> (Matrix2<f64>, f64) {
    match filter {
        ScreenFilter::None => (*cov, 1.0),
        ScreenFilter::Dilation => (cov + Matrix2::identity() * sigma_s, 1.0),
        ScreenFilter::Mip => {
            let f = cov + Matrix2::identity() * sigma_s;
            (f, det_ratio_sqrt(cov.determinant(), f.determinant()))
        }
    }
}

/// Reverse pass of [`screen_filter`]. Gradients with respect to symmetric
/// matrices are full symmetric matrices (`dL = Σ_ij G_ij dX_ij`).
pub fn screen_filter_vjp(
    filter: ScreenFilter,
    cov: &Matrix2<f64>,
    sigma_s: f64,
    grad_filtered: &Matrix2<f64>,
    grad_normalization: f64,
) -> Matrix2<f64> {
    match filter {
        ScreenFilter::None | ScreenFilter::Dilation => *grad_filtered,
        ScreenFilter::Mip => {
            let f = cov + Matrix2::identity() * sigma_s;
            let (d0, d1) = (cov.determinant(), f.determinant());
            let mut g = *grad_filtered;
            if d0 >= DETERMINANT_FLOOR && d1 >= DETERMINANT_FLOOR {
                let norm = (d0 / d1).sqrt();
                let gn = grad_normalization * norm * 0.5;
                // d ln|X| / dX = X⁻¹ for symmetric X.
                let inv0 = cov.try_inverse().unwrap_or_else(Matrix2::zeros);
                let inv1 = f.try_inverse().unwrap_or_else(Matrix2::zeros);
                g += (inv0 - inv1) * gn;
            }
            g
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cov2(a: f64, b: f64, c: f64) -> Covariance2D {
        Covariance2D {
            matrix: Matrix2::new(a, b, b, c),
            depth: 1.0,
        }
    }

    #[test]
    fn dilation_examples() {
        let f = dilation2d(&cov2(1.0, 0.0, 1.0), 0.2);
        assert_relative_eq!(f.covariance, Matrix2::identity() * 1.2, epsilon = 1e-15);
        assert_eq!(f.normalization, 1.0);
        let same = dilation2d(&cov2(1.0, 0.3, 2.0), 0.0);
        assert_eq!(same.covariance, Matrix2::new(1.0, 0.3, 0.3, 2.0));
        // Sub-pixel splats inflate to filter size at full opacity.
        let tiny = dilation2d(&cov2(1e-6, 0.0, 1e-6), 0.2);
        assert_relative_eq!(
            tiny.covariance,
            Matrix2::identity() * 0.200001,
            epsilon = 1e-15
        );
        assert_eq!(tiny.normalization, 1.0);
    }

    #[test]
    fn mip_examples() {
        let f = mip2d(&cov2(1.0, 0.0, 1.0), 0.2);
        assert_relative_eq!(f.normalization, (1.0f64 / 1.44).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(f.normalization, 0.833333, epsilon = 1e-6);
        let limit = mip2d(&cov2(1.0, 0.0, 1.0), 1e-12);
        assert_relative_eq!(limit.normalization, 1.0, epsilon = 1e-11);
        let tiny = mip2d(&cov2(1e-6, 0.0, 1e-6), 0.2);
        assert_relative_eq!(tiny.normalization, 1e-6 / 0.200001, epsilon = 1e-15);
        assert_relative_eq!(tiny.normalization, 5e-6, epsilon = 1e-10);
    }

    #[test]
    fn smoothing_examples() {
        // σ_s / ν̂² = 0.2 with σ_s = 0.2 means ν̂ = 1.
        let f = smoothing3d(&Matrix3::identity(), 1.0, 0.2);
        assert_relative_eq!(f.covariance, Matrix3::identity() * 1.2, epsilon = 1e-15);
        assert_relative_eq!(f.normalization, (1.0f64 / 1.2).powf(1.5), epsilon = 1e-12);
        assert_relative_eq!(f.normalization, 0.7607, epsilon = 1e-4);
        let far = smoothing3d(&Matrix3::identity(), 1e9, 0.2);
        assert!((far.covariance - Matrix3::identity()).abs().max() <= 1e-12);
        assert_relative_eq!(far.normalization, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rho_adapt_examples() {
        let one = Vector3::new(1.0, 1.0, 1.0);
        assert_eq!(rho_adapt(&one, 0.2, 5.0), one);
        assert_eq!(
            rho_adapt(&Vector3::new(0.04, 9.0, 1.0), 0.2, 5.0),
            Vector3::new(0.2, 5.0, 1.0)
        );
        let inside = Vector3::new(0.3, 0.3, 0.3);
        assert_eq!(rho_adapt(&inside, 0.2, 5.0), inside);
    }

    #[test]
    fn sigma_adapt_branches() {
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        let nu = 2.0;
        let unit = cfg.sigma_s / (nu * nu);
        let rho = Vector3::new(0.7, 1.3, 2.0);
        let big = (10.0 * unit * cfg.rho_thre).sqrt();
        let small = (0.5 * unit * cfg.rho_thre).sqrt();
        let s = sigma_adapt(&Vector3::new(big, small, big), &rho, nu, &cfg);
        assert_relative_eq!(s[0], 0.7 * cfg.sigma_s);
        assert_relative_eq!(s[1], cfg.epsilon * cfg.sigma_s);
        assert_relative_eq!(s[2], 2.0 * cfg.sigma_s);
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_rho_min(0.2, 1.0), 0.2);
        assert_relative_eq!(rescale_rho_min(0.2, 2.0), 0.8, epsilon = 1e-15);
        assert_eq!(rescale_rho_min(0.2, 4.0), 1.0);
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        assert_eq!(cfg.for_render_rate(0.25).rho_min, 0.2);
        assert_relative_eq!(cfg.for_render_rate(2.0).rho_min, 0.8, epsilon = 1e-15);
    }

    fn equivalence_config() -> FilterConfig {
        FilterConfig {
            rho_thre: 0.0,
            rho_min: 1.0,
            rho_max: 1.0,
            ..FilterConfig::new(FilterKind::Adaptive4d)
        }
    }

    #[test]
    fn adaptive_preserves_axis_ratio_better_than_smoothing() {
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        let s = Vector3::new(1.0, 1.0, 1.0);
        let st = Vector3::new(2.0, 1.0, 1.0);
        let nu = 1.0;
        let a = object_filter(FilterKind::Adaptive4d, &st, &s, Some(1.0 / nu), &cfg);
        let m = object_filter(FilterKind::Smoothing3d, &st, &s, Some(1.0 / nu), &cfg);
        let target = st[0] * st[0] / (st[1] * st[1]);
        let err_a = (a.variances[0] / a.variances[1] - target).abs();
        let err_m = (m.variances[0] / m.variances[1] - target).abs();
        assert!(err_a < err_m, "{err_a} vs {err_m}");
        // The grown axis gets 4x the dilation of the others.
        assert_relative_eq!(a.added[0], 4.0 * a.added[1], epsilon = 1e-15);
    }

    #[test]
    fn masked_axis_gets_epsilon_dilation() {
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        let interval: f64 = 0.01;
        let unit = cfg.sigma_s * interval * interval;
        let tiny = (0.5 * cfg.rho_thre * unit).sqrt();
        let st = Vector3::new(tiny, 0.05, 0.05);
        let f = object_filter(FilterKind::Adaptive4d, &st, &st, Some(interval), &cfg);
        assert_eq!(f.branches()[0], AxisBranch::Masked);
        assert_relative_eq!(f.added[0], cfg.epsilon * unit, epsilon = 1e-20);
        // The masked branch is constant in s_t: only the s_t² term carries gradient.
        let (g_st, g_s) = f.backward(&Vector3::new(1.0, 0.0, 0.0), 0.0);
        assert_relative_eq!(g_st[0], 2.0 * tiny, epsilon = 1e-15);
        assert_eq!(g_s[0], 0.0);
    }

    #[test]
    fn object_filter_vjp_matches_finite_differences() {
        for mode in [AdaptiveMode::PerAxis, AdaptiveMode::Isotropic] {
            for kind in [FilterKind::Smoothing3d, FilterKind::Adaptive4d] {
                let cfg = FilterConfig {
                    adaptive_mode: mode,
                    ..FilterConfig::new(kind)
                };
                let st = Vector3::new(0.031, 0.022, 0.017);
                let s = Vector3::new(0.025, 0.02, 0.02);
                let interval = Some(0.02);
                let wv = Vector3::new(0.3, -0.8, 1.1);
                let wn = 0.7;
                let loss = |st: &Vector3<f64>, s: &Vector3<f64>| {
                    let f = object_filter(kind, st, s, interval, &cfg);
                    f.variances.dot(&wv) * 1e3 + f.normalization * wn
                };
                let f = object_filter(kind, &st, &s, interval, &cfg);
                let (g_st, g_s) = f.backward(&(wv * 1e3), wn);
                let h = 1e-8;
                for i in 0..3 {
                    let mut d = Vector3::zeros();
                    d[i] = h;
                    let fd_st = (loss(&(st + d), &s) - loss(&(st - d), &s)) / (2.0 * h);
                    let fd_s = (loss(&st, &(s + d)) - loss(&st, &(s - d))) / (2.0 * h);
                    assert_relative_eq!(g_st[i], fd_st, max_relative = 1e-5, epsilon = 1e-9);
                    assert_relative_eq!(g_s[i], fd_s, max_relative = 1e-5, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn screen_filter_vjp_matches_finite_differences() {
        let cov = Matrix2::new(0.7, 0.2, 0.2, 0.4);
        let wf = Matrix2::new(0.3, -0.4, -0.4, 0.9);
        let wn = 1.3;
        for filter in [
            ScreenFilter::None,
            ScreenFilter::Dilation,
            ScreenFilter::Mip,
        ] {
            let loss = |c: &Matrix2<f64>| {
                let (f, n) = screen_filter(filter, c, 0.2);
                f.dot(&wf) + n * wn
            };
            let g = screen_filter_vjp(filter, &cov, 0.2, &wf, wn);
            let h = 1e-7;
            // Symmetric perturbations: diagonal entries and the off-diagonal pair.
            for (i, j) in [(0, 0), (1, 1), (0, 1)] {
                let mut d = Matrix2::zeros();
                d[(i, j)] = h;
                d[(j, i)] = h;
                let fd = (loss(&(cov + d)) - loss(&(cov - d))) / (2.0 * h);
                let an = if i == j {
                    g[(i, i)]
                } else {
                    g[(i, j)] + g[(j, i)]
                };
                assert_relative_eq!(an, fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_output() {
        let cfg = FilterConfig::new(FilterKind::Adaptive4d);
        let st = Vector3::new(0.3, 0.01, 0.2);
        let s = Vector3::new(0.2, 0.02, 0.2);
        let a = object_filter(FilterKind::Adaptive4d, &st, &s, Some(0.01), &cfg);
        let b = object_filter(FilterKind::Adaptive4d, &st, &s, Some(0.01), &cfg);
        assert_eq!(a, b);
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 0.01
            })
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized())
    }

    proptest! {
        #[test]
        fn adaptive_equivalence_with_smoothing(
            q in arb_quat(),
            s in prop::array::uniform3(0.01..1.0f64),
            st in prop::array::uniform3(0.01..1.0f64),
            nu in 0.5..50.0f64,
        ) {
            let cfg = equivalence_config();
            let st = Vector3::from(st);
            let cov_t = crate::geometry::build_covariance(q, st).unwrap();
            let a = adaptive4d(q, &st, &Vector3::from(s), nu, &cfg);
            let m = smoothing3d(&cov_t, nu, cfg.sigma_s);
            prop_assert!((a.covariance - m.covariance).abs().max() <= 1e-12);
            prop_assert!((a.normalization - m.normalization).abs() <= 1e-12);
        }

        #[test]
        fn normalization_in_unit_interval_and_mass_preserving(
            a in 1e-4..4.0f64, c in 1e-4..4.0f64, rho in -0.9..0.9f64, sigma in 1e-3..2.0f64,
        ) {
            let b = rho * (a * c).sqrt();
            let cov = cov2(a, b, c);
            let f = mip2d(&cov, sigma);
            prop_assert!(f.normalization > 0.0 && f.normalization <= 1.0);
            // sqrt|Σ| = sqrt|Σ + σI| · norm.
            let lhs = cov.matrix.determinant().sqrt();
            let rhs = f.covariance.determinant().sqrt() * f.normalization;
            prop_assert!((lhs - rhs).abs() <= 1e-12);
            // More added covariance means a smaller factor.
            let g = mip2d(&cov, sigma * 1.5);
            prop_assert!(g.normalization < f.normalization);
        }

        #[test]
        fn adaptive_normalization_bounded_and_mass_preserving(
            q in arb_quat(),
            s in prop::array::uniform3(0.01..1.0f64),
            st in prop::array::uniform3(0.01..1.0f64),
            nu in 0.5..50.0f64,
        ) {
            let cfg = FilterConfig::new(FilterKind::Adaptive4d);
            let st = Vector3::from(st);
            let f = adaptive4d(q, &st, &Vector3::from(s), nu, &cfg);
            prop_assert!(f.normalization > 0.0 && f.normalization <= 1.0);
            let cov_t = crate::geometry::build_covariance(q, st).unwrap();
            let lhs = cov_t.determinant().sqrt();
            let rhs = f.covariance.determinant().sqrt() * f.normalization;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
        }

        #[test]
        fn clipping_keeps_the_argmax_axis(r in prop::array::uniform3(0.2..5.0f64)) {
            let r = Vector3::from(r);
            let c = rho_adapt(&r, 0.2, 5.0);
            prop_assert_eq!(r.imax(), c.imax());
        }
    }
}
