//! Run configuration.
//!
//! Settings resolve in three layers: the built-in defaults below adjusted by
//! the chosen profile, then an optional config file, then command-line
//! overrides. Config files and overrides share one flat `key = value` format;
//! `#` starts a comment.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `filter` | `adaptive4d` | none, dilation2d, mip2d, smoothing3d, adaptive4d |
//! | `sigma_s` | 0.2 | filter scale σ_s |
//! | `rho_min` | 0.2 | lower clip of ρ_adapt |
//! | `rho_max` | 5 | upper clip of ρ_adapt |
//! | `rho_thre` | 0.05 (monocular), 5e-6 (multiview) | mask threshold ρ_thre |
//! | `epsilon` | 1e-4 | dilation of masked axes |
//! | `adaptive_mode` | per_axis | per_axis or isotropic |
//! | `momentum` | 0.2 | λ_v of the T̂ momentum rule |
//! | `lambda_scale` | 0.1 | λ₁, weight of the scale loss |
//! | `scale_loss` | sum (monocular), mean (multiview) | scale loss reduction |
//! | `warmup` | 3000 | static-only iterations |
//! | `switch` | 6000 | first momentum-tracked iteration |
//! | `iterations` | 10000 | total iterations |
//! | `lr_position` | 1.6e-4 | initial position rate |
//! | `lr_position_final` | 1.6e-6 | final position rate |
//! | `lr_rotation` | 1e-3 | |
//! | `lr_scale` | 5e-3 | log-scale rate |
//! | `lr_opacity` | 5e-2 | logit-opacity rate |
//! | `lr_color` | 2.5e-3 | |
//! | `lr_deformation` | 8e-4 | Δp, Δr, Δs rate |
//! | `spatial_scale` | 1 | multiplies the position rates |
//! | `primitives` | 200 | initial primitive count |
//! | `seed` | 0 | initialization and view order |
//! | `checkpoint_every` | 0 | periodic checkpoint interval, 0 = off |

use crate::filters::{AdaptiveMode, FilterConfig, FilterKind, RHO_THRE_MULTIVIEW};
use crate::optimizer::{ScaleLossMode, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_PRIMITIVES: usize = 200;

/// Every recognized key with its built-in default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("filter", "adaptive4d"),
    ("sigma_s", "0.2"),
    ("rho_min", "0.2"),
    ("rho_max", "5"),
    ("rho_thre", "0.05"),
    ("epsilon", "1e-4"),
    ("adaptive_mode", "per_axis"),
    ("momentum", "0.2"),
    ("lambda_scale", "0.1"),
    ("scale_loss", "sum"),
    ("warmup", "3000"),
    ("switch", "6000"),
    ("iterations", "10000"),
    ("lr_position", "1.6e-4"),
    ("lr_position_final", "1.6e-6"),
    ("lr_rotation", "1e-3"),
    ("lr_scale", "5e-3"),
    ("lr_opacity", "5e-2"),
    ("lr_color", "2.5e-3"),
    ("lr_deformation", "8e-4"),
    ("spatial_scale", "1"),
    ("primitives", "200"),
    ("seed", "0"),
    ("checkpoint_every", "0"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// One moving camera: ρ_thre = 0.05, summed scale loss.
    Monocular,
    /// A fixed camera ring: ρ_thre = 5e-6, averaged scale loss.
    Multiview,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Monocular => "monocular",
            Profile::Multiview => "multiview",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "monocular" => Ok(Profile::Monocular),
            "multiview" => Ok(Profile::Multiview),
            other => Err(Error::InvalidParameter(format!(
                "unknown profile '{other}' (monocular or multiview)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub filter: FilterConfig,
    pub train: TrainConfig,
    pub primitives: usize,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("bad value '{value}' for '{key}'")))
}

impl Settings {
    pub fn for_profile(profile: Profile) -> Self {
        let mut s = Settings {
            filter: FilterConfig::new(FilterKind::Adaptive4d),
            train: TrainConfig::default(),
            primitives: DEFAULT_PRIMITIVES,
        };
        for (k, v) in DEFAULTS {
            s.set(k, v).expect("built-in defaults parse");
        }
        if profile == Profile::Multiview {
            s.filter.rho_thre = RHO_THRE_MULTIVIEW;
            s.train.scale_loss_mode = ScaleLossMode::Mean;
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = &mut self.filter;
        let t = &mut self.train;
        let lr = &mut t.learning_rates;
        match key {
            "filter" => f.kind = FilterKind::parse(value)?,
            "sigma_s" => f.sigma_s = parse_value(key, value)?,
            "rho_min" => f.rho_min = parse_value(key, value)?,
            "rho_max" => f.rho_max = parse_value(key, value)?,
            "rho_thre" => f.rho_thre = parse_value(key, value)?,
            "epsilon" => f.epsilon = parse_value(key, value)?,
            "adaptive_mode" => {
                f.adaptive_mode = match value {
                    "per_axis" => AdaptiveMode::PerAxis,
                    "isotropic" => AdaptiveMode::Isotropic,
                    _ => {
                        return Err(Error::InvalidParameter(format!(
                            "bad value '{value}' for '{key}'"
                        )))
                    }
                }
            }
            "momentum" => t.momentum = parse_value(key, value)?,
            "lambda_scale" => t.lambda_scale = parse_value(key, value)?,
            "scale_loss" => t.scale_loss_mode = ScaleLossMode::parse(value)?,
            "warmup" => t.warmup_iterations = parse_value(key, value)?,
            "switch" => t.switch_iteration = parse_value(key, value)?,
            "iterations" => t.total_iterations = parse_value(key, value)?,
            "lr_position" => lr.position = parse_value(key, value)?,
            "lr_position_final" => lr.position_final = parse_value(key, value)?,
            "lr_rotation" => lr.rotation = parse_value(key, value)?,
            "lr_scale" => lr.scale = parse_value(key, value)?,
            "lr_opacity" => lr.opacity = parse_value(key, value)?,
            "lr_color" => lr.color = parse_value(key, value)?,
            "lr_deformation" => lr.deformation = parse_value(key, value)?,
            "spatial_scale" => t.spatial_scale = parse_value(key, value)?,
            "primitives" => self.primitives = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown setting '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item.split_once('=').ok_or_else(|| {
            Error::InvalidParameter(format!("override '{item}' is not key=value"))
        })?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config file's contents.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line)
                .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.train.validate()?;
        if self.primitives == 0 {
            return Err(Error::InvalidParameter(
                "primitives must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Fully resolved settings in config-file form.
    pub fn to_text(&self) -> String {
        let f = &self.filter;
        let t = &self.train;
        let lr = &t.learning_rates;
        let mode = match f.adaptive_mode {
            AdaptiveMode::PerAxis => "per_axis",
            AdaptiveMode::Isotropic => "isotropic",
        };
        let entries: Vec<(&str, String)> = vec![
            ("filter", f.kind.name().into()),
            ("sigma_s", f.sigma_s.to_string()),
            ("rho_min", f.rho_min.to_string()),
            ("rho_max", f.rho_max.to_string()),
            ("rho_thre", f.rho_thre.to_string()),
            ("epsilon", f.epsilon.to_string()),
            ("adaptive_mode", mode.into()),
            ("momentum", t.momentum.to_string()),
            ("lambda_scale", t.lambda_scale.to_string()),
            ("scale_loss", t.scale_loss_mode.name().into()),
            ("warmup", t.warmup_iterations.to_string()),
            ("switch", t.switch_iteration.to_string()),
            ("iterations", t.total_iterations.to_string()),
            ("lr_position", lr.position.to_string()),
            ("lr_position_final", lr.position_final.to_string()),
            ("lr_rotation", lr.rotation.to_string()),
            ("lr_scale", lr.scale.to_string()),
            ("lr_opacity", lr.opacity.to_string()),
            ("lr_color", lr.color.to_string()),
            ("lr_deformation", lr.deformation.to_string()),
            ("spatial_scale", t.spatial_scale.to_string()),
            ("primitives", self.primitives.to_string()),
            ("seed", t.seed.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ];
        entries
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{
        DEFAULT_EPSILON, DEFAULT_RHO_MAX, DEFAULT_RHO_MIN, DEFAULT_SIGMA_S, RHO_THRE_MONOCULAR,
    };
    use crate::optimizer::{
        DEFAULT_LAMBDA_SCALE, DEFAULT_MOMENTUM, DEFAULT_SWITCH, DEFAULT_WARMUP,
    };

    #[test]
    fn defaults_table_matches_library_constants() {
        let s = Settings::for_profile(Profile::Monocular);
        assert_eq!(s.filter, FilterConfig::new(FilterKind::Adaptive4d));
        assert_eq!(
            (
                s.filter.sigma_s,
                s.filter.rho_min,
                s.filter.rho_max,
                s.filter.epsilon
            ),
            (
                DEFAULT_SIGMA_S,
                DEFAULT_RHO_MIN,
                DEFAULT_RHO_MAX,
                DEFAULT_EPSILON
            )
        );
        assert_eq!(s.train, TrainConfig::default());
        assert_eq!(
            (
                s.train.momentum,
                s.train.lambda_scale,
                s.train.warmup_iterations,
                s.train.switch_iteration
            ),
            (
                DEFAULT_MOMENTUM,
                DEFAULT_LAMBDA_SCALE,
                DEFAULT_WARMUP,
                DEFAULT_SWITCH
            )
        );
        assert_eq!(
            (s.filter.sigma_s, s.filter.rho_min, s.filter.rho_max),
            (0.2, 0.2, 5.0)
        );
        assert_eq!((s.train.momentum, s.train.lambda_scale), (0.2, 0.1));
        assert_eq!(
            (s.train.warmup_iterations, s.train.switch_iteration),
            (3000, 6000)
        );
        // Every key in the table is settable and appears in the rendered form.
        let text = s.to_text();
        for (k, _) in DEFAULTS {
            assert!(text.contains(&format!("{k} = ")), "{k}");
        }
        assert_eq!(text.lines().count(), DEFAULTS.len());
    }

    #[test]
    fn profiles_select_threshold_and_reduction() {
        let mono = Settings::for_profile(Profile::Monocular);
        assert_eq!(mono.filter.rho_thre, 0.05);
        assert_eq!(mono.filter.rho_thre, RHO_THRE_MONOCULAR);
        assert_eq!(mono.train.scale_loss_mode, ScaleLossMode::Sum);
        let multi = Settings::for_profile(Profile::Multiview);
        assert_eq!(multi.filter.rho_thre, 5e-6);
        assert_eq!(multi.train.scale_loss_mode, ScaleLossMode::Mean);
        assert!(Profile::parse("stereo").is_err());
    }

    #[test]
    fn precedence_is_profile_then_file_then_overrides() {
        let mut s = Settings::for_profile(Profile::Multiview);
        s.apply_text("# tuned\nrho_thre = 0.01\nseed=4  # trailing\n\niterations = 50\nwarmup = 10\nswitch = 20\n")
            .unwrap();
        s.apply_override("seed=9").unwrap();
        assert_eq!(s.filter.rho_thre, 0.01);
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.train.total_iterations, 50);
        s.validate().unwrap();
        let mut again = Settings::for_profile(Profile::Monocular);
        again.apply_text(&s.to_text()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn bad_entries_are_rejected() {
        let mut s = Settings::for_profile(Profile::Monocular);
        assert!(s.apply_override("nonsense=1").is_err());
        assert!(s.apply_override("sigma_s").is_err());
        assert!(s.apply_override("sigma_s=abc").is_err());
        assert!(matches!(
            s.apply_text("seed = 1\nfilter = blur\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        s.set("warmup", "7000").unwrap();
        assert!(s.validate().is_err());
    }
}
