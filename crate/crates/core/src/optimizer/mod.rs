//! Scene fitting: color loss plus the scale regularizer, analytic gradients
//! through the renderer, Adam updates and the warm-up/joint schedule.

mod adam;
pub mod backward;
pub mod gradcheck;
pub mod loss;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, AdamGroup};
pub use backward::{render_backward, scale_loss_backward, Param, ParamGroup, SceneGrad};
pub use loss::{color_loss, scale_loss, ColorLoss, ScaleLoss, ScaleLossMode, LAMBDA_SSIM};

use crate::deformation::DeformationTrack;
use crate::filters::{FilterConfig, FilterKind};
use crate::frequency::FrequencyTracker;
use crate::geometry::GaussianPrimitive;
use crate::rasterizer::{render_full, RenderJob};
use crate::scene::Scene;
use crate::scenes::Dataset;
use crate::{Error, Result};

pub const DEFAULT_WARMUP: usize = 3000;
pub const DEFAULT_SWITCH: usize = 6000;
pub const DEFAULT_LAMBDA_SCALE: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.2;
/// Iterations between static T̂ refreshes before the momentum switch.
pub const STATIC_REFRESH_INTERVAL: usize = 100;
/// Divergence: loss above this multiple of the initial loss ...
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// ... for this many consecutive iterations.
pub const DIVERGENCE_STREAK: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the spatial scale.
    pub position: f64,
    /// Final position rate after exponential decay, multiplied by the spatial scale.
    pub position_final: f64,
    pub rotation: f64,
    /// Applied to log-scale.
    pub scale: f64,
    /// Applied to logit-opacity.
    pub opacity: f64,
    pub color: f64,
    /// Shared by Δp, Δr and Δs.
    pub deformation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            deformation: 8e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub warmup_iterations: usize,
    pub switch_iteration: usize,
    pub total_iterations: usize,
    pub learning_rates: LearningRates,
    /// Multiplies the position learning rates.
    pub spatial_scale: f64,
    /// λ₁; applied only when the filter is `adaptive4d`.
    pub lambda_scale: f64,
    pub scale_loss_mode: ScaleLossMode,
    /// λ_v of the momentum rule.
    pub momentum: f64,
    pub seed: u64,
    pub background: Vector3<f64>,
    /// Checkpoint callback period; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_iterations: DEFAULT_WARMUP,
            switch_iteration: DEFAULT_SWITCH,
            total_iterations: 10_000,
            learning_rates: LearningRates::default(),
            spatial_scale: 1.0,
            lambda_scale: DEFAULT_LAMBDA_SCALE,
            scale_loss_mode: ScaleLossMode::Sum,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            background: Vector3::zeros(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.warmup_iterations < self.switch_iteration
            && self.switch_iteration < self.total_iterations)
        {
            return bad(format!(
                "need warmup < switch < total, got {} / {} / {}",
                self.warmup_iterations, self.switch_iteration, self.total_iterations
            ));
        }
        let lr = &self.learning_rates;
        let rates = [
            lr.position,
            lr.position_final,
            lr.rotation,
            lr.scale,
            lr.opacity,
            lr.color,
            lr.deformation,
        ];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive".into());
        }
        if !(self.spatial_scale > 0.0) {
            return bad(format!(
                "spatial scale must be positive, got {}",
                self.spatial_scale
            ));
        }
        if !(self.lambda_scale >= 0.0) {
            return bad(format!(
                "lambda_scale must be non-negative, got {}",
                self.lambda_scale
            ));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background outside [0, 1]".into());
        }
        FrequencyTracker::new(self.momentum, self.switch_iteration).map(|_| ())
    }

    /// λ₁ actually applied under `kind`.
    pub fn effective_lambda(&self, kind: FilterKind) -> f64 {
        if kind == FilterKind::Adaptive4d {
            self.lambda_scale
        } else {
            0.0
        }
    }

    pub fn position_lr(&self, iteration: usize) -> f64 {
        let lr = &self.learning_rates;
        let u = (iteration as f64 / self.total_iterations.max(1) as f64).clamp(0.0, 1.0);
        self.spatial_scale * (lr.position.ln() * (1.0 - u) + lr.position_final.ln() * u).exp()
    }
}

/// Loss terms of one iteration: `total = color + lambda · scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: usize,
    pub color: f64,
    pub scale: f64,
    pub lambda: f64,
    pub total: f64,
    pub active: usize,
}

pub const LOSS_CSV_HEADER: &str = "iteration,color,scale,lambda,total,active";

pub fn loss_history_csv(history: &[LossReport]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.color, r.scale, r.lambda, r.total, r.active
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainStatus {
    Completed,
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<LossReport>,
    pub status: TrainStatus,
    pub optimizer: Adam,
}

impl TrainOutcome {
    /// Turns a divergence halt into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            TrainStatus::Completed => Ok(self),
            TrainStatus::Diverged {
                iteration,
                loss,
                initial,
            } => Err(Error::Diverged {
                iteration,
                loss,
                initial,
                streak: DIVERGENCE_STREAK,
            }),
        }
    }
}

/// Loss and gradient of one view.
pub struct Evaluation {
    pub report: LossReport,
    pub grad: SceneGrad,
    pub depths: Vec<crate::frequency::DepthObservation>,
}

/// Forward and backward pass for one training view.
pub fn evaluate_view(
    scene: &Scene,
    data: &Dataset,
    view: usize,
    filter: &FilterConfig,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Evaluation> {
    let v = &data.views[view];
    let camera = &data.cameras[v.camera];
    let job = RenderJob::new(scene, camera, v.time, *filter).with_background(cfg.background);
    let out = render_full(&job)?;
    let color = color_loss(&out.image, &v.image)?;
    let lambda = cfg.effective_lambda(filter.kind);
    let scale = scale_loss(scene, v.time, filter, cfg.scale_loss_mode);
    let mut grad = render_backward(&job, &out, &color.grad)?;
    scale_loss_backward(scene, v.time, &scale, lambda, &mut grad);
    grad.check_finite(scene)?;
    let report = LossReport {
        iteration,
        color: color.value,
        scale: scale.value,
        lambda,
        total: color.value + lambda * scale.value,
        active: scale.active_primitives,
    };
    Ok(Evaluation {
        report,
        grad,
        depths: out.depths,
    })
}

/// Fits `scene` to `data`. The warm-up phase updates only the static
/// parameters; afterwards the deformation keyframes join. T̂ is refreshed
/// from the static rule until the switch iteration, then refined from the
/// depths of every rendered view. `on_checkpoint` runs every
/// `checkpoint_every` iterations.
pub fn train(
    scene: &mut Scene,
    data: &Dataset,
    filter: &FilterConfig,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &Scene, &Adam) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    filter.validate()?;
    if data.views.is_empty() {
        return Err(Error::InvalidParameter("dataset has no views".into()));
    }
    let tracker = FrequencyTracker::new(cfg.momentum, cfg.switch_iteration)?;
    let mut adam = Adam::new(scene, &cfg.learning_rates);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_iterations);
    let mut initial = None;
    let mut streak = 0;
    for it in 0..cfg.total_iterations {
        if it < cfg.switch_iteration && it % STATIC_REFRESH_INTERVAL == 0 {
            tracker.refresh_static(scene, &data.cameras);
        }
        let view = rng.random_range(0..data.views.len());
        let eval = evaluate_view(scene, data, view, filter, cfg, it)?;
        history.push(eval.report);
        let init = *initial.get_or_insert(eval.report.total);
        if eval.report.total > DIVERGENCE_FACTOR * init {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Ok(TrainOutcome {
                    history,
                    status: TrainStatus::Diverged {
                        iteration: it,
                        loss: eval.report.total,
                        initial: init,
                    },
                    optimizer: adam,
                });
            }
        } else {
            streak = 0;
        }
        if it >= cfg.switch_iteration {
            let focal = data.cameras[data.views[view].camera].focal;
            tracker.observe_view(scene, &eval.depths, focal)?;
        }
        let joint = it >= cfg.warmup_iterations;
        adam.step(scene, &eval.grad, cfg.position_lr(it), joint);
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(it + 1, scene, &adam)?;
        }
    }
    Ok(TrainOutcome {
        history,
        status: TrainStatus::Completed,
        optimizer: adam,
    })
}

/// `count` primitives sampled uniformly in `[-1, 1]³`, isotropic scale equal
/// to the mean nearest-neighbor distance, opacity 0.1, gray color, and a
/// zero keyframe at every time in `times`.
pub fn initialize_scene(count: usize, times: &[f64], seed: u64) -> Result<Scene> {
    if count == 0 {
        return Err(Error::InvalidParameter(
            "primitive count must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vector3<f64>> = (0..count)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let scale = if count == 1 {
        0.1
    } else {
        let total: f64 = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| (p - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / count as f64
    };
    let track = DeformationTrack::zeros(times)?;
    let prims = points
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            GaussianPrimitive::new(i, p, Vector3::repeat(scale), 0.1, Vector3::repeat(0.5))
        })
        .collect::<Vec<_>>();
    let tracks = vec![track; count];
    Scene::new(prims, tracks)
}
