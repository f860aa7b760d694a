//! The workflows behind the command-line tool. Each takes plain option
//! structs so it can be driven from tests as well as from argument parsing.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::config::Settings;
use crate::filters::{FilterConfig, FilterKind};
use crate::frequency::FrequencyTracker;
use crate::io::{self, Checkpoint};
use crate::metrics::{self, MetricsRow};
use crate::optimizer::{self, loss_history_csv, Adam, TrainConfig, TrainOutcome};
use crate::rasterizer::{render, RenderJob, RenderedImage};
use crate::scene::Scene;
use crate::scenes::{self, Dataset, RigProfile, RigSpec, SceneProfile};
use crate::{Error, Result};

/// File holding the generating scene inside a dataset directory.
pub const GROUND_TRUTH_NAME: &str = "ground_truth.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub scene: SceneProfile,
    pub rig: RigProfile,
    /// Ignored for a monocular rig, which uses one camera per timestep.
    pub cameras: usize,
    pub timesteps: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; `None` picks 1.5 × width.
    pub focal: Option<f64>,
    pub primitives: usize,
    pub seed: u64,
    pub supersample: usize,
    pub background: Vector3<f64>,
}

impl GenerateOptions {
    pub fn new(scene: SceneProfile, rig: RigProfile) -> Self {
        GenerateOptions {
            scene,
            rig,
            cameras: 4,
            timesteps: scenes::DEFAULT_TIMESTEPS,
            width: 64,
            height: 64,
            focal: None,
            primitives: 20,
            seed: 0,
            supersample: 4,
            background: Vector3::zeros(),
        }
    }
}

/// Builds the scene, rig and supersampled targets. Returns the generating
/// scene alongside the dataset.
pub fn build_dataset(opts: &GenerateOptions) -> Result<(Scene, Dataset)> {
    let scene = scenes::make_scene(opts.scene, opts.seed, opts.primitives)?;
    let count = match opts.rig {
        RigProfile::MonocularArc => opts.timesteps,
        RigProfile::MultiviewRing => opts.cameras,
    };
    let focal = opts.focal.unwrap_or(1.5 * opts.width as f64);
    let cameras = scenes::make_rig(&RigSpec::new(
        opts.rig,
        count,
        focal,
        opts.width,
        opts.height,
    ))?;
    let times = scenes::timesteps(opts.timesteps);
    let data = scenes::render_ground_truth(
        opts.scene.name(),
        &scene,
        &cameras,
        opts.rig,
        &times,
        opts.supersample,
        opts.background,
    )?;
    Ok((scene, data))
}

pub fn generate(opts: &GenerateOptions, output: &Path) -> Result<Dataset> {
    let (scene, data) = build_dataset(opts)?;
    io::save_dataset(output, &data)?;
    save_ground_truth(output, &scene)?;
    Ok(data)
}

pub fn save_ground_truth(dir: &Path, scene: &Scene) -> Result<()> {
    let c = Checkpoint {
        iteration: 0,
        scene: scene.clone(),
        filter: FilterConfig::new(FilterKind::None),
        tracker: FrequencyTracker::new(optimizer::DEFAULT_MOMENTUM, optimizer::DEFAULT_SWITCH)?,
        optimizer: None,
    };
    io::save_checkpoint(&dir.join(GROUND_TRUTH_NAME), &c)
}

pub fn load_ground_truth(dir: &Path) -> Result<Scene> {
    let path = dir.join(GROUND_TRUTH_NAME);
    if !path.exists() {
        return Err(Error::InvalidParameter(format!(
            "dataset {} has no {GROUND_TRUTH_NAME}; evaluation needs the generating scene",
            dir.display()
        )));
    }
    Ok(io::load_checkpoint(&path)?.scene)
}

/// Loss history file written next to a checkpoint.
pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

/// Fits a freshly initialized model to `data`.
pub fn fit(data: &Dataset, settings: &Settings) -> Result<(Checkpoint, TrainOutcome)> {
    fit_with_checkpoints(data, settings, |_| Ok(()))
}

fn fit_with_checkpoints(
    data: &Dataset,
    settings: &Settings,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainOutcome)> {
    settings.validate()?;
    let cfg = TrainConfig {
        background: data.background,
        ..settings.train.clone()
    };
    let tracker = FrequencyTracker::new(cfg.momentum, cfg.switch_iteration)?;
    let mut scene = optimizer::initialize_scene(settings.primitives, &data.times, cfg.seed)?;
    let snapshot = |iteration: usize, scene: &Scene, adam: Option<Adam>| Checkpoint {
        iteration,
        scene: scene.clone(),
        filter: settings.filter,
        tracker,
        optimizer: adam,
    };
    let outcome = optimizer::train(&mut scene, data, &settings.filter, &cfg, |it, s, adam| {
        on_checkpoint(&snapshot(it, s, Some(adam.clone())))
    })?;
    let iteration = outcome.history.len();
    let checkpoint = snapshot(iteration, &scene, Some(outcome.optimizer.clone()));
    Ok((checkpoint, outcome))
}

/// Trains on the dataset in `dataset_dir`, writing the checkpoint, its loss
/// history and the resolved settings. A divergence halt still writes all
/// three before returning the error.
pub fn train(dataset_dir: &Path, settings: &Settings, output: &Path) -> Result<TrainOutcome> {
    let data = io::load_dataset(dataset_dir)?;
    let (checkpoint, outcome) =
        fit_with_checkpoints(&data, settings, |c| io::save_checkpoint(output, c))?;
    io::save_checkpoint(output, &checkpoint)?;
    io::write_atomic(
        &loss_csv_path(output),
        loss_history_csv(&outcome.history).as_bytes(),
    )?;
    let mut cfg_name = output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    cfg_name.push(".config.txt");
    io::write_atomic(
        &output.with_file_name(cfg_name),
        settings.to_text().as_bytes(),
    )?;
    outcome.into_result()
}

fn check_factors(factors: &[f64]) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one scale factor is required".into(),
        ));
    }
    if let Some(f) = factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "scale factor must be positive, got {f}"
        )));
    }
    Ok(())
}

/// Renders the model through `camera` scaled by `factor`, with the filter
/// adjusted to the new sampling rate.
pub fn render_scaled(
    checkpoint: &Checkpoint,
    camera: &crate::geometry::CameraModel,
    time: f64,
    factor: f64,
    background: Vector3<f64>,
) -> Result<RenderedImage> {
    let cam = camera.scaled(factor)?;
    let filter = checkpoint.filter.for_render_rate(1.0 / factor);
    Ok(
        render(&RenderJob::new(&checkpoint.scene, &cam, time, filter).with_background(background))?
            .0,
    )
}

pub fn render_file_name(camera: usize, time: f64, factor: f64) -> String {
    format!("cam{camera}_t{time:.4}_x{factor}.png")
}

/// Writes one PNG per (time, factor) and returns their paths.
pub fn render_images(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    camera: usize,
    times: &[f64],
    factors: &[f64],
    output: &Path,
) -> Result<Vec<PathBuf>> {
    check_factors(factors)?;
    if times.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one time is required".into(),
        ));
    }
    let checkpoint = io::load_checkpoint(checkpoint_path)?;
    let data = io::load_dataset(dataset_dir)?;
    let cam = data.cameras.get(camera).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "camera {camera} out of range; the dataset has {}",
            data.cameras.len()
        ))
    })?;
    let mut paths = Vec::new();
    for &t in times {
        for &f in factors {
            let img = render_scaled(&checkpoint, cam, t, f, data.background)?;
            let path = output.join(render_file_name(camera, t, f));
            io::write_png(&path, &img)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Metrics of `checkpoint` against supersampled references of `truth`, one
/// row per factor. PSNR, SSIM and high-band energy are averaged over every
/// view of the dataset; coverage is summed.
pub fn evaluate(
    checkpoint: &Checkpoint,
    data: &Dataset,
    truth: &Scene,
    factors: &[f64],
    label: &str,
) -> Result<Vec<MetricsRow>> {
    check_factors(factors)?;
    factors
        .iter()
        .map(|&f| {
            let rows = data
                .views
                .par_iter()
                .map(|v| {
                    let camera = &data.cameras[v.camera];
                    let rendered = render_scaled(checkpoint, camera, v.time, f, data.background)?;
                    let reference = scenes::render_supersampled(
                        truth,
                        &camera.scaled(f)?,
                        v.time,
                        data.supersample,
                        data.background,
                    )?;
                    MetricsRow::measure(&data.name, label, f, &rendered, &reference)
                })
                .collect::<Result<Vec<_>>>()?;
            let pick =
                |g: fn(&MetricsRow) -> f64| metrics::mean(&rows.iter().map(g).collect::<Vec<_>>());
            Ok(MetricsRow {
                scene: data.name.clone(),
                filter: label.to_string(),
                scale_factor: f,
                psnr: pick(|r| r.psnr),
                ssim: pick(|r| r.ssim),
                highband: pick(|r| r.highband),
                coverage: rows.iter().map(|r| r.coverage).sum(),
            })
        })
        .collect()
}

pub fn eval(
    checkpoint_path: &Path,
    dataset_dir: &Path,
    factors: &[f64],
) -> Result<Vec<MetricsRow>> {
    check_factors(factors)?;
    let checkpoint = io::load_checkpoint(checkpoint_path)?;
    let data = io::load_dataset(dataset_dir)?;
    let truth = load_ground_truth(dataset_dir)?;
    if let Some(t) = checkpoint
        .scene
        .tracks
        .iter()
        .flat_map(|t| t.keyframes())
        .map(|k| k.time)
        .find(|t| !data.times.contains(t))
    {
        return Err(Error::InvalidParameter(format!(
            "checkpoint keyframe time {t} does not belong to dataset {}",
            data.name
        )));
    }
    evaluate(
        &checkpoint,
        &data,
        &truth,
        factors,
        checkpoint.filter.kind.name(),
    )
}

/// One row family of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub filter: FilterConfig,
    /// Replaces λ₁ for this variant.
    pub lambda_scale: Option<f64>,
}

pub const EQUIVALENCE_VARIANT: &str = "adaptive4d-equiv";
pub const MASK_VARIANT: &str = "smoothing3d-mask";

/// Parses a filter kind name or one of the two derived variants:
/// `adaptive4d-equiv` (ρ_min = ρ_max = 1, ρ_thre = 0, no scale loss), which
/// reproduces `smoothing3d`, and `smoothing3d-mask` (fixed dilation at
/// ρ_min · σ_s plus the visibility mask, no scale loss).
pub fn parse_variant(name: &str, base: &FilterConfig) -> Result<Variant> {
    let make = |filter, lambda_scale| Variant {
        label: name.to_string(),
        filter,
        lambda_scale,
    };
    match name {
        EQUIVALENCE_VARIANT => {
            let mut f = base.with_kind(FilterKind::Adaptive4d);
            f.rho_min = 1.0;
            f.rho_max = 1.0;
            f.rho_thre = 0.0;
            Ok(make(f, Some(0.0)))
        }
        MASK_VARIANT => {
            let mut f = base.with_kind(FilterKind::Adaptive4d);
            f.rho_max = f.rho_min;
            Ok(make(f, Some(0.0)))
        }
        other => Ok(make(base.with_kind(FilterKind::parse(other)?), None)),
    }
}

/// Trains and evaluates every variant from the same initialization and seed.
pub fn ablate(
    data: &Dataset,
    truth: &Scene,
    variants: &[Variant],
    factors: &[f64],
    settings: &Settings,
) -> Result<Vec<MetricsRow>> {
    check_factors(factors)?;
    if variants.is_empty() {
        return Err(Error::InvalidParameter(
            "at least one filter variant is required".into(),
        ));
    }
    let mut rows = Vec::new();
    for v in variants {
        let mut s = settings.clone();
        s.filter = v.filter;
        if let Some(l) = v.lambda_scale {
            s.train.lambda_scale = l;
        }
        let (checkpoint, outcome) = fit(data, &s)?;
        let outcome = outcome.into_result()?;
        log::info!(
            "{}: final loss {:?}",
            v.label,
            outcome.history.last().map(|r| r.total)
        );
        rows.extend(evaluate(&checkpoint, data, truth, factors, &v.label)?);
    }
    Ok(rows)
}

pub fn ablate_dir(
    dataset_dir: &Path,
    names: &[String],
    factors: &[f64],
    settings: &Settings,
) -> Result<Vec<MetricsRow>> {
    let data = io::load_dataset(dataset_dir)?;
    let truth = load_ground_truth(dataset_dir)?;
    let variants = names
        .iter()
        .map(|n| parse_variant(n, &settings.filter))
        .collect::<Result<Vec<_>>>()?;
    ablate(&data, &truth, &variants, factors, settings)
}
