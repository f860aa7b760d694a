use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splat4d::commands::{self, GenerateOptions};
use splat4d::config::{Profile, Settings};
use splat4d::io;
use splat4d::metrics;
use splat4d::scenes::{RigProfile, SceneProfile};

#[derive(Parser)]
#[command(
    name = "splat4d",
    version,
    about = "Alias-free 4D Gaussian splatting on the CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dynamic scene into a dataset directory.
    Generate(GenerateArgs),
    /// Fit a model to a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Render a checkpoint at several scale factors.
    Render(RenderArgs),
    /// Compare a checkpoint against supersampled references.
    Eval(EvalArgs),
    /// Train and evaluate several filter variants on one dataset.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// orbiting_blobs, pulsing_grid or thin_structures.
    #[arg(long)]
    scene: String,
    /// monocular_arc or multiview_ring.
    #[arg(long, default_value = "multiview_ring")]
    rig: String,
    /// Ring size; a monocular arc has one camera per timestep.
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 8)]
    timesteps: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Focal length in pixels [default: 1.5 × width].
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long, default_value_t = 20)]
    primitives: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    supersample: usize,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct SettingsArgs {
    /// monocular or multiview.
    #[arg(long, default_value = "monocular")]
    profile: String,
    /// Flat key = value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. --set iterations=2000. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SettingsArgs {
    fn resolve(&self, filter: Option<&str>) -> Result<Settings> {
        let mut s = Settings::for_profile(Profile::parse(&self.profile)?);
        if let Some(path) = &self.config {
            s.apply_text(&io::read_text(path)?)
                .with_context(|| format!("in {}", path.display()))?;
        }
        if let Some(f) = filter {
            s.set("filter", f)?;
        }
        if let Some(seed) = self.seed {
            s.train.seed = seed;
        }
        for o in &self.overrides {
            s.apply_override(o)?;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// none, dilation2d, mip2d, smoothing3d or adaptive4d.
    #[arg(long)]
    filter: Option<String>,
    #[command(flatten)]
    settings: SettingsArgs,
    /// Checkpoint path; the loss history goes to <output>.loss.csv.
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset providing the cameras.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    times: Vec<f64>,
    /// Comma-separated, e.g. 1,0.5,0.25,0.125 or 1,2,4.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    factors: Vec<f64>,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    factors: Vec<f64>,
    /// CSV destination; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Filter kinds plus adaptive4d-equiv and smoothing3d-mask.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "none,dilation2d,mip2d,smoothing3d,adaptive4d,adaptive4d-equiv,smoothing3d-mask"
    )]
    filters: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    factors: Vec<f64>,
    #[command(flatten)]
    settings: SettingsArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn emit_csv(text: &str, output: Option<&PathBuf>) -> Result<()> {
    match output {
        Some(path) => io::write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let mut opts =
                GenerateOptions::new(SceneProfile::parse(&a.scene)?, RigProfile::parse(&a.rig)?);
            opts.cameras = a.cameras;
            opts.timesteps = a.timesteps;
            opts.width = a.width;
            opts.height = a.height;
            opts.focal = a.focal;
            opts.primitives = a.primitives;
            opts.seed = a.seed;
            opts.supersample = a.supersample;
            let data = commands::generate(&opts, &a.output)?;
            log::info!("wrote {} views to {}", data.views.len(), a.output.display());
        }
        Command::Train(a) => {
            let settings = a.settings.resolve(a.filter.as_deref())?;
            let outcome = commands::train(&a.dataset, &settings, &a.output)?;
            if let Some(last) = outcome.history.last() {
                log::info!(
                    "final loss {} after {} iterations",
                    last.total,
                    outcome.history.len()
                );
            }
        }
        Command::Render(a) => {
            let paths = commands::render_images(
                &a.checkpoint,
                &a.dataset,
                a.camera,
                &a.times,
                &a.factors,
                &a.output,
            )?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Eval(a) => {
            let rows = commands::eval(&a.checkpoint, &a.dataset, &a.factors)?;
            emit_csv(&metrics::to_csv(&rows), a.output.as_ref())?;
        }
        Command::Ablate(a) => {
            if a.filters.is_empty() {
                bail!("at least one filter is required");
            }
            let settings = a.settings.resolve(None)?;
            let rows = commands::ablate_dir(&a.dataset, &a.filters, &a.factors, &settings)?;
            emit_csv(&metrics::to_csv(&rows), a.output.as_ref())?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
