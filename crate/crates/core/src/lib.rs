//! Alias-free 4D Gaussian splatting on the CPU.
//!
//! The crate covers the whole pipeline for time-deforming anisotropic
//! Gaussians: projection through a pinhole camera, the low-pass filter
//! family (screen-space dilation and mip filters, object-space smoothing and
//! the scale-adaptive 4D filter), per-primitive sampling-rate tracking, a
//! deterministic tile-based rasterizer with an analytic backward pass, and a
//! training loop that fits primitives plus per-primitive deformation tables
//! to multi-view image sequences.
//!
//! Module map:
//!
//! * [`geometry`] primitives, cameras, covariance construction and projection.
//! * [`deformation`] keyframed per-primitive deformation tracks.
//! * [`frequency`] minimum sampling interval estimation (static and momentum).
//! * [`filters`] the low-pass filter variants and their configuration.
//! * [`rasterizer`] forward rendering and the per-pixel reverse pass.
//! * [`optimizer`] losses, full-scene gradients, Adam, and the training loop.
//! * [`metrics`] PSNR, SSIM, high-band spectral energy, coverage inflation.
//! * [`scenes`] procedural dynamic scenes, camera rigs, ground-truth datasets.
//! * [`io`] scene/checkpoint files, dataset manifests, image writers.
//! * [`config`] defaults table and the flat `key=value` configuration format.
//! * [`commands`] the `generate | train | render | eval | ablate` workflows.

pub mod commands;
pub mod config;
pub mod deformation;
pub mod filters;
pub mod frequency;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod rasterizer;
pub mod scene;
pub mod scenes;

pub use deformation::DeformationTrack;
pub use filters::{FilterConfig, FilterKind};
pub use frequency::FrequencyTracker;
pub use geometry::{CameraModel, GaussianPrimitive, Quat};
pub use rasterizer::{RenderJob, RenderedImage};
pub use scene::Scene;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion is not unit length (norm {0})")]
    NonUnitQuaternion(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("primitive {id} has a non-finite {field}")]
    NonFinitePrimitive { id: usize, field: &'static str },
    #[error("non-finite gradient for primitive {id} ({field})")]
    NonFiniteGradient { id: usize, field: &'static str },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("no primitive has a tracked sampling interval; the frequency filter cannot run")]
    MissingSamplingRate,
    #[error("training diverged at iteration {iteration}: loss {loss} exceeded 10x the initial loss {initial} for {streak} iterations")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
        streak: usize,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
