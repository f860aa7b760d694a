//! Deterministic tile-based CPU renderer.
//!
//! Primitives are deformed to the requested time, filtered, projected and
//! culled, sorted by `(depth, id)` and blended front to back inside 16x16
//! tiles. Each tile only reads shared immutable data, so tiles render in
//! parallel and the result does not depend on the worker count.

mod blend;
pub mod preprocess;

use nalgebra::Vector3;
use rayon::prelude::*;

pub use blend::{blend_backward, PixelState};
pub use preprocess::{PrimitiveGrad, Splat, SplatCache, SplatGrad};

use crate::filters::FilterConfig;
use crate::frequency::DepthObservation;
use crate::geometry::CameraModel;
use crate::scene::Scene;
use crate::{Error, Result};

pub const DEFAULT_TILE_SIZE: usize = 16;

/// Thresholds of the blending loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Per-splat contributions below this are skipped.
    pub min_alpha: f64,
    /// Per-splat contributions are clamped to this.
    pub max_alpha: f64,
    /// Blending stops once transmittance falls below this; 0 disables it.
    pub early_stop: f64,
    /// Hard cap on the splat footprint radius in standard deviations. Only
    /// binds when `min_alpha` is tiny.
    pub max_extent_sigmas: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.99,
            early_stop: 1e-4,
            max_extent_sigmas: 8.0,
        }
    }
}

impl RenderOptions {
    /// No skip threshold and no early termination; the blend is then a
    /// smooth function of every splat parameter (up to the 0.99 clamp).
    pub fn smooth() -> Self {
        RenderOptions {
            min_alpha: 0.0,
            early_stop: 0.0,
            ..RenderOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderJob<'a> {
    pub scene: &'a Scene,
    pub camera: &'a CameraModel,
    pub time: f64,
    pub filter: FilterConfig,
    pub background: Vector3<f64>,
    pub tile_size: usize,
    pub options: RenderOptions,
}

impl<'a> RenderJob<'a> {
    pub fn new(scene: &'a Scene, camera: &'a CameraModel, time: f64, filter: FilterConfig) -> Self {
        RenderJob {
            scene,
            camera,
            time,
            filter,
            background: Vector3::zeros(),
            tile_size: DEFAULT_TILE_SIZE,
            options: RenderOptions::default(),
        }
    }

    pub fn with_background(mut self, background: Vector3<f64>) -> Self {
        self.background = background;
        self
    }

    pub fn with_options(mut self, options: RenderOptions) -> Self {
        self.options = options;
        self
    }

    pub fn with_tile_size(mut self, tile_size: usize) -> Self {
        self.tile_size = tile_size;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::InvalidParameter("tile size must be positive".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParameter(format!(
                "background {:?} outside [0, 1]",
                self.background
            )));
        }
        self.filter.validate()?;
        self.scene.check_finite()
    }
}

/// Row-major linear RGB image plus per-pixel final transmittance.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` values.
    pub color: Vec<f64>,
    /// `width * height` values in [0, 1].
    pub transmittance: Vec<f64>,
}

impl RenderedImage {
    pub fn new(width: usize, height: usize) -> Self {
        RenderedImage {
            width,
            height,
            color: vec![0.0; 3 * width * height],
            transmittance: vec![1.0; width * height],
        }
    }

    /// Opaque image from RGB values (transmittance 0).
    pub fn from_rgb(width: usize, height: usize, color: Vec<f64>) -> Result<Self> {
        if color.len() != 3 * width * height {
            return Err(Error::InvalidParameter(format!(
                "{} values for a {width}x{height} RGB image",
                color.len()
            )));
        }
        Ok(RenderedImage {
            width,
            height,
            color,
            transmittance: vec![0.0; width * height],
        })
    }

    pub fn filled(width: usize, height: usize, rgb: Vector3<f64>) -> Self {
        let mut img = RenderedImage::new(width, height);
        for px in img.color.chunks_exact_mut(3) {
            px.copy_from_slice(rgb.as_slice());
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = 3 * (y * self.width + x);
        Vector3::new(self.color[i], self.color[i + 1], self.color[i + 2])
    }

    /// Accumulated alpha `1 - T` at a pixel.
    pub fn alpha(&self, x: usize, y: usize) -> f64 {
        1.0 - self.transmittance[y * self.width + x]
    }

    pub fn same_size(&self, other: &RenderedImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.color
            .iter()
            .chain(&self.transmittance)
            .all(|v| v.is_finite())
    }
}

/// Everything a render produces: the image, the depth list for the
/// frequency tracker, and the buffers the reverse pass needs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: RenderedImage,
    /// Camera-space depth of every non-culled primitive, in primitive order.
    pub depths: Vec<DepthObservation>,
    pub splats: Vec<Splat>,
    pub caches: Vec<SplatCache>,
    /// Splat indices per tile, sorted by `(depth, id)`.
    pub tile_lists: Vec<Vec<usize>>,
    pub pixels: Vec<PixelState>,
}

pub(crate) struct TileGrid {
    pub size: usize,
    pub cols: usize,
    pub rows: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize, size: usize) -> Self {
        TileGrid {
            size,
            cols: width.div_ceil(size),
            rows: height.div_ceil(size),
        }
    }

    pub fn count(&self) -> usize {
        self.cols * self.rows
    }
}

fn footprint_radius(splat: &Splat, options: &RenderOptions) -> f64 {
    let sigma = splat.max_variance.sqrt();
    let k = if options.min_alpha > 0.0 {
        let ratio = splat.opacity / options.min_alpha;
        if ratio < 1.0 {
            return -1.0;
        }
        (2.0 * ratio.ln()).sqrt().min(options.max_extent_sigmas)
    } else {
        options.max_extent_sigmas
    };
    // Slack keeps pixels exactly on the cutoff ellipse inside.
    k * sigma * (1.0 + 1e-9) + 1e-9
}

fn bin_splats(
    splats: &[Splat],
    order: &[usize],
    grid: &TileGrid,
    options: &RenderOptions,
) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); grid.count()];
    for &si in order {
        let s = &splats[si];
        let r = footprint_radius(s, options);
        if !(r >= 0.0) || !r.is_finite() {
            continue;
        }
        // Pixel i has its center at i + 0.5.
        let to_tile = |v: f64, n: usize| -> Option<usize> {
            let p = (v - 0.5).floor();
            if p < 0.0 {
                Some(0)
            } else {
                let t = (p as usize) / grid.size;
                if t >= n {
                    None
                } else {
                    Some(t)
                }
            }
        };
        let (lo_x, hi_x) = (s.mean.x - r, s.mean.x + r);
        let (lo_y, hi_y) = (s.mean.y - r, s.mean.y + r);
        if hi_x < 0.5 || hi_y < 0.5 {
            continue;
        }
        let (Some(tx0), Some(ty0)) = (to_tile(lo_x, grid.cols), to_tile(lo_y, grid.rows)) else {
            continue;
        };
        let tx1 = to_tile(hi_x, grid.cols).unwrap_or(grid.cols - 1);
        let ty1 = to_tile(hi_y, grid.rows).unwrap_or(grid.rows - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * grid.cols + tx].push(si);
            }
        }
    }
    lists
}

/// Renders a job and keeps the intermediate buffers.
pub fn render_full(job: &RenderJob) -> Result<RenderOutput> {
    job.validate()?;
    let scene = job.scene;
    let camera = job.camera;
    let fallback = preprocess::fallback_interval(scene, &job.filter)?;
    let prepared: Vec<Option<(Splat, SplatCache)>> = (0..scene.len())
        .into_par_iter()
        .map(|k| {
            preprocess::preprocess_primitive(scene, k, camera, job.time, &job.filter, fallback)
        })
        .collect();
    let mut splats = Vec::new();
    let mut caches = Vec::new();
    let mut depths = Vec::new();
    for (splat, cache) in prepared.into_iter().flatten() {
        depths.push(DepthObservation {
            index: splat.index,
            depth: splat.depth,
        });
        splats.push(splat);
        caches.push(cache);
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a], &splats[b]);
        sa.depth
            .total_cmp(&sb.depth)
            .then(sa.id.cmp(&sb.id))
            .then(sa.index.cmp(&sb.index))
    });
    let grid = TileGrid::new(camera.width, camera.height, job.tile_size);
    let tile_lists = bin_splats(&splats, &order, &grid, &job.options);
    let (image, pixels) = blend::blend_forward(job, &splats, &tile_lists, &grid);
    Ok(RenderOutput {
        image,
        depths,
        splats,
        caches,
        tile_lists,
        pixels,
    })
}

/// Renders one image. Returns the image and the depth list of every
/// non-culled primitive.
pub fn render(job: &RenderJob) -> Result<(RenderedImage, Vec<DepthObservation>)> {
    let out = render_full(job)?;
    Ok((out.image, out.depths))
}

/// Renders the same view at several zoom factors. Focal length,
/// principal point and resolution scale together; when a factor lowers the
/// sampling rate, ρ_min is rescaled for that render.
pub fn render_multiscale(
    scene: &Scene,
    camera: &CameraModel,
    time: f64,
    filter: &FilterConfig,
    background: Vector3<f64>,
    factors: &[f64],
) -> Result<Vec<RenderedImage>> {
    factors
        .iter()
        .map(|&factor| {
            let cam = camera.scaled(factor)?;
            let cfg = filter.for_render_rate(1.0 / factor);
            let job = RenderJob::new(scene, &cam, time, cfg).with_background(background);
            Ok(render(&job)?.0)
        })
        .collect()
}
