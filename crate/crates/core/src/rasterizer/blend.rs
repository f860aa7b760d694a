use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::preprocess::{Splat, SplatGrad};
use super::{RenderJob, RenderOptions, RenderedImage, TileGrid};

/// What the reverse pass needs to replay one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelState {
    pub final_transmittance: f64,
    /// Number of tile-list entries the forward pass walked.
    pub walked: u32,
}

struct TileResult {
    color: Vec<f64>,
    transmittance: Vec<f64>,
    states: Vec<PixelState>,
}

/// Per-pixel weight of a splat before the alpha clamp, or `None` when the
/// contribution is skipped.
#[inline]
fn splat_alpha(
    s: &Splat,
    px: f64,
    py: f64,
    options: &RenderOptions,
) -> Option<(f64, f64, Vector2<f64>)> {
    let d = Vector2::new(px - s.mean.x, py - s.mean.y);
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * d.x * d.x + c * d.y * d.y) - b * d.x * d.y;
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let alpha = (s.opacity * g).min(options.max_alpha);
    if alpha < options.min_alpha || alpha <= 0.0 {
        return None;
    }
    Some((alpha, g, d))
}

fn tile_bounds(
    grid: &TileGrid,
    tile: usize,
    width: usize,
    height: usize,
) -> (usize, usize, usize, usize) {
    let (tx, ty) = (tile % grid.cols, tile / grid.cols);
    let x0 = tx * grid.size;
    let y0 = ty * grid.size;
    (
        x0,
        y0,
        (x0 + grid.size).min(width),
        (y0 + grid.size).min(height),
    )
}

fn render_tile(
    job: &RenderJob,
    splats: &[Splat],
    list: &[usize],
    bounds: (usize, usize, usize, usize),
) -> TileResult {
    let (x0, y0, x1, y1) = bounds;
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileResult {
        color: Vec::with_capacity(3 * n),
        transmittance: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
    };
    let opts = &job.options;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = Vector3::zeros();
            let mut walked = 0u32;
            for (j, &si) in list.iter().enumerate() {
                let s = &splats[si];
                let Some((alpha, _, _)) = splat_alpha(s, px, py, opts) else {
                    continue;
                };
                c += s.color * (t * alpha);
                t *= 1.0 - alpha;
                walked = j as u32 + 1;
                if t < opts.early_stop {
                    break;
                }
            }
            let rgb = c + job.background * t;
            out.color.extend_from_slice(rgb.as_slice());
            out.transmittance.push(t);
            out.states.push(PixelState {
                final_transmittance: t,
                walked,
            });
        }
    }
    out
}

pub(crate) fn blend_forward(
    job: &RenderJob,
    splats: &[Splat],
    tile_lists: &[Vec<usize>],
    grid: &TileGrid,
) -> (RenderedImage, Vec<PixelState>) {
    let (w, h) = (job.camera.width, job.camera.height);
    let tiles: Vec<TileResult> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            render_tile(
                job,
                splats,
                &tile_lists[tile],
                tile_bounds(grid, tile, w, h),
            )
        })
        .collect();
    let mut image = RenderedImage::new(w, h);
    let mut states = vec![
        PixelState {
            final_transmittance: 1.0,
            walked: 0
        };
        w * h
    ];
    for (tile, res) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(grid, tile, w, h);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                image.color[3 * p..3 * p + 3].copy_from_slice(&res.color[3 * k..3 * k + 3]);
                image.transmittance[p] = res.transmittance[k];
                states[p] = res.states[k];
                k += 1;
            }
        }
    }
    (image, states)
}

/// Reverse pass of the blend: given dL/d(pixel color), returns dL/d(splat
/// outputs) for every splat. Tiles run in parallel; their partial sums
/// are merged in tile order.
pub fn blend_backward(
    job: &RenderJob,
    splats: &[Splat],
    tile_lists: &[Vec<usize>],
    pixels: &[PixelState],
    grad_color: &[f64],
) -> Vec<SplatGrad> {
    let (w, h) = (job.camera.width, job.camera.height);
    let grid = TileGrid::new(w, h, job.tile_size);
    let opts = &job.options;
    let partials: Vec<Vec<SplatGrad>> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let list = &tile_lists[tile];
            let mut acc = vec![SplatGrad::default(); list.len()];
            let (x0, y0, x1, y1) = tile_bounds(&grid, tile, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let gc = Vector3::new(
                        grad_color[3 * p],
                        grad_color[3 * p + 1],
                        grad_color[3 * p + 2],
                    );
                    if gc == Vector3::zeros() {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let state = pixels[p];
                    let mut t = state.final_transmittance;
                    // Color contributed by everything behind the current splat.
                    let mut behind = job.background * t;
                    for j in (0..state.walked as usize).rev() {
                        let s = &splats[list[j]];
                        let Some((alpha, g, d)) = splat_alpha(s, px, py, opts) else {
                            continue;
                        };
                        let t_before = t / (1.0 - alpha);
                        let slot = &mut acc[j];
                        slot.color += gc * (t_before * alpha);
                        let dc_dalpha = s.color * t_before - behind / (1.0 - alpha);
                        let g_alpha = gc.dot(&dc_dalpha);
                        behind += s.color * (t_before * alpha);
                        t = t_before;
                        if s.opacity * g > opts.max_alpha {
                            continue;
                        }
                        slot.opacity += g * g_alpha;
                        let g_power = s.opacity * g * g_alpha;
                        let [a, b, c] = s.conic;
                        slot.conic[0] += -0.5 * d.x * d.x * g_power;
                        slot.conic[1] += -d.x * d.y * g_power;
                        slot.conic[2] += -0.5 * d.y * d.y * g_power;
                        // power depends on the mean through d = pixel - mean.
                        slot.mean.x += (a * d.x + b * d.y) * g_power;
                        slot.mean.y += (b * d.x + c * d.y) * g_power;
                    }
                }
            }
            acc
        })
        .collect();
    let mut grads = vec![SplatGrad::default(); splats.len()];
    for (tile, acc) in partials.iter().enumerate() {
        for (j, g) in acc.iter().enumerate() {
            grads[tile_lists[tile][j]].accumulate(g);
        }
    }
    grads
}
