//! Ray marching and volume-rendering composition.
//!
//! Rays step through the unit cube at a fixed interval, skipping cells the
//! occupancy grid marks empty; surviving sample midpoints go through the
//! field and are alpha-composited front to back. Full-image rendering
//! evaluates each ray in small chunks and stops querying the field once the
//! ray's transmittance collapses, so opaque content costs a handful of
//! samples per pixel instead of a full traversal.

use crate::dataset::{generate_ray, Camera, Ray};
use crate::field::{field_forward, FieldCache, FieldModel, FieldOutputs};
use crate::occupancy::OccupancyGrid;
use crate::{Error, Result};

/// Fixed marching step: the unit-cube diagonal split into 1024 steps.
pub const MARCH_STEP: f32 = 1.732_050_807_568_877_2 / 1024.0;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_FLOOR: f32 = 1e-4;
/// Hard cap on samples per ray (the diagonal at [`MARCH_STEP`]).
pub const MAX_SAMPLES_PER_RAY: usize = 1024;
/// Samples evaluated per forward call when rendering. The termination check
/// runs between chunks, so a chunk is the evaluation overshoot past the
/// point where a ray saturates.
pub const RENDER_CHUNK_SAMPLES: usize = 16;

/// Flattened samples for a batch of rays. Samples of one ray are contiguous
/// and front to back; rays may legitimately contribute zero samples.
#[derive(Debug, Default, Clone)]
pub struct SampleBatch {
    /// `len * 3` midpoints in the unit cube.
    pub positions: Vec<f32>,
    /// `len * 3` unit directions (constant per ray).
    pub directions: Vec<f32>,
    /// `len` step lengths, all positive.
    pub dt: Vec<f32>,
    /// `len` owner ray indices, non-decreasing.
    pub ray_id: Vec<usize>,
    /// Rays marched so far (including sample-less ones).
    pub ray_count: usize,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.dt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dt.is_empty()
    }

    pub fn clear(&mut self) {
        self.positions.clear();
        self.directions.clear();
        self.dt.clear();
        self.ray_id.clear();
        self.ray_count = 0;
    }
}

/// March `ray` from `t_near` to `t_far` in [`MARCH_STEP`] increments,
/// emitting a sample at each step midpoint that lands in an occupied cell.
/// Samples append to `batch` under a fresh ray id; returns how many were
/// emitted. Steps are indexed from `t_near` (not accumulated) so long rays
/// do not drift.
pub fn march_ray(ray: &Ray, grid: &OccupancyGrid, max_samples: usize, batch: &mut SampleBatch) -> usize {
    let id = batch.ray_count;
    batch.ray_count += 1;
    let mut emitted = 0usize;
    let mut k = 0u32;
    while emitted < max_samples {
        let t0 = ray.t_near + k as f32 * MARCH_STEP;
        if t0 + MARCH_STEP > ray.t_far {
            break;
        }
        let t_mid = t0 + 0.5 * MARCH_STEP;
        let p = [
            ray.origin[0] + t_mid * ray.direction[0],
            ray.origin[1] + t_mid * ray.direction[1],
            ray.origin[2] + t_mid * ray.direction[2],
        ];
        if grid.is_occupied(p) {
            batch.positions.extend_from_slice(&p);
            batch.directions.extend_from_slice(&ray.direction);
            batch.dt.push(MARCH_STEP);
            batch.ray_id.push(id);
            emitted += 1;
        }
        k += 1;
    }
    emitted
}

/// Composited rays: color with background folded in, opacity, and the
/// per-sample contribution weights.
#[derive(Debug, Default, Clone)]
pub struct RenderResult {
    /// `ray_count * channels`, in [0,1] for inputs in range.
    pub color: Vec<f32>,
    /// `ray_count`, equals the per-ray weight sum.
    pub opacity: Vec<f32>,
    /// One weight per sample; zero past the termination point.
    pub weights: Vec<f32>,
}

impl RenderResult {
    pub fn clear(&mut self) {
        self.color.clear();
        self.opacity.clear();
        self.weights.clear();
    }
}

/// Front-to-back alpha compositing:
/// `alpha_i = 1 - exp(-sigma_i * dt_i)`, `w_i = T_i * alpha_i` with
/// `T_i = prod_{j<i} (1 - alpha_j)`, ray color
/// `sum w_i c_i + (1 - sum w_i) * background`. Accumulation stops once the
/// transmittance falls below [`TRANSMITTANCE_FLOOR`]; later samples get
/// weight zero. Rays without samples return the background with opacity 0.
pub fn composite(
    batch: &SampleBatch,
    sigma: &[f32],
    color: &[f32],
    background: &[f32],
    out: &mut RenderResult,
) {
    let n = batch.len();
    let ch = background.len();
    assert_eq!(sigma.len(), n, "one density per sample");
    assert_eq!(color.len(), n * ch, "one color per sample");

    out.clear();
    out.color.reserve(batch.ray_count * ch);
    out.weights.resize(n, 0.0);
    let mut i = 0usize;
    for ray in 0..batch.ray_count {
        let mut transmittance = 1.0f32;
        let mut w_sum = 0.0f32;
        let mut acc = [0.0f32; 4];
        while i < n && batch.ray_id[i] == ray {
            if transmittance >= TRANSMITTANCE_FLOOR {
                let alpha = 1.0 - (-sigma[i] * batch.dt[i]).exp();
                let w = transmittance * alpha;
                for c in 0..ch {
                    acc[c] += w * color[i * ch + c];
                }
                w_sum += w;
                transmittance *= 1.0 - alpha;
                out.weights[i] = w;
            }
            i += 1;
        }
        for c in 0..ch {
            out.color.push(acc[c] + (1.0 - w_sum) * background[c]);
        }
        out.opacity.push(w_sum);
    }
    assert_eq!(i, n, "ray ids must be non-decreasing and < ray_count");
}

/// Reverse-mode gradients of [`composite`] with respect to per-sample
/// density and color. `d_ray_color` is `ray_count * channels` of upstream
/// gradient; results are written (not accumulated) into `d_sigma` /
/// `d_color`. The background term is differentiated through the opacity, so
/// for sample k with suffix weight-dot `S = sum_{i>k} w_i ((c_i - b) . g)`:
/// `d_sigma_k = dt_k * (T_{k+1} * ((c_k - b) . g) - S)`, `d_color_ki = w_k g_i`.
pub fn composite_backward(
    batch: &SampleBatch,
    sigma: &[f32],
    color: &[f32],
    background: &[f32],
    d_ray_color: &[f32],
    d_sigma: &mut Vec<f32>,
    d_color: &mut Vec<f32>,
) {
    let n = batch.len();
    let ch = background.len();
    assert_eq!(sigma.len(), n, "one density per sample");
    assert_eq!(color.len(), n * ch, "one color per sample");
    assert_eq!(d_ray_color.len(), batch.ray_count * ch, "one gradient per ray");

    d_sigma.clear();
    d_sigma.resize(n, 0.0);
    d_color.clear();
    d_color.resize(n * ch, 0.0);

    // Per-ray: forward replay to find the termination point and per-sample
    // transmittance, then a reverse sweep accumulating the suffix term.
    let mut trans = Vec::with_capacity(64);
    let mut i = 0usize;
    for ray in 0..batch.ray_count {
        let start = i;
        while i < n && batch.ray_id[i] == ray {
            i += 1;
        }
        let g = &d_ray_color[ray * ch..(ray + 1) * ch];

        trans.clear();
        let mut transmittance = 1.0f32;
        let mut active = 0usize; // samples before the termination cut
        for k in start..i {
            if transmittance < TRANSMITTANCE_FLOOR {
                break;
            }
            trans.push(transmittance);
            transmittance *= (-sigma[k] * batch.dt[k]).exp();
            active += 1;
        }

        let mut suffix = 0.0f32; // sum_{i>k} w_i ((c_i - b) . g)
        for k in (start..start + active).rev() {
            let alpha = 1.0 - (-sigma[k] * batch.dt[k]).exp();
            let t_here = trans[k - start];
            let w = t_here * alpha;
            let mut centered_dot = 0.0f32;
            for c in 0..ch {
                centered_dot += (color[k * ch + c] - background[c]) * g[c];
                d_color[k * ch + c] = w * g[c];
            }
            d_sigma[k] = batch.dt[k] * (t_here * (1.0 - alpha) * centered_dot - suffix);
            suffix += w * centered_dot;
        }
    }
}

/// Per-image rendering statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderStats {
    pub rays: usize,
    /// Samples actually evaluated through the field (marched samples past a
    /// ray's termination point are never queried and do not count).
    pub total_samples: usize,
    /// Forward calls issued.
    pub tiles: usize,
    pub mean_samples_per_pixel: f32,
}

/// Render every pixel of `camera`: march each ray, evaluate its samples in
/// [`RENDER_CHUNK_SAMPLES`]-sample chunks, and composite front to back,
/// stopping the evaluation once transmittance falls below
/// [`TRANSMITTANCE_FLOOR`]. Pixel values match [`composite`] over the full
/// marched batch bit for bit; only the work skipped differs. Returns
/// `height * width * channels` values plus evaluation stats.
pub fn render_image(
    model: &FieldModel,
    grid: &OccupancyGrid,
    camera: &Camera,
    background: &[f32],
) -> (Vec<f32>, RenderStats) {
    let ch = model.channels;
    assert_eq!(background.len(), ch, "background must match model channels");
    let rays = camera.width * camera.height;

    let mut image = vec![0.0f32; rays * ch];
    let mut scratch = SampleBatch::default();
    let mut outputs = FieldOutputs::default();
    let mut cache = FieldCache::default();
    let mut total_samples = 0usize;
    let mut tiles = 0usize;

    for v in 0..camera.height {
        for u in 0..camera.width {
            let ray = generate_ray(camera, u, v);
            scratch.clear();
            march_ray(&ray, grid, MAX_SAMPLES_PER_RAY, &mut scratch);

            let mut transmittance = 1.0f32;
            let mut w_sum = 0.0f32;
            let mut acc = [0.0f32; 4];
            let mut s = 0usize;
            while s < scratch.len() && transmittance >= TRANSMITTANCE_FLOOR {
                let upto = (s + RENDER_CHUNK_SAMPLES).min(scratch.len());
                outputs.clear();
                cache.clear();
                field_forward(
                    model,
                    &scratch.positions[s * 3..upto * 3],
                    &scratch.directions[s * 3..upto * 3],
                    &mut outputs,
                    &mut cache,
                );
                tiles += 1;
                total_samples += upto - s;
                for k in s..upto {
                    if transmittance < TRANSMITTANCE_FLOOR {
                        break;
                    }
                    let alpha = 1.0 - (-outputs.sigma[k - s] * scratch.dt[k]).exp();
                    let w = transmittance * alpha;
                    for c in 0..ch {
                        acc[c] += w * outputs.color[(k - s) * ch + c];
                    }
                    w_sum += w;
                    transmittance *= 1.0 - alpha;
                }
                s = upto;
            }

            let px = (v * camera.width + u) * ch;
            for c in 0..ch {
                image[px + c] = acc[c] + (1.0 - w_sum) * background[c];
            }
        }
    }

    let stats = RenderStats {
        rays,
        total_samples,
        tiles,
        mean_samples_per_pixel: total_samples as f32 / rays as f32,
    };
    (image, stats)
}

/// Write float pixels in [0,1] as an 8-bit PNG (grayscale or RGB).
pub fn save_png(path: &std::path::Path, pixels: &[f32], width: usize, height: usize, channels: usize) -> Result<()> {
    assert_eq!(pixels.len(), width * height * channels, "pixel buffer shape mismatch");
    let bytes: Vec<u8> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let err = |e: image::ImageError| Error::Image { path: path.to_path_buf(), source: e };
    match channels {
        1 => image::GrayImage::from_raw(width as u32, height as u32, bytes)
            .expect("buffer sized above")
            .save(path)
            .map_err(err),
        3 => image::RgbImage::from_raw(width as u32, height as u32, bytes)
            .expect("buffer sized above")
            .save(path)
            .map_err(err),
        _ => panic!("PNG output supports 1 or 3 channels, got {channels}"),
    }
}
