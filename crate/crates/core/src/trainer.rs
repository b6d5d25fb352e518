//! The optimization loop: tile packing, Huber loss, Adam with full-precision
//! master weights, gradient accumulation, and periodic occupancy updates.
//!
//! A training step draws random pixels, marches their rays, and fits the
//! composited ray colors to the ground truth. Samples are processed in
//! fixed-size tiles whose gradients accumulate into full-precision buffers;
//! one optimizer step fires after the whole effective batch, so tiling
//! decouples compute-buffer size from the optimization batch size.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{generate_ray, sample_training_pixels, PixelBatch, Scene};
use crate::encoding::HashGridConfig;
use crate::field::{field_backward, field_forward, FieldCache, FieldModel, FieldOutputs, Gradients, Precision};
use crate::metrics::psnr;
use crate::occupancy::OccupancyGrid;
use crate::renderer::{composite, composite_backward, march_ray, render_image, save_png, RenderResult, SampleBatch};
use crate::tensor::f16_roundtrip;
use crate::{checkpoint, Error, Result};

/// Initial samples-per-ray estimate for tile packing.
const SAMPLES_PER_RAY_INIT: f32 = 16.0;
/// EMA decay of the samples-per-ray estimate.
const SAMPLES_PER_RAY_DECAY: f32 = 0.9;

/// Everything one training run needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per optimizer step (the effective batch B).
    pub effective_batch: usize,
    /// Samples per compute tile; must divide `effective_batch`.
    pub tile: usize,
    /// Distinct images drawn per step.
    pub img_per_step: usize,
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps_adam: f32,
    /// Coupled L2 decay, MLP parameters only.
    pub weight_decay_mlp: f32,
    pub huber_delta: f32,
    /// Occupancy sweep period in steps.
    pub grid_update_every: usize,
    pub seed: u64,
    pub grid: HashGridConfig,
    pub channels: usize,
    pub precision: Precision,
    pub occupancy_resolution: usize,
    /// Render an evaluation view every this many steps (0 = never).
    pub eval_every: usize,
    /// Write a checkpoint every this many steps (0 = never); a final
    /// checkpoint is always written when `out_dir` is set.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    /// 1 = fully sequential (bit-reproducible); >1 = tile-parallel with a
    /// deterministic merge.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            effective_batch: 8192,
            tile: 1024,
            img_per_step: 1,
            lr: 1e-2,
            betas: (0.9, 0.99),
            eps_adam: 1e-15,
            weight_decay_mlp: 1e-6,
            huber_delta: 0.1,
            grid_update_every: 256,
            seed: 42,
            grid: HashGridConfig::default(),
            channels: 3,
            precision: Precision::Mixed16,
            occupancy_resolution: 128,
            eval_every: 0,
            checkpoint_every: 1000,
            out_dir: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Tiles accumulated per step.
    pub fn accumulation(&self) -> usize {
        assert!(
            self.tile > 0 && self.effective_batch % self.tile == 0,
            "tile size {} must divide effective batch {}",
            self.tile,
            self.effective_batch
        );
        self.effective_batch / self.tile
    }

    /// Training/evaluation background: white for RGB, black for grayscale.
    pub fn background(&self) -> Vec<f32> {
        match self.channels {
            1 => vec![0.0],
            _ => vec![1.0; self.channels],
        }
    }
}

/// Elementwise Huber penalty summed over the batch, scaled by `scale`;
/// gradients (also scaled) append to `d_pred`. Splitting a batch across
/// calls and summing is exact because the scale is applied per element.
pub fn huber_loss_scaled(pred: &[f32], target: &[f32], delta: f32, scale: f32, d_pred: &mut Vec<f32>) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction/target shape mismatch");
    let mut loss = 0.0f64;
    d_pred.reserve(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let e = p - t;
        if e.abs() <= delta {
            loss += 0.5 * (e as f64) * (e as f64);
            d_pred.push(e * scale);
        } else {
            loss += (delta * (e.abs() - 0.5 * delta)) as f64;
            d_pred.push(delta * e.signum() * scale);
        }
    }
    loss * scale as f64
}

/// Mean Huber loss and its gradient.
pub fn huber_loss(pred: &[f32], target: &[f32], delta: f32) -> (f64, Vec<f32>) {
    let mut d_pred = Vec::new();
    let scale = 1.0 / pred.len().max(1) as f32;
    let loss = huber_loss_scaled(pred, target, delta, scale, &mut d_pred);
    (loss, d_pred)
}

/// Adam moments plus full-precision master weights, in
/// `FieldModel::visit_params` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Full-precision copies updated each step; storage parameters are
    /// re-quantized from these.
    pub masters: Vec<Vec<f32>>,
    pub step: u64,
    /// Steps skipped because the gradient was non-finite.
    pub skipped: usize,
}

impl AdamState {
    pub fn new(model: &FieldModel) -> AdamState {
        let mut masters = Vec::new();
        model.visit_params(|_, _, data| masters.push(data.to_vec()));
        let zeros: Vec<Vec<f32>> = masters.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, masters, step: 0, skipped: 0 }
    }

    /// Re-seed the master weights from the model's stored parameters, e.g.
    /// after external parameters were loaded into the model. Moments and the
    /// step counter are kept.
    pub fn refresh_masters(&mut self, model: &FieldModel) {
        let mut i = 0;
        model.visit_params(|_, _, data| {
            self.masters[i].copy_from_slice(data);
            i += 1;
        });
    }
}

/// One bias-corrected Adam update on the master weights, re-quantized into
/// the model's storage precision. Weight decay is coupled (added to the
/// gradient) and touches MLP tensors only. A non-finite gradient skips the
/// update entirely and returns false.
pub fn adam_step(model: &mut FieldModel, grads: &Gradients, state: &mut AdamState, config: &TrainConfig) -> bool {
    if !grads.all_finite() {
        state.skipped += 1;
        return false;
    }
    // Flat gradient view in `visit_params` order: grid levels, then
    // (weights, biases) per MLP layer.
    let mut flat: Vec<&[f32]> = Vec::with_capacity(state.masters.len());
    for g in &grads.grid {
        flat.push(g);
    }
    for mlp in [&grads.density, &grads.color] {
        for (w, b) in &mlp.layers {
            flat.push(w);
            flat.push(b);
        }
    }
    assert_eq!(flat.len(), state.masters.len(), "gradient/parameter tensor count mismatch");

    state.step += 1;
    let (b1, b2) = config.betas;
    let m_corr = 1.0 / (1.0 - b1.powi(grads_step_i32(state.step)));
    let v_corr = 1.0 / (1.0 - b2.powi(grads_step_i32(state.step)));
    let n_levels = model.grid.config.levels;
    let quantize = model.precision == Precision::Mixed16;

    let mut idx = 0usize;
    model.visit_params_mut(|_, data| {
        let g_slice = flat[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let masters = &mut state.masters[idx];
        let decay = if idx >= n_levels { config.weight_decay_mlp } else { 0.0 };
        for j in 0..data.len() {
            let g = g_slice[j] + decay * masters[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] * m_corr;
            let v_hat = v[j] * v_corr;
            masters[j] -= config.lr * m_hat / (v_hat.sqrt() + config.eps_adam);
            data[j] = if quantize { f16_roundtrip(masters[j]) } else { masters[j] };
        }
        idx += 1;
    });
    true
}

fn grads_step_i32(step: u64) -> i32 {
    step.min(i32::MAX as u64) as i32
}

/// One packed compute tile: whole rays, at most `tile` samples.
#[derive(Debug, Default, Clone)]
pub struct Tile {
    pub batch: SampleBatch,
    /// `ray_count * channels` ground-truth colors.
    pub targets: Vec<f32>,
}

/// Mutable training-loop state threaded through steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    /// EMA estimate of samples per ray, used to size ray draws.
    pub samples_per_ray: f32,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: &FieldModel, seed: u64) -> TrainState {
        TrainState {
            adam: AdamState::new(model),
            samples_per_ray: SAMPLES_PER_RAY_INIT,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }
}

/// Draw pixels and march their rays until `tile_size` samples are packed.
/// The ray draw count is `max(1, floor(tile_size / samples_per_ray))`; rays
/// are kept whole, and one that would overflow the tile is dropped (with
/// everything after it). Returns the tile and its mean samples per packed
/// ray for the EMA update.
pub fn build_tile(
    scene: &Scene,
    frames: &[usize],
    grid: &OccupancyGrid,
    rng: &mut ChaCha8Rng,
    tile_size: usize,
    img_per_step: usize,
    samples_per_ray: f32,
) -> (Tile, f32) {
    let n_rays = ((tile_size as f32 / samples_per_ray.max(1.0)) as usize).clamp(1, tile_size);
    let mut pixels = PixelBatch::default();
    sample_training_pixels(scene, rng, n_rays, img_per_step, frames, &mut pixels);

    let mut tile = Tile::default();
    let ch = scene.channels;
    let mut scratch = SampleBatch::default();
    for i in 0..pixels.len() {
        let ray = generate_ray(&scene.cameras[pixels.frames[i]], pixels.us[i], pixels.vs[i]);
        scratch.clear();
        march_ray(&ray, grid, tile_size, &mut scratch);
        if tile.batch.len() + scratch.len() > tile_size {
            break;
        }
        let id = tile.batch.ray_count;
        tile.batch.positions.extend_from_slice(&scratch.positions);
        tile.batch.directions.extend_from_slice(&scratch.directions);
        tile.batch.dt.extend_from_slice(&scratch.dt);
        tile.batch.ray_id.extend(std::iter::repeat_n(id, scratch.len()));
        tile.batch.ray_count += 1;
        tile.targets.extend_from_slice(&pixels.targets[i * ch..(i + 1) * ch]);
    }
    let mean = tile.batch.len() as f32 / tile.batch.ray_count.max(1) as f32;
    (tile, mean)
}

/// Scratch buffers reused across tiles.
#[derive(Debug, Default)]
struct TileScratch {
    outputs: FieldOutputs,
    cache: FieldCache,
    result: RenderResult,
    d_pred: Vec<f32>,
    d_sigma: Vec<f32>,
    d_color: Vec<f32>,
}

/// Forward + backward for one tile; the Huber gradient is pre-scaled by
/// `scale`. Returns the scaled loss contribution.
fn tile_pass(
    model: &FieldModel,
    tile: &Tile,
    background: &[f32],
    delta: f32,
    scale: f32,
    grads: &mut Gradients,
    scratch: &mut TileScratch,
) -> f64 {
    let s = scratch;
    s.outputs.clear();
    s.cache.clear();
    field_forward(model, &tile.batch.positions, &tile.batch.directions, &mut s.outputs, &mut s.cache);
    composite(&tile.batch, &s.outputs.sigma, &s.outputs.color, background, &mut s.result);

    s.d_pred.clear();
    let loss = huber_loss_scaled(&s.result.color, &tile.targets, delta, scale, &mut s.d_pred);
    composite_backward(
        &tile.batch,
        &s.outputs.sigma,
        &s.outputs.color,
        background,
        &s.d_pred,
        &mut s.d_sigma,
        &mut s.d_color,
    );
    field_backward(model, &s.outputs, &s.cache, &s.d_sigma, &s.d_color, grads);
    loss
}

/// One optimization step: an occupancy sweep when due (before the step, at
/// multiples of `grid_update_every` after warm-up), `accumulation()` packed
/// tiles whose gradients sum into one full-precision buffer, then a single
/// Adam update. Returns the step's mean Huber loss per color element.
pub fn train_step(
    model: &mut FieldModel,
    occupancy: &mut OccupancyGrid,
    state: &mut TrainState,
    scene: &Scene,
    frames: &[usize],
    config: &TrainConfig,
    grads: &mut Gradients,
) -> f64 {
    if config.grid_update_every > 0 && state.step > 0 && state.step % config.grid_update_every == 0 {
        occupancy.update_grid(model, &mut state.rng);
        // A sweep that empties the whole grid would halt sampling for good
        // (no samples, no gradient, so the density could never recover).
        // Keep marching everywhere until some cell clears the threshold.
        if !occupancy.occupied.iter().any(|&b| b) {
            occupancy.occupied.fill(true);
        }
    }

    // Pack all tiles first: the RNG stream and the samples-per-ray EMA stay
    // identical whether tiles are processed sequentially or in parallel.
    let mut tiles = Vec::with_capacity(config.accumulation());
    for _ in 0..config.accumulation() {
        let (tile, mean) = build_tile(
            scene,
            frames,
            occupancy,
            &mut state.rng,
            config.tile,
            config.img_per_step,
            state.samples_per_ray,
        );
        if tile.batch.ray_count > 0 {
            // Floor at one sample per ray: sparse scenes yield many empty rays,
            // and an unbounded decay here would inflate the ray draw count.
            state.samples_per_ray = (SAMPLES_PER_RAY_DECAY * state.samples_per_ray
                + (1.0 - SAMPLES_PER_RAY_DECAY) * mean)
                .max(1.0);
        }
        tiles.push(tile);
    }
    let elements: usize = tiles.iter().map(|t| t.targets.len()).sum();
    let scale = 1.0 / elements.max(1) as f32;
    let background = config.background();

    grads.zero();
    let loss = if config.threads > 1 {
        // Per-tile gradient buffers merged in tile order: deterministic for
        // a fixed tile split, independent of scheduling.
        let partials: Vec<(f64, Gradients)> = tiles
            .par_iter()
            .map(|tile| {
                let mut g = Gradients::zeros_like(model);
                let mut scratch = TileScratch::default();
                let l = tile_pass(model, tile, &background, config.huber_delta, scale, &mut g, &mut scratch);
                (l, g)
            })
            .collect();
        let mut loss = 0.0;
        for (l, g) in &partials {
            loss += l;
            grads.add_assign(g);
        }
        loss
    } else {
        let mut scratch = TileScratch::default();
        let mut loss = 0.0;
        for tile in &tiles {
            loss += tile_pass(model, tile, &background, config.huber_delta, scale, grads, &mut scratch);
        }
        loss
    };

    adam_step(model, grads, &mut state.adam, config);
    state.step += 1;
    loss
}

/// Mean PSNR of the model's renders against ground truth over `frames`.
pub fn evaluate(
    model: &FieldModel,
    occupancy: &OccupancyGrid,
    scene: &Scene,
    frames: &[usize],
    background: &[f32],
) -> f32 {
    assert!(!frames.is_empty(), "evaluation frame set is empty");
    let mut total = 0.0f32;
    for &f in frames {
        let (render, _) = render_image(model, occupancy, &scene.cameras[f], background);
        total += psnr(&render, &scene.images[f]);
    }
    total / frames.len() as f32
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    /// Present on evaluation steps.
    pub psnr: Option<f32>,
    pub elapsed_ms: f64,
}

/// Per-step losses plus periodic evaluations.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// CSV with header `step,loss,psnr,elapsed_ms`; psnr is blank on
    /// non-evaluation steps.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut text = String::from("step,loss,psnr,elapsed_ms\n");
        for e in &self.entries {
            let psnr = e.psnr.map(|p| format!("{p:.4}")).unwrap_or_default();
            text.push_str(&format!("{},{:.6e},{},{:.3}\n", e.step, e.loss, psnr, e.elapsed_ms));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: FieldModel,
    pub occupancy: OccupancyGrid,
    pub log: TrainLog,
}

/// Train a fresh model on `frames` of `scene` (pass the full training split
/// for centralized runs). Periodically renders an evaluation view (first
/// test frame, else first training frame) and writes checkpoints when
/// configured.
pub fn train(scene: &Scene, frames: &[usize], config: &TrainConfig) -> Result<TrainOutcome> {
    assert!(!frames.is_empty(), "training frame set is empty");
    assert_eq!(scene.channels, config.channels, "scene/config channel mismatch");
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FieldModel::init(config.grid, config.channels, config.precision, &mut rng);
    let mut occupancy = OccupancyGrid::new(config.occupancy_resolution);
    let mut state = TrainState::new(&model, config.seed.wrapping_add(1));
    let mut grads = Gradients::zeros_like(&model);
    let mut log = TrainLog::default();

    let eval_frame = scene.test_frames().first().copied().or_else(|| frames.first().copied());
    let background = config.background();
    let started = Instant::now();
    let mut last_mark = started.elapsed();

    for step in 0..config.steps {
        let loss = train_step(&mut model, &mut occupancy, &mut state, scene, frames, config, &mut grads);

        let eval_now = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        let psnr_val = match (eval_now, eval_frame) {
            (true, Some(f)) => {
                let cam = &scene.cameras[f];
                let (render, _) = render_image(&model, &occupancy, cam, &background);
                if let Some(dir) = &config.out_dir {
                    let path = dir.join(format!("render_{:06}.png", step + 1));
                    save_png(&path, &render, cam.width, cam.height, config.channels)?;
                }
                Some(psnr(&render, &scene.images[f]))
            }
            _ => None,
        };
        let now = started.elapsed();
        log.entries.push(LogEntry {
            step,
            loss,
            psnr: psnr_val,
            elapsed_ms: (now - last_mark).as_secs_f64() * 1e3,
        });
        last_mark = now;

        if let Some(dir) = &config.out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("step_{:06}.tdnf", step + 1));
                checkpoint::save_checkpoint(&path, &model, Some(&occupancy))?;
            }
        }
    }
    if let Some(dir) = &config.out_dir {
        checkpoint::save_checkpoint(&dir.join("final.tdnf"), &model, Some(&occupancy))?;
        log.write_csv(&dir.join("train_log.csv"))?;
    }
    Ok(TrainOutcome { model, occupancy, log })
}
