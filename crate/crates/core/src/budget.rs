//! Analytic memory and arithmetic accounting per configuration, and the
//! (batch size, table size) sweep that maps the memory/quality trade-off.
//!
//! All byte counts are derived from the configuration alone — nothing is
//! measured — so reports are exact, reproducible, and cheap enough to sweep.

use std::path::Path;

use crate::encoding::{HashGridConfig, SH_DIM};
use crate::field::{Precision, DENSITY_OUT_DIM, GEO_DIM, HIDDEN_DIM};
use crate::metrics::{psnr, ssim};
use crate::renderer::render_image;
use crate::trainer::{train, TrainConfig};
use crate::{dataset::Scene, Error, Result};

/// Shape of the training data, for image-storage accounting.
#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl SceneSpec {
    pub fn of(scene: &Scene) -> SceneSpec {
        let cam = &scene.cameras[0];
        SceneSpec {
            frames: scene.train_frames().len(),
            width: cam.width,
            height: cam.height,
            channels: scene.channels,
        }
    }
}

/// Itemized bytes and arithmetic of one training configuration.
///
/// `total_bytes` is exactly the sum of the seven items; annotations
/// (per-sample activation size, per-step image working set) are derived
/// figures, not additional items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetReport {
    /// Hash-table features at storage precision.
    pub hash_bytes: u64,
    /// Both MLPs' weights and biases at storage precision.
    pub mlp_bytes: u64,
    /// Adam moments plus master weights, always full precision.
    pub optimizer_bytes: u64,
    /// Full-precision gradient accumulators.
    pub gradient_bytes: u64,
    /// Occupancy density EMA at 16 bits per cell.
    pub occupancy_bytes: u64,
    /// Cached forward tensors for one effective batch (16-bit accounting);
    /// exactly linear in the batch size.
    pub activation_bytes: u64,
    /// The training split at 8 bits per channel.
    pub image_bytes: u64,
    /// Cached bytes per sample (the activation item divided by the batch).
    pub activation_bytes_per_sample: u64,
    /// Images resident per step at `img_per_step` draws.
    pub image_working_bytes: u64,
    /// Arithmetic per optimizer step, counting each multiply-accumulate
    /// as two operations.
    pub ops_per_step: u64,
}

impl BudgetReport {
    pub fn total_bytes(&self) -> u64 {
        self.hash_bytes
            + self.mlp_bytes
            + self.optimizer_bytes
            + self.gradient_bytes
            + self.occupancy_bytes
            + self.activation_bytes
            + self.image_bytes
    }
}

/// Feature values stored across all hash-grid levels.
fn hash_entries(grid: &HashGridConfig) -> u64 {
    grid.total_entries() as u64
}

/// Weight + bias count of both MLPs for this configuration.
fn mlp_params(grid: &HashGridConfig, channels: usize) -> u64 {
    let density = [grid.output_dim(), HIDDEN_DIM, DENSITY_OUT_DIM];
    let color = [GEO_DIM + SH_DIM, HIDDEN_DIM, HIDDEN_DIM, channels];
    let count = |dims: &[usize]| -> u64 {
        dims.windows(2).map(|d| (d[0] * d[1] + d[1]) as u64).sum()
    };
    count(&density) + count(&color)
}

/// Cached forward-pass values per sample: everything the backward pass
/// reads, counted at 16 bits. Covers the ray sample itself, interpolation
/// corners, both MLP caches, the heads, and the compositing weight.
fn activation_values_per_sample(grid: &HashGridConfig, channels: usize) -> u64 {
    let sample = 3 + 3 + 1 + 1; // position, direction, dt, ray id
    let mrhe = grid.levels * 8 * 2; // corner indices and trilinear weights
    let feats = grid.output_dim();
    let density = HIDDEN_DIM + DENSITY_OUT_DIM; // hidden + raw output
    let color_in = GEO_DIM + SH_DIM;
    let color = HIDDEN_DIM + HIDDEN_DIM + channels; // two hidden + logits
    let heads = 1 + channels; // sigma and activated color
    let compositing = 1; // per-sample weight
    (sample + mrhe + feats + density + color_in + color + heads + compositing) as u64
}

/// Forward multiply-accumulates per sample.
fn forward_macs_per_sample(grid: &HashGridConfig, channels: usize) -> u64 {
    let mrhe = (grid.levels * 8 * grid.features) as u64;
    let density = (grid.output_dim() * HIDDEN_DIM + HIDDEN_DIM * DENSITY_OUT_DIM) as u64;
    let color = ((GEO_DIM + SH_DIM) * HIDDEN_DIM + HIDDEN_DIM * HIDDEN_DIM + HIDDEN_DIM * channels) as u64;
    let compositing = (2 + channels) as u64; // alpha, transmittance, weighted color
    mrhe + density + color + compositing
}

/// Analytic operation count of one optimizer step: forward plus a 2x
/// backward estimate over the effective batch, two ops per
/// multiply-accumulate. Linear in the batch size and independent of the
/// table size.
pub fn ops_per_step(config: &TrainConfig) -> u64 {
    let macs = 3 * forward_macs_per_sample(&config.grid, config.channels);
    2 * macs * config.effective_batch as u64
}

/// Itemized memory footprint of `config` training on `scene`.
pub fn memory_footprint(config: &TrainConfig, scene: &SceneSpec) -> BudgetReport {
    let value_bytes = match config.precision {
        Precision::Full32 => 4,
        Precision::Mixed16 => 2,
    } as u64;
    let hash = hash_entries(&config.grid);
    let mlp = mlp_params(&config.grid, config.channels);
    let params = hash + mlp;
    let per_sample = 2 * activation_values_per_sample(&config.grid, config.channels);
    let image = (scene.frames * scene.width * scene.height * scene.channels) as u64;

    BudgetReport {
        hash_bytes: hash * value_bytes,
        mlp_bytes: mlp * value_bytes,
        optimizer_bytes: 3 * params * 4,
        gradient_bytes: params * 4,
        occupancy_bytes: 2 * config.occupancy_resolution.pow(3) as u64,
        activation_bytes: per_sample * config.effective_batch as u64,
        image_bytes: image,
        activation_bytes_per_sample: per_sample,
        image_working_bytes: (config.img_per_step * scene.width * scene.height * scene.channels) as u64,
        ops_per_step: ops_per_step(config),
    }
}

/// One (batch size, table size) configuration of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub batch: usize,
    pub table_log2: u32,
}

/// The operating point highlighted in sweep output.
pub const SELECTED_POINT: SweepPoint = SweepPoint { batch: 8192, table_log2: 13 };

/// One evaluated sweep row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub report: BudgetReport,
    pub psnr: f32,
    pub ssim: f32,
}

/// Train every `(B, T)` point for `steps` steps (a reduced count is fine for
/// ranking) and evaluate on `eval_frames` test views. Returns the rows and,
/// when `csv` is given, writes
/// `B,T_log2,mem_bytes_total,mem_bytes_hash,mem_bytes_grid,mem_bytes_act,mem_bytes_opt,mem_bytes_img,gops_per_step,psnr,ssim,selected`.
pub fn sweep(
    points: &[SweepPoint],
    scene: &Scene,
    base: &TrainConfig,
    steps: usize,
    eval_frames: &[usize],
    csv: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    assert!(!eval_frames.is_empty(), "sweep needs at least one evaluation frame");
    let spec = SceneSpec::of(scene);
    let frames = scene.train_frames();
    let background = base.background();
    let mut rows = Vec::with_capacity(points.len());

    for point in points {
        let mut config = TrainConfig {
            steps,
            effective_batch: point.batch,
            out_dir: None,
            eval_every: 0,
            checkpoint_every: 0,
            ..base.clone()
        };
        config.grid.table_size_log2 = point.table_log2;
        if config.tile > config.effective_batch {
            config.tile = config.effective_batch;
        }
        let outcome = train(scene, &frames, &config)?;

        let mut psnr_sum = 0.0f32;
        let mut ssim_sum = 0.0f32;
        for &f in eval_frames {
            let (render, _) = render_image(&outcome.model, &outcome.occupancy, &scene.cameras[f], &background);
            psnr_sum += psnr(&render, &scene.images[f]);
            let cam = &scene.cameras[f];
            ssim_sum += ssim(&render, &scene.images[f], cam.width, cam.height, scene.channels)?;
        }
        let n = eval_frames.len() as f32;
        rows.push(SweepRow {
            point: *point,
            report: memory_footprint(&config, &spec),
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
        });
    }

    if let Some(path) = csv {
        let mut text = String::from(
            "B,T_log2,mem_bytes_total,mem_bytes_hash,mem_bytes_grid,mem_bytes_act,mem_bytes_opt,mem_bytes_img,gops_per_step,psnr,ssim,selected\n",
        );
        for row in &rows {
            let r = &row.report;
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6},{:.4},{:.5},{}\n",
                row.point.batch,
                row.point.table_log2,
                r.total_bytes(),
                r.hash_bytes,
                r.occupancy_bytes,
                r.activation_bytes,
                r.optimizer_bytes,
                r.image_bytes,
                r.ops_per_step as f64 / 1e9,
                row.psnr,
                row.ssim,
                (row.point == SELECTED_POINT) as u8,
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(rows)
}
