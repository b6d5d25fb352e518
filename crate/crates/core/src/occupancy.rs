//! Density EMA volume and binary occupancy for empty-space skipping.
//!
//! A coarse cube of density estimates tracks the field while it trains: every
//! cell keeps an exponential moving maximum of densities sampled inside it,
//! stored at f16 like the rest of the transmitted state. Cells whose density
//! would contribute more than [`OPACITY_THRESHOLD`] alpha over one marching
//! step are flagged occupied; the ray marcher only takes samples there.

use rand::Rng;

use crate::field::{field_density, FieldCache, FieldModel};
use crate::renderer::MARCH_STEP;
use crate::tensor::f16_roundtrip;

/// Cells per axis of the occupancy volume.
pub const GRID_RESOLUTION: usize = 128;
/// Per-update decay of the density EMA.
pub const EMA_DECAY: f32 = 0.95;
/// A cell is occupied when one marching step through it would contribute
/// more than this much alpha: `density * MARCH_STEP > OPACITY_THRESHOLD`.
pub const OPACITY_THRESHOLD: f32 = 0.01;
/// Cells queried per density batch during a sweep.
const SWEEP_CHUNK: usize = 4096;

/// Density EMA volume plus the binarized occupancy bits.
///
/// Cell `(x, y, z)` lives at index `x + resolution * (y + resolution * z)`.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub resolution: usize,
    /// Per-cell density EMA, f16-quantized, `resolution^3` values >= 0.
    pub density_ema: Vec<f32>,
    /// Per-cell occupancy bit, kept in sync with `density_ema` by
    /// [`OccupancyGrid::recompute_bits`].
    pub occupied: Vec<bool>,
    pub decay: f32,
    pub opacity_threshold: f32,
}

impl OccupancyGrid {
    /// A fresh grid marks every cell occupied so early training sees the
    /// whole volume; the EMA starts at zero and fills in on the first sweep.
    pub fn new(resolution: usize) -> OccupancyGrid {
        let cells = resolution * resolution * resolution;
        OccupancyGrid {
            resolution,
            density_ema: vec![0.0; cells],
            occupied: vec![true; cells],
            decay: EMA_DECAY,
            opacity_threshold: OPACITY_THRESHOLD,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.density_ema.len()
    }

    /// Index of the cell containing `p`; coordinates are floored and clamped
    /// so the `p = 1.0` face reads the last cell instead of overflowing.
    #[inline]
    pub fn cell_index(&self, p: [f32; 3]) -> usize {
        let r = self.resolution;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = ((p[a] * r as f32).floor() as i64).clamp(0, r as i64 - 1) as usize;
        }
        idx[0] + r * (idx[1] + r * idx[2])
    }

    /// Occupancy bit of the cell containing `p` (in the unit cube).
    #[inline]
    pub fn is_occupied(&self, p: [f32; 3]) -> bool {
        self.occupied[self.cell_index(p)]
    }

    /// Fraction of cells currently occupied.
    pub fn occupied_fraction(&self) -> f32 {
        let set = self.occupied.iter().filter(|&&b| b).count();
        set as f32 / self.occupied.len().max(1) as f32
    }

    /// Sweep the whole volume: query the field once per cell at a uniformly
    /// jittered point, fold the result into the density EMA, and recompute
    /// the occupancy bits. Cells are visited in index order and the RNG is
    /// drawn three uniforms per cell, so the sweep is deterministic.
    pub fn update_grid(&mut self, model: &FieldModel, rng: &mut impl Rng) {
        let r = self.resolution;
        let inv_r = 1.0 / r as f32;
        let mut positions = Vec::with_capacity(SWEEP_CHUNK * 3);
        let mut sigma = Vec::with_capacity(SWEEP_CHUNK);
        let mut cache = FieldCache::default();
        let mut chunk_start = 0usize;

        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    positions.push((x as f32 + rng.random::<f32>()) * inv_r);
                    positions.push((y as f32 + rng.random::<f32>()) * inv_r);
                    positions.push((z as f32 + rng.random::<f32>()) * inv_r);
                    if positions.len() == SWEEP_CHUNK * 3 {
                        self.absorb_chunk(model, chunk_start, &positions, &mut sigma, &mut cache);
                        chunk_start += SWEEP_CHUNK;
                        positions.clear();
                    }
                }
            }
        }
        if !positions.is_empty() {
            self.absorb_chunk(model, chunk_start, &positions, &mut sigma, &mut cache);
        }
        self.recompute_bits();
    }

    fn absorb_chunk(
        &mut self,
        model: &FieldModel,
        start: usize,
        positions: &[f32],
        sigma: &mut Vec<f32>,
        cache: &mut FieldCache,
    ) {
        sigma.clear();
        cache.clear();
        field_density(model, positions, sigma, cache);
        for (i, &s) in sigma.iter().enumerate() {
            let cell = start + i;
            self.density_ema[cell] = f16_roundtrip((self.decay * self.density_ema[cell]).max(s));
        }
    }

    /// Re-binarize every cell from the threshold rule. Callers that edit
    /// `density_ema` directly must call this to restore the invariant.
    pub fn recompute_bits(&mut self) {
        for (bit, &ema) in self.occupied.iter_mut().zip(&self.density_ema) {
            *bit = ema * MARCH_STEP > self.opacity_threshold;
        }
    }

    /// Pack the occupancy bits LSB-first into bytes (for serialization).
    pub fn packed_bits(&self) -> Vec<u8> {
        pack_bits(&self.occupied)
    }

    /// Restore occupancy bits from an LSB-first byte packing.
    pub fn set_packed_bits(&mut self, bytes: &[u8]) {
        let cells = self.cell_count();
        assert_eq!(bytes.len(), cells.div_ceil(8), "packed bitfield length mismatch");
        for (i, bit) in self.occupied.iter_mut().enumerate() {
            *bit = bytes[i / 8] >> (i % 8) & 1 == 1;
        }
    }
}

/// LSB-first bit packing; the trailing partial byte is zero-padded.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}
