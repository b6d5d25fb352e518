//! Input encodings: the multi-resolution hash grid for positions and a
//! degree-3 real spherical-harmonics basis for view directions.
//!
//! Positions live in the unit cube. Each grid level scales the position by
//! its resolution, trilinearly interpolates the eight surrounding table
//! entries, and concatenates the per-level features. Coarse levels index
//! their corners densely; levels whose corner count exceeds the table size
//! fall back to a spatial XOR hash.

use rand::Rng;

/// Geometry of the hash encoding.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HashGridConfig {
    /// Number of resolution levels.
    pub levels: usize,
    /// Features stored per table entry.
    pub features: usize,
    /// log2 of the per-level table capacity; capacity is always a power of two.
    pub table_size_log2: u32,
    /// Grid resolution of the coarsest level.
    pub base_resolution: u32,
    /// Grid resolution of the finest level.
    pub max_resolution: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 16,
            features: 2,
            table_size_log2: 13,
            base_resolution: 16,
            max_resolution: 2048,
        }
    }
}

impl HashGridConfig {
    /// Per-level geometric growth factor.
    pub fn growth(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        ((self.max_resolution as f64 / self.base_resolution as f64).ln()
            / (self.levels - 1) as f64)
            .exp()
    }

    /// Table capacity per level before the dense cutoff.
    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    /// Grid resolution of level `l`: floor(base * growth^l).
    ///
    /// The small epsilon keeps exact powers (the finest level lands exactly on
    /// `max_resolution`) from flooring one short due to rounding in `exp`.
    pub fn level_resolution(&self, level: usize) -> u32 {
        assert!(level < self.levels);
        let ln_b = if self.levels <= 1 {
            0.0
        } else {
            (self.max_resolution as f64 / self.base_resolution as f64).ln() / (self.levels - 1) as f64
        };
        (self.base_resolution as f64 * (level as f64 * ln_b).exp() + 1e-6).floor() as u32
    }

    /// Entries actually stored for level `l`: min(T, (N_l + 1)^3).
    pub fn level_table_len(&self, level: usize) -> usize {
        let n = self.level_resolution(level) as usize + 1;
        (n * n * n).min(self.table_size())
    }

    /// Whether level `l` indexes corners densely (collision-free).
    pub fn level_is_dense(&self, level: usize) -> bool {
        let n = self.level_resolution(level) as usize + 1;
        n * n * n <= self.table_size()
    }

    /// Width of the concatenated feature vector.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    /// Total stored feature values across all levels.
    pub fn total_entries(&self) -> usize {
        (0..self.levels).map(|l| self.level_table_len(l)).sum::<usize>() * self.features
    }
}

/// Large-prime XOR hash used by levels too fine for dense indexing.
const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Map an integer corner to a table slot.
///
/// Corner components must lie in `0..=resolution`. Dense levels use linear
/// indexing (a bijection over the corner lattice); hashed levels XOR the
/// prime-multiplied coordinates in wrapping u32 arithmetic and reduce modulo
/// the table length.
#[inline]
pub fn hash_index(corner: [u32; 3], resolution: u32, table_len: usize) -> usize {
    debug_assert!(corner.iter().all(|&c| c <= resolution));
    let n = resolution as usize + 1;
    if n * n * n <= table_len {
        corner[0] as usize + n * (corner[1] as usize + n * corner[2] as usize)
    } else {
        let h = corner[0]
            .wrapping_mul(HASH_PRIMES[0])
            ^ corner[1].wrapping_mul(HASH_PRIMES[1])
            ^ corner[2].wrapping_mul(HASH_PRIMES[2]);
        // Hashed levels always have a power-of-two length.
        debug_assert!(table_len.is_power_of_two());
        (h as usize) & (table_len - 1)
    }
}

/// The learned feature tables of all levels.
#[derive(Debug, Clone)]
pub struct HashGrid {
    pub config: HashGridConfig,
    /// One flat `table_len * features` array per level.
    pub tables: Vec<Vec<f32>>,
}

/// Magnitude of the uniform table initialization.
pub const GRID_INIT_SCALE: f32 = 1e-4;

impl HashGrid {
    /// Allocate tables initialized uniformly in [-1e-4, 1e-4].
    pub fn init(config: HashGridConfig, rng: &mut impl Rng) -> HashGrid {
        let tables = (0..config.levels)
            .map(|l| {
                let len = config.level_table_len(l) * config.features;
                (0..len).map(|_| rng.random_range(-GRID_INIT_SCALE..=GRID_INIT_SCALE)).collect()
            })
            .collect();
        HashGrid { config, tables }
    }

    /// Zeroed tables with the same shape (gradient accumulators).
    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.tables.iter().map(|t| vec![0.0f32; t.len()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tables.iter().map(|t| t.len()).sum()
    }
}

/// Interpolation state saved by the forward pass for the backward pass:
/// per sample and level, the eight corner entry indices and trilinear weights.
#[derive(Debug, Default, Clone)]
pub struct MrheCache {
    pub samples: usize,
    /// `samples * levels * 8` table entry indices.
    pub corner_index: Vec<u32>,
    /// `samples * levels * 8` trilinear weights.
    pub corner_weight: Vec<f32>,
}

impl MrheCache {
    pub fn clear(&mut self) {
        self.samples = 0;
        self.corner_index.clear();
        self.corner_weight.clear();
    }
}

/// Encode `positions` (flat xyz triples in the unit cube) into per-level
/// trilinear features. Appends `levels * features` values per sample to
/// `out`, and corner indices/weights to `cache`.
pub fn mrhe_forward(grid: &HashGrid, positions: &[f32], out: &mut Vec<f32>, cache: &mut MrheCache) {
    assert_eq!(positions.len() % 3, 0, "positions must be flat xyz triples");
    let n = positions.len() / 3;
    let cfg = &grid.config;
    let f = cfg.features;

    out.reserve(n * cfg.output_dim());
    cache.corner_index.reserve(n * cfg.levels * 8);
    cache.corner_weight.reserve(n * cfg.levels * 8);
    cache.samples += n;

    // Per-level constants hoisted out of the sample loop.
    let level_info: Vec<(u32, usize)> =
        (0..cfg.levels).map(|l| (cfg.level_resolution(l), cfg.level_table_len(l))).collect();

    for s in 0..n {
        let p = &positions[s * 3..s * 3 + 3];
        debug_assert!(
            p.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "position outside the unit cube: {p:?}"
        );
        for (l, &(res, table_len)) in level_info.iter().enumerate() {
            let table = &grid.tables[l];
            // floor+clamp so a coordinate of exactly 1.0 still addresses the
            // last cell (with full weight on its upper corner).
            let mut c0 = [0u32; 3];
            let mut fr = [0f32; 3];
            for a in 0..3 {
                let scaled = p[a] * res as f32;
                let cell = (scaled.floor() as u32).min(res.saturating_sub(1));
                c0[a] = cell;
                fr[a] = scaled - cell as f32;
            }
            let mut acc = [0.0f32; 8];
            debug_assert!(f <= acc.len());
            for corner in 0..8u32 {
                let dx = corner & 1;
                let dy = (corner >> 1) & 1;
                let dz = (corner >> 2) & 1;
                let w = pick(fr[0], dx) * pick(fr[1], dy) * pick(fr[2], dz);
                let idx = hash_index([c0[0] + dx, c0[1] + dy, c0[2] + dz], res, table_len);
                cache.corner_index.push(idx as u32);
                cache.corner_weight.push(w);
                let base = idx * f;
                for (k, a) in acc.iter_mut().enumerate().take(f) {
                    *a += w * table[base + k];
                }
            }
            out.extend_from_slice(&acc[..f]);
        }
    }
}

#[inline]
fn pick(frac: f32, bit: u32) -> f32 {
    if bit == 0 {
        1.0 - frac
    } else {
        frac
    }
}

/// Scatter feature gradients back into per-level table gradient accumulators.
///
/// `d_features` is `samples * levels * features`; `grad_tables` mirrors the
/// grid's table shapes. Contributions are `weight * d_feature`, accumulated
/// in sample order.
pub fn mrhe_backward(
    grid: &HashGrid,
    cache: &MrheCache,
    d_features: &[f32],
    grad_tables: &mut [Vec<f32>],
) {
    let cfg = &grid.config;
    let f = cfg.features;
    let n = cache.samples;
    assert_eq!(d_features.len(), n * cfg.output_dim(), "d_features shape mismatch");
    assert_eq!(cache.corner_index.len(), n * cfg.levels * 8, "cache shape mismatch");
    assert_eq!(grad_tables.len(), cfg.levels, "gradient accumulator level count mismatch");

    let mut slot = 0usize;
    for s in 0..n {
        let drow = &d_features[s * cfg.output_dim()..(s + 1) * cfg.output_dim()];
        for (l, grad) in grad_tables.iter_mut().enumerate() {
            let dl = &drow[l * f..(l + 1) * f];
            for _ in 0..8 {
                let idx = cache.corner_index[slot] as usize;
                let w = cache.corner_weight[slot];
                let base = idx * f;
                for k in 0..f {
                    grad[base + k] += w * dl[k];
                }
                slot += 1;
            }
        }
    }
}

/// Number of spherical-harmonics coefficients (degree 3: l = 0..3).
pub const SH_DIM: usize = 16;

/// Evaluate the real spherical-harmonics basis up to degree 3 at a unit
/// direction, in standard order (l ascending, m from -l to l).
///
/// Directions carry no gradient; they are inputs, not parameters.
#[inline]
pub fn sh_basis(dir: [f32; 3]) -> [f32; SH_DIM] {
    let [x, y, z] = dir;
    debug_assert!(
        ((x * x + y * y + z * z) as f64 - 1.0).abs() < 1e-3,
        "sh_basis expects a unit direction"
    );
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    [
        // l = 0
        0.28209479177387814,
        // l = 1: m = -1, 0, 1
        0.4886025119029199 * y,
        0.4886025119029199 * z,
        0.4886025119029199 * x,
        // l = 2: m = -2..2
        1.0925484305920792 * xy,
        1.0925484305920792 * yz,
        0.31539156525252005 * (3.0 * zz - 1.0),
        1.0925484305920792 * xz,
        0.5462742152960396 * (xx - yy),
        // l = 3: m = -3..3
        0.5900435899266435 * y * (3.0 * xx - yy),
        2.890611442640554 * xy * z,
        0.4570457994644658 * y * (5.0 * zz - 1.0),
        0.3731763325901154 * z * (5.0 * zz - 3.0),
        0.4570457994644658 * x * (5.0 * zz - 1.0),
        1.445305721320277 * z * (xx - yy),
        0.5900435899266435 * x * (xx - 3.0 * yy),
    ]
}

/// Encode unit directions (flat xyz triples) into SH features, appending
/// `SH_DIM` values per direction to `out`.
pub fn sh_encode(dirs: &[f32], out: &mut Vec<f32>) {
    assert_eq!(dirs.len() % 3, 0, "directions must be flat xyz triples");
    for d in dirs.chunks_exact(3) {
        out.extend_from_slice(&sh_basis([d[0], d[1], d[2]]));
    }
}
