//! The radiance field network: a density MLP on hash-grid features and a
//! color MLP on geometry features plus the SH-encoded view direction.
//!
//! All math runs in f32. Layers are fully connected with ReLU between hidden
//! layers and a linear final layer; heads (exp for density, logistic for
//! color) are applied by [`field_forward`]. Backward passes accumulate
//! parameter gradients in strict sample order so that accumulating a batch in
//! several pieces is bit-identical to one pass over the concatenation.

use rand::Rng;

use crate::encoding::{self, HashGrid, HashGridConfig, MrheCache, SH_DIM};
use crate::tensor::{quantize_f16_slice, Dtype, NamedTensors, Tensor};
use crate::{Error, Result};

/// Log-density is clamped to this magnitude before `exp`.
pub const LOG_DENSITY_CLAMP: f32 = 15.0;

/// Width of the hidden layers in both MLPs.
pub const HIDDEN_DIM: usize = 64;

/// Density MLP output width: one log-density plus geometry features.
pub const DENSITY_OUT_DIM: usize = 16;

/// Geometry features handed from the density MLP to the color MLP.
pub const GEO_DIM: usize = DENSITY_OUT_DIM - 1;

/// One fully connected layer; weights are row-major `[out][in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Dense {
    /// He-style uniform init: w ~ U(+-sqrt(6 / fan_in)), zero biases.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Dense {
        let bound = (6.0 / in_dim as f32).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Dense { in_dim, out_dim, w, b: vec![0.0; out_dim] }
    }
}

/// A stack of dense layers: ReLU after every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims.windows(2).map(|d| Dense::init(d[0], d[1], rng)).collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Gradient buffers mirroring an MLP's layer shapes.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    /// `(d_weights, d_biases)` per layer.
    pub layers: Vec<(Vec<f32>, Vec<f32>)>,
}

impl MlpGradients {
    pub fn zeros_like(mlp: &Mlp) -> MlpGradients {
        MlpGradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for (w, b) in &mut self.layers {
            w.fill(0.0);
            b.fill(0.0);
        }
    }
}

/// Post-activation hidden rows saved by the forward pass.
#[derive(Debug, Default, Clone)]
pub struct MlpCache {
    /// One `samples * dim` buffer per hidden layer.
    pub hidden: Vec<Vec<f32>>,
    pub samples: usize,
}

impl MlpCache {
    pub fn clear(&mut self) {
        for h in &mut self.hidden {
            h.clear();
        }
        self.samples = 0;
    }
}

/// Deterministic 8-lane dot product (fixed reassociation, FMA-friendly).
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 8;
    let mut acc = [0.0f32; 8];
    for c in 0..chunks {
        let ab = &a[c * 8..c * 8 + 8];
        let bb = &b[c * 8..c * 8 + 8];
        for k in 0..8 {
            acc[k] = ab[k].mul_add(bb[k], acc[k]);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

/// y += alpha * x
#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(xi, *yi);
    }
}

/// Run `input` (flat `n * in_dim`) through the MLP, appending `n * out_dim`
/// raw (pre-head) outputs to `out` and hidden activations to `cache`.
pub fn mlp_forward(mlp: &Mlp, input: &[f32], out: &mut Vec<f32>, cache: &mut MlpCache) {
    let in_dim = mlp.in_dim();
    assert_eq!(input.len() % in_dim, 0, "input length not a multiple of in_dim");
    let n = input.len() / in_dim;
    let depth = mlp.layers.len();

    // The cache may already hold earlier batches; this call appends.
    cache.hidden.resize(depth - 1, Vec::new());
    let mut base = vec![0usize; depth - 1];
    for k in 0..depth - 1 {
        base[k] = cache.hidden[k].len();
        cache.hidden[k].resize(base[k] + n * mlp.layers[k].out_dim, 0.0);
    }
    let out_base = out.len();
    out.resize(out_base + n * mlp.out_dim(), 0.0);
    cache.samples += n;

    for k in 0..depth {
        let layer = &mlp.layers[k];
        let last = k + 1 == depth;
        let (before, from_k) = cache.hidden.split_at_mut(k);
        let src: &[f32] = if k == 0 { input } else { &before[k - 1][base[k - 1]..] };
        let dst: &mut [f32] =
            if last { &mut out[out_base..] } else { &mut from_k[0][base[k]..] };
        for s in 0..n {
            let x = &src[s * layer.in_dim..(s + 1) * layer.in_dim];
            let y = &mut dst[s * layer.out_dim..(s + 1) * layer.out_dim];
            for o in 0..layer.out_dim {
                let v = layer.b[o] + dot(&layer.w[o * layer.in_dim..(o + 1) * layer.in_dim], x);
                y[o] = if !last && v < 0.0 { 0.0 } else { v };
            }
        }
    }
}

/// Backward through the MLP for `n` samples.
///
/// `input` must be the forward input, `cache` the forward activations for
/// exactly these samples, and `d_out` the gradient at the raw outputs.
/// Parameter gradients are accumulated into `grads` in sample order;
/// `d_input` (same shape as `input`) is overwritten.
pub fn mlp_backward(
    mlp: &Mlp,
    input: &[f32],
    cache: &MlpCache,
    d_out: &[f32],
    d_input: &mut [f32],
    grads: &mut MlpGradients,
) {
    let in_dim = mlp.in_dim();
    let out_dim = mlp.out_dim();
    let n = cache.samples;
    assert_eq!(input.len(), n * in_dim, "input shape mismatch");
    assert_eq!(d_out.len(), n * out_dim, "d_out shape mismatch");
    assert_eq!(d_input.len(), input.len(), "d_input shape mismatch");
    assert_eq!(grads.layers.len(), mlp.layers.len(), "gradient layer count mismatch");

    let depth = mlp.layers.len();
    let mut dz = [0.0f32; HIDDEN_DIM];
    let mut dx = [0.0f32; HIDDEN_DIM];
    for s in 0..n {
        dz[..out_dim].copy_from_slice(&d_out[s * out_dim..(s + 1) * out_dim]);
        for k in (0..depth).rev() {
            let layer = &mlp.layers[k];
            let x: &[f32] = if k == 0 {
                &input[s * in_dim..(s + 1) * in_dim]
            } else {
                let d = mlp.layers[k - 1].out_dim;
                &cache.hidden[k - 1][s * d..(s + 1) * d]
            };
            let (gw, gb) = &mut grads.layers[k];
            for o in 0..layer.out_dim {
                let g = dz[o];
                if g != 0.0 {
                    axpy(g, x, &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim]);
                }
                gb[o] += g;
            }
            // d_x = W^T dz, with the ReLU mask of the layer below (none for
            // the network input).
            let di = &mut dx[..layer.in_dim];
            di.fill(0.0);
            for o in 0..layer.out_dim {
                let g = dz[o];
                if g != 0.0 {
                    axpy(g, &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim], di);
                }
            }
            if k == 0 {
                d_input[s * in_dim..(s + 1) * in_dim].copy_from_slice(di);
            } else {
                for (i, v) in di.iter().enumerate() {
                    // x here is the post-ReLU activation; zero means the unit
                    // was inactive.
                    dz[i] = if x[i] > 0.0 { *v } else { 0.0 };
                }
            }
        }
    }
}

/// Storage precision of the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    /// Parameters stored as f32.
    Full32,
    /// Parameters stored as (emulated) f16; compute stays f32.
    Mixed16,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::Full32 => Dtype::F32,
            Precision::Mixed16 => Dtype::F16,
        }
    }

    pub fn bytes_per_param(self) -> usize {
        match self {
            Precision::Full32 => 4,
            Precision::Mixed16 => 2,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Precision> {
        match s {
            "full32" => Ok(Precision::Full32),
            "mixed16" => Ok(Precision::Mixed16),
            other => Err(Error::config(format!("unknown precision '{other}' (full32|mixed16)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Full32 => "full32",
            Precision::Mixed16 => "mixed16",
        })
    }
}

/// The complete learned field: hash grid plus both MLPs.
#[derive(Debug, Clone)]
pub struct FieldModel {
    pub grid: HashGrid,
    /// grid features -> [log-density, geometry features]
    pub density_mlp: Mlp,
    /// [geometry features, SH direction] -> raw color logits
    pub color_mlp: Mlp,
    pub channels: usize,
    pub precision: Precision,
}

impl FieldModel {
    /// Initialize with the given encoding geometry and output channels
    /// (3 = RGB, 1 = grayscale).
    pub fn init(
        config: HashGridConfig,
        channels: usize,
        precision: Precision,
        rng: &mut impl Rng,
    ) -> FieldModel {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        let grid = HashGrid::init(config, rng);
        let density_mlp = Mlp::init(&[config.output_dim(), HIDDEN_DIM, DENSITY_OUT_DIM], rng);
        let color_mlp =
            Mlp::init(&[GEO_DIM + SH_DIM, HIDDEN_DIM, HIDDEN_DIM, channels], rng);
        let mut model = FieldModel { grid, density_mlp, color_mlp, channels, precision };
        model.apply_precision();
        model
    }

    /// Round every stored parameter to its storage precision. A no-op for
    /// [`Precision::Full32`].
    pub fn apply_precision(&mut self) {
        if self.precision == Precision::Mixed16 {
            for t in &mut self.grid.tables {
                quantize_f16_slice(t);
            }
            for mlp in [&mut self.density_mlp, &mut self.color_mlp] {
                for l in &mut mlp.layers {
                    quantize_f16_slice(&mut l.w);
                    quantize_f16_slice(&mut l.b);
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.grid.param_count() + self.density_mlp.param_count() + self.color_mlp.param_count()
    }

    pub fn mlp_param_count(&self) -> usize {
        self.density_mlp.param_count() + self.color_mlp.param_count()
    }

    /// Visit every trainable tensor as `(name, dims, values)`, grid levels
    /// first, then density and color MLP layers. The order is stable and
    /// shared by the optimizer, checkpoints, and federated averaging.
    pub fn visit_params(&self, mut f: impl FnMut(String, Vec<usize>, &[f32])) {
        for (l, t) in self.grid.tables.iter().enumerate() {
            let features = self.grid.config.features;
            f(format!("grid.level{l}"), vec![t.len() / features, features], t);
        }
        for (mlp_name, mlp) in [("density", &self.density_mlp), ("color", &self.color_mlp)] {
            for (k, layer) in mlp.layers.iter().enumerate() {
                f(format!("mlp.{mlp_name}.w{k}"), vec![layer.out_dim, layer.in_dim], &layer.w);
                f(format!("mlp.{mlp_name}.b{k}"), vec![layer.out_dim], &layer.b);
            }
        }
    }

    /// Mutable counterpart of [`Self::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        for (l, t) in self.grid.tables.iter_mut().enumerate() {
            f(&format!("grid.level{l}"), t);
        }
        for (mlp_name, mlp) in
            [("density", &mut self.density_mlp), ("color", &mut self.color_mlp)]
        {
            for (k, layer) in mlp.layers.iter_mut().enumerate() {
                f(&format!("mlp.{mlp_name}.w{k}"), &mut layer.w);
                f(&format!("mlp.{mlp_name}.b{k}"), &mut layer.b);
            }
        }
    }

    /// Copy all trainable tensors into a named map (for averaging/payloads).
    pub fn to_named(&self) -> NamedTensors {
        let dtype = self.precision.dtype();
        let mut map = NamedTensors::new();
        self.visit_params(|name, dims, data| {
            map.insert(name, Tensor::new(dims, dtype, data.to_vec()));
        });
        map
    }

    /// Load trainable tensors from a named map, re-applying storage precision.
    /// Every model tensor must be present with matching element count.
    pub fn load_named(&mut self, map: &NamedTensors) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params_mut(|name, data| match map.get(name) {
            Some(t) if t.numel() == data.len() => data.copy_from_slice(&t.data),
            Some(t) => missing.push(format!("{name}: expected {} values, got {}", data.len(), t.numel())),
            None => missing.push(format!("{name}: missing")),
        });
        if !missing.is_empty() {
            return Err(Error::config(format!("parameter set mismatch: {}", missing.join("; "))));
        }
        self.apply_precision();
        Ok(())
    }
}

/// Densities and colors for a batch of samples.
#[derive(Debug, Default, Clone)]
pub struct FieldOutputs {
    pub sigma: Vec<f32>,
    /// `n * channels`, logistic-activated.
    pub color: Vec<f32>,
}

impl FieldOutputs {
    pub fn clear(&mut self) {
        self.sigma.clear();
        self.color.clear();
    }
}

/// Everything the backward pass needs, laid out per sample.
#[derive(Debug, Default, Clone)]
pub struct FieldCache {
    pub samples: usize,
    pub mrhe: MrheCache,
    /// Hash-grid features (density MLP input), `n * levels * features`.
    pub feats: Vec<f32>,
    pub density_cache: MlpCache,
    /// Raw density MLP outputs, `n * DENSITY_OUT_DIM`.
    pub density_raw: Vec<f32>,
    /// Color MLP input `[geometry features | SH]`, `n * (GEO_DIM + SH_DIM)`.
    pub color_in: Vec<f32>,
    pub color_cache: MlpCache,
}

impl FieldCache {
    pub fn clear(&mut self) {
        self.samples = 0;
        self.mrhe.clear();
        self.feats.clear();
        self.density_cache.clear();
        self.density_raw.clear();
        self.color_in.clear();
        self.color_cache.clear();
    }
}

/// Gradient accumulators for every trainable tensor of a [`FieldModel`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grid: Vec<Vec<f32>>,
    pub density: MlpGradients,
    pub color: MlpGradients,
}

impl Gradients {
    pub fn zeros_like(model: &FieldModel) -> Gradients {
        Gradients {
            grid: model.grid.zeros_like(),
            density: MlpGradients::zeros_like(&model.density_mlp),
            color: MlpGradients::zeros_like(&model.color_mlp),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grid {
            g.fill(0.0);
        }
        self.density.zero();
        self.color.zero();
    }

    /// Visit gradients in the same order as `FieldModel::visit_params`.
    pub fn visit(&self, mut f: impl FnMut(&[f32])) {
        for g in &self.grid {
            f(g);
        }
        for mlp in [&self.density, &self.color] {
            for (w, b) in &mlp.layers {
                f(w);
                f(b);
            }
        }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.grid.len(), other.grid.len(), "gradient level count mismatch");
        for (a, b) in self.grid.iter_mut().zip(&other.grid) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (mine, theirs) in [(&mut self.density, &other.density), (&mut self.color, &other.color)] {
            assert_eq!(mine.layers.len(), theirs.layers.len(), "gradient layer count mismatch");
            for ((w, b), (ow, ob)) in mine.layers.iter_mut().zip(&theirs.layers) {
                for (x, y) in w.iter_mut().zip(ow) {
                    *x += y;
                }
                for (x, y) in b.iter_mut().zip(ob) {
                    *x += y;
                }
            }
        }
    }

    /// True if every gradient value is finite.
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|g| ok &= g.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Evaluate the field at `positions` (unit cube, flat xyz) along unit
/// `dirs` (flat xyz, one per sample). Appends to `out` and `cache`.
///
/// sigma = exp(clamp(raw0, +-15)); color = logistic(raw).
pub fn field_forward(
    model: &FieldModel,
    positions: &[f32],
    dirs: &[f32],
    out: &mut FieldOutputs,
    cache: &mut FieldCache,
) {
    assert_eq!(positions.len(), dirs.len(), "one direction per position required");
    let n = positions.len() / 3;
    cache.samples += n;

    let feat_start = cache.feats.len();
    encoding::mrhe_forward(&model.grid, positions, &mut cache.feats, &mut cache.mrhe);
    let raw_start = cache.density_raw.len();
    mlp_forward(
        &model.density_mlp,
        &cache.feats[feat_start..],
        &mut cache.density_raw,
        &mut cache.density_cache,
    );

    // Assemble color inputs and the density head.
    let cin_dim = GEO_DIM + SH_DIM;
    let cin_start = cache.color_in.len();
    cache.color_in.reserve(n * cin_dim);
    out.sigma.reserve(n);
    for s in 0..n {
        let raw = &cache.density_raw[raw_start + s * DENSITY_OUT_DIM..raw_start + (s + 1) * DENSITY_OUT_DIM];
        out.sigma.push(raw[0].clamp(-LOG_DENSITY_CLAMP, LOG_DENSITY_CLAMP).exp());
        cache.color_in.extend_from_slice(&raw[1..]);
        let d = &dirs[s * 3..s * 3 + 3];
        cache.color_in.extend_from_slice(&encoding::sh_basis([d[0], d[1], d[2]]));
    }

    let logit_start = out.color.len();
    mlp_forward(
        &model.color_mlp,
        &cache.color_in[cin_start..],
        &mut out.color,
        &mut cache.color_cache,
    );
    for c in &mut out.color[logit_start..] {
        *c = logistic(*c);
    }
}

/// Density-only evaluation: sigma per position, skipping SH and the color
/// network. The occupancy sweep queries every cell of its volume and never
/// needs color, so this path costs roughly a third of [`field_forward`].
/// Appends to `sigma` and `cache` (color buffers stay untouched).
pub fn field_density(
    model: &FieldModel,
    positions: &[f32],
    sigma: &mut Vec<f32>,
    cache: &mut FieldCache,
) {
    let n = positions.len() / 3;
    cache.samples += n;

    let feat_start = cache.feats.len();
    encoding::mrhe_forward(&model.grid, positions, &mut cache.feats, &mut cache.mrhe);
    let raw_start = cache.density_raw.len();
    mlp_forward(
        &model.density_mlp,
        &cache.feats[feat_start..],
        &mut cache.density_raw,
        &mut cache.density_cache,
    );
    sigma.reserve(n);
    for s in 0..n {
        let raw0 = cache.density_raw[raw_start + s * DENSITY_OUT_DIM];
        sigma.push(raw0.clamp(-LOG_DENSITY_CLAMP, LOG_DENSITY_CLAMP).exp());
    }
}

#[inline]
fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Backward through heads, both MLPs, and the hash encoding.
///
/// `outputs`/`cache` must come from a [`field_forward`] over exactly these
/// samples; `d_sigma` is `n` long and `d_color` is `n * channels`.
/// Parameter gradients accumulate into `grads`; directions receive no
/// gradient.
pub fn field_backward(
    model: &FieldModel,
    outputs: &FieldOutputs,
    cache: &FieldCache,
    d_sigma: &[f32],
    d_color: &[f32],
    grads: &mut Gradients,
) {
    let n = cache.samples;
    let ch = model.channels;
    assert_eq!(d_sigma.len(), n, "d_sigma shape mismatch");
    assert_eq!(d_color.len(), n * ch, "d_color shape mismatch");
    assert_eq!(outputs.sigma.len(), n, "outputs do not match cache");

    // Head gradients: logistic for color, exp-of-clamp for density.
    let mut d_logits = vec![0.0f32; n * ch];
    for i in 0..n * ch {
        let c = outputs.color[i];
        d_logits[i] = d_color[i] * c * (1.0 - c);
    }

    let cin_dim = GEO_DIM + SH_DIM;
    let mut d_color_in = vec![0.0f32; n * cin_dim];
    mlp_backward(
        &model.color_mlp,
        &cache.color_in,
        &cache.color_cache,
        &d_logits,
        &mut d_color_in,
        &mut grads.color,
    );

    // Density MLP output gradient: clamp-gated exp for slot 0, the color
    // MLP's geometry-input gradient for the rest. The SH block of d_color_in
    // is discarded -- directions are data.
    let mut d_density_raw = vec![0.0f32; n * DENSITY_OUT_DIM];
    for s in 0..n {
        let raw0 = cache.density_raw[s * DENSITY_OUT_DIM];
        d_density_raw[s * DENSITY_OUT_DIM] = if raw0.abs() < LOG_DENSITY_CLAMP {
            d_sigma[s] * outputs.sigma[s]
        } else {
            0.0
        };
        d_density_raw[s * DENSITY_OUT_DIM + 1..(s + 1) * DENSITY_OUT_DIM]
            .copy_from_slice(&d_color_in[s * cin_dim..s * cin_dim + GEO_DIM]);
    }

    let mut d_feats = vec![0.0f32; n * model.grid.config.output_dim()];
    mlp_backward(
        &model.density_mlp,
        &cache.feats,
        &cache.density_cache,
        &d_density_raw,
        &mut d_feats,
        &mut grads.density,
    );
    encoding::mrhe_backward(&model.grid, &cache.mrhe, &d_feats, &mut grads.grid);
}
