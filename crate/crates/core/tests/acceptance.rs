//! Acceptance checks: one integration test per release criterion, each
//! printing a `criterion NN PASS/FAIL` summary line (visible with
//! `cargo test --test acceptance -- --nocapture`, or on failure).
//!
//! The expensive artifacts — the 160x160 evaluation scene and the fully
//! trained model — are built once and shared. When no captured dataset is
//! available (`TDNF_DATA` unset and `data/nerf_synthetic/lego` absent), the
//! built-in synthetic multi-view scene stands in; the summary lines name the
//! scene actually used. Tests run in name order, so the cheap numeric checks
//! (01–03) come before the training-scale ones (04–08).

use std::path::Path;
use std::sync::OnceLock;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use tdnf::dataset::{
    generate_ray, load_scene, sample_training_pixels, PartitionMode, PixelBatch, Scene,
};
use tdnf::encoding::{hash_index, sh_basis, HashGrid, HashGridConfig};
use tdnf::federated::{
    eval_subset, payload_bytes, round_seconds, run_federation, run_singles, FederationConfig,
    PayloadMode, DEFAULT_BANDWIDTH_BPS,
};
use tdnf::field::{
    field_backward, field_forward, FieldCache, FieldModel, FieldOutputs, Gradients, Mlp,
    Precision, LOG_DENSITY_CLAMP,
};
use tdnf::metrics::{psnr, ssim};
use tdnf::occupancy::OccupancyGrid;
use tdnf::renderer::{
    composite, composite_backward, march_ray, render_image, RenderResult, SampleBatch,
    TRANSMITTANCE_FLOOR,
};
use tdnf::synth::{self, SynthConfig};
use tdnf::trainer::{
    adam_step, evaluate, huber_loss_scaled, train, AdamState, Tile, TrainConfig, TrainOutcome,
};

/// Print the per-criterion summary line, then enforce it.
fn verdict(id: u32, ok: bool, detail: &str) {
    println!("criterion {id:02} {}  {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id:02} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared artifacts
// ---------------------------------------------------------------------------

static SCENE: OnceLock<(Scene, String)> = OnceLock::new();

/// The 160x160 evaluation scene: a captured dataset when one is present,
/// otherwise the built-in synthetic stand-in (100 train / 200 test views).
fn eval_scene() -> &'static (Scene, String) {
    SCENE.get_or_init(|| {
        if let Ok(dir) = std::env::var("TDNF_DATA") {
            let root = Path::new(&dir).to_path_buf();
            match load_scene(&root, 160, 3) {
                Ok(s) => return (s, format!("{} (TDNF_DATA)", root.display())),
                Err(e) => eprintln!("[acceptance] TDNF_DATA set but unusable ({e}); falling back"),
            }
        }
        let lego = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/nerf_synthetic/lego");
        if lego.join("transforms_train.json").exists() {
            if let Ok(s) = load_scene(&lego, 160, 3) {
                return (s, "data/nerf_synthetic/lego".to_string());
            }
        }
        eprintln!("[acceptance] no captured dataset found; generating the synthetic scene");
        (synth::scene(&SynthConfig::default(), 3), "built-in synthetic scene".to_string())
    })
}

static TRAINED: OnceLock<TrainOutcome> = OnceLock::new();

/// The shared converged model: default trainer settings (10k steps, B=8192,
/// tile 1024, 1 img/step, T=2^13, mixed16, 128^3 occupancy).
fn trained() -> &'static TrainOutcome {
    TRAINED.get_or_init(|| {
        let (scene, source) = eval_scene();
        let config = TrainConfig { eval_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
        eprintln!(
            "[acceptance] training the shared model on {source}: {} steps at B={}",
            config.steps, config.effective_batch
        );
        train(scene, &scene.train_frames(), &config).expect("shared training run")
    })
}

/// Per-client training settings for the federated criteria: the reduced
/// desk-scale recipe runs at B=1024 on a single core; every arm of each
/// comparison (federated, singles, centralized) shares these settings.
fn fed_train_config() -> TrainConfig {
    TrainConfig {
        effective_batch: 1024,
        tile: 1024,
        occupancy_resolution: 64,
        eval_every: 0,
        checkpoint_every: 0,
        out_dir: None,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients vs central finite differences, f64 oracle
// ---------------------------------------------------------------------------

/// f64 re-implementation of one MLP with ReLU on hidden layers. Appends each
/// hidden unit's activity bit to `mask` so finite-difference probes that
/// cross a kink can be detected and skipped.
fn mlp_f64(mlp: &Mlp, input: &[f64], mask: &mut Vec<bool>) -> Vec<f64> {
    let mut x = input.to_vec();
    for (li, layer) in mlp.layers.iter().enumerate() {
        let last = li + 1 == mlp.layers.len();
        let mut y = vec![0.0f64; layer.out_dim];
        for o in 0..layer.out_dim {
            let mut acc = layer.b[o] as f64;
            let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (wi, xi) in row.iter().zip(&x) {
                acc += *wi as f64 * xi;
            }
            if !last {
                mask.push(acc > 0.0);
                if acc < 0.0 {
                    acc = 0.0;
                }
            }
            y[o] = acc;
        }
        x = y;
    }
    x
}

/// f64 hash-grid encoding of one position. Cell selection replays the
/// implementation's f32 arithmetic bit for bit (so both sides interpolate
/// the same corners with the same fractions); the weight products and
/// feature sums run in f64.
fn grid_f64(grid: &HashGrid, p: &[f32]) -> Vec<f64> {
    let cfg = &grid.config;
    let f = cfg.features;
    let mut feats = vec![0.0f64; cfg.output_dim()];
    for l in 0..cfg.levels {
        let res = cfg.level_resolution(l);
        let table_len = cfg.level_table_len(l);
        let table = &grid.tables[l];
        let mut c0 = [0u32; 3];
        let mut fr = [0f64; 3];
        for a in 0..3 {
            let scaled = p[a] * res as f32;
            let cell = (scaled.floor() as u32).min(res.saturating_sub(1));
            c0[a] = cell;
            fr[a] = (scaled - cell as f32) as f64;
        }
        for corner in 0..8u32 {
            let dx = corner & 1;
            let dy = (corner >> 1) & 1;
            let dz = (corner >> 2) & 1;
            let pick = |frac: f64, bit: u32| if bit == 0 { 1.0 - frac } else { frac };
            let w = pick(fr[0], dx) * pick(fr[1], dy) * pick(fr[2], dz);
            let idx = hash_index([c0[0] + dx, c0[1] + dy, c0[2] + dz], res, table_len);
            for k in 0..f {
                feats[l * f + k] += w * table[idx * f + k] as f64;
            }
        }
    }
    feats
}

#[inline]
fn logistic_f64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// f64 shadow of the full training loss: hash encoding, both MLPs and their
/// activations, compositing with the termination floor, and the scaled Huber
/// penalty. Returns the loss plus a branch mask (ReLU signs, density-clamp
/// bits, floor activity, Huber branches); probes whose mask changes under
/// the +/- perturbation straddle a kink and are invalid for central
/// differences.
#[allow(clippy::too_many_arguments)]
fn shadow_loss(
    model: &FieldModel,
    batch: &SampleBatch,
    targets: &[f32],
    background: &[f32],
    delta: f64,
    scale: f64,
) -> (f64, Vec<bool>) {
    let ch = model.channels;
    let n = batch.dt.len();
    let mut mask = Vec::new();
    let mut preds = vec![0.0f64; batch.ray_count * ch];

    let mut i = 0usize;
    for ray in 0..batch.ray_count {
        let mut transmittance = 1.0f64;
        let mut w_sum = 0.0f64;
        let mut acc = [0.0f64; 4];
        while i < n && batch.ray_id[i] == ray {
            let active = transmittance >= TRANSMITTANCE_FLOOR as f64;
            mask.push(active);
            if active {
                let p = &batch.positions[i * 3..i * 3 + 3];
                let d = &batch.directions[i * 3..i * 3 + 3];
                let feats = grid_f64(&model.grid, p);
                let raw = mlp_f64(&model.density_mlp, &feats, &mut mask);
                mask.push(raw[0].abs() < LOG_DENSITY_CLAMP as f64);
                let sigma = raw[0].clamp(-(LOG_DENSITY_CLAMP as f64), LOG_DENSITY_CLAMP as f64).exp();
                let mut color_in: Vec<f64> = raw[1..].to_vec();
                color_in.extend(sh_basis([d[0], d[1], d[2]]).iter().map(|&v| v as f64));
                let logits = mlp_f64(&model.color_mlp, &color_in, &mut mask);

                let alpha = 1.0 - (-sigma * batch.dt[i] as f64).exp();
                let w = transmittance * alpha;
                for c in 0..ch {
                    acc[c] += w * logistic_f64(logits[c]);
                }
                w_sum += w;
                transmittance *= 1.0 - alpha;
            }
            i += 1;
        }
        for c in 0..ch {
            preds[ray * ch + c] = acc[c] + (1.0 - w_sum) * background[c] as f64;
        }
    }

    let mut loss = 0.0f64;
    for (j, &t) in targets.iter().enumerate() {
        let e = preds[j] - t as f64;
        let inner = e.abs() <= delta;
        mask.push(inner);
        loss += if inner { 0.5 * e * e } else { delta * (e.abs() - 0.5 * delta) } * scale;
    }
    (loss, mask)
}

/// Small full-precision model with the tables and biases scaled away from
/// the degenerate fresh init (fresh tables are +/-1e-4, far below the probe
/// step). Level 0 indexes densely, the finer levels hash.
fn c1_model() -> FieldModel {
    let config = HashGridConfig {
        levels: 4,
        features: 2,
        table_size_log2: 7,
        base_resolution: 4,
        max_resolution: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = FieldModel::init(config, 3, Precision::Full32, &mut rng);
    for t in &mut model.grid.tables {
        for v in t.iter_mut() {
            *v *= 3000.0;
        }
    }
    for mlp in [&mut model.density_mlp, &mut model.color_mlp] {
        for layer in &mut mlp.layers {
            for b in layer.b.iter_mut() {
                *b = rng.random_range(-0.2..0.2);
            }
        }
    }
    model
}

fn set_param(model: &mut FieldModel, tensor: usize, index: usize, value: f32) {
    let mut k = 0usize;
    model.visit_params_mut(|_, data| {
        if k == tensor {
            data[index] = value;
        }
        k += 1;
    });
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let model = c1_model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);

    // 6 rays x 8 samples = 48 samples (criterion caps instances at 64).
    let mut batch = SampleBatch::default();
    let mut targets = Vec::new();
    for ray in 0..6usize {
        let dir = loop {
            let v = [
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
                rng.random_range(-1.0f32..1.0),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 0.3 {
                break [v[0] / n, v[1] / n, v[2] / n];
            }
        };
        for _ in 0..8 {
            for _ in 0..3 {
                batch.positions.push(rng.random_range(0.05f32..0.95));
            }
            batch.directions.extend_from_slice(&dir);
            batch.dt.push(rng.random_range(0.05f32..0.15));
            batch.ray_id.push(ray);
        }
        batch.ray_count += 1;
        for _ in 0..3 {
            targets.push(rng.random_range(0.0f32..1.0));
        }
    }
    let background = [0.8f32, 0.15, 0.55];
    let delta = 0.1f32;
    let scale = 1.0 / targets.len() as f32;

    // Analytic gradients through the implementation.
    let mut outputs = FieldOutputs::default();
    let mut cache = FieldCache::default();
    field_forward(&model, &batch.positions, &batch.directions, &mut outputs, &mut cache);
    let mut result = RenderResult::default();
    composite(&batch, &outputs.sigma, &outputs.color, &background, &mut result);
    let mut d_pred = Vec::new();
    let loss32 = huber_loss_scaled(&result.color, &targets, delta, scale, &mut d_pred);
    let mut d_sigma = Vec::new();
    let mut d_color = Vec::new();
    composite_backward(&batch, &outputs.sigma, &outputs.color, &background, &d_pred, &mut d_sigma, &mut d_color);
    let mut grads = Gradients::zeros_like(&model);
    field_backward(&model, &outputs, &cache, &d_sigma, &d_color, &mut grads);

    // The shadow evaluated at the unperturbed point must agree on the loss.
    let (loss64, _) = shadow_loss(&model, &batch, &targets, &background, delta as f64, scale as f64);
    assert!(
        (loss32 - loss64).abs() <= 1e-4 * loss64.abs().max(1e-12),
        "oracle disagrees with the implementation at the base point: {loss32} vs {loss64}"
    );

    let mut names = Vec::new();
    let mut params = Vec::new();
    model.visit_params(|name, _, data| {
        names.push(name);
        params.push(data.to_vec());
    });
    let mut grads_flat: Vec<Vec<f32>> = Vec::new();
    grads.visit(|g| grads_flat.push(g.to_vec()));
    assert_eq!(names.len(), grads_flat.len());

    const EPS: f32 = 1e-3;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    for t in 0..names.len() {
        let len = params[t].len();
        let probes: Vec<usize> = if len <= 20 {
            (0..len).collect()
        } else {
            (0..20).map(|_| rng.random_range(0..len)).collect()
        };
        for &i in &probes {
            let v = params[t][i];
            let vp = v + EPS;
            let vm = v - EPS;
            let mut mp = model.clone();
            set_param(&mut mp, t, i, vp);
            let mut mm = model.clone();
            set_param(&mut mm, t, i, vm);
            let (lp, mask_p) = shadow_loss(&mp, &batch, &targets, &background, delta as f64, scale as f64);
            let (lm, mask_m) = shadow_loss(&mm, &batch, &targets, &background, delta as f64, scale as f64);
            if mask_p != mask_m {
                skipped += 1; // the probe straddles a ReLU/clamp/Huber kink
                continue;
            }
            let fd = (lp - lm) / ((vp - vm) as f64);
            let an = grads_flat[t][i] as f64;
            let diff = (an - fd).abs();
            let denom = an.abs().max(fd.abs());
            assert!(
                diff <= 1e-3 * denom || diff <= 1e-7,
                "criterion 01: {}[{i}]: analytic {an:.6e} vs central FD {fd:.6e} (rel {:.3e})",
                names[t],
                diff / denom.max(1e-300)
            );
            if denom > 1e-7 {
                max_rel = max_rel.max(diff / denom);
            }
            checked += 1;
        }
    }
    let ok = checked > 150 && skipped * 2 < checked;
    verdict(
        1,
        ok,
        &format!(
            "gradcheck over hash grid, both MLPs, activations, compositing, Huber: \
             {checked} probes within rel 1e-3 (eps=1e-3, max rel {max_rel:.2e}, {skipped} kink-skipped, 48 samples)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: compositing oracle
// ---------------------------------------------------------------------------

/// Hand-build a batch from per-ray (sigma, color, dt) triples.
fn manual_batch(rays: &[Vec<(f32, [f32; 3], f32)>]) -> (SampleBatch, Vec<f32>, Vec<f32>) {
    let mut batch = SampleBatch::default();
    let mut sigma = Vec::new();
    let mut color = Vec::new();
    for (id, ray) in rays.iter().enumerate() {
        for &(s, c, dt) in ray {
            batch.positions.extend_from_slice(&[0.5, 0.5, 0.5]);
            batch.directions.extend_from_slice(&[0.0, 0.0, 1.0]);
            batch.dt.push(dt);
            batch.ray_id.push(id);
            sigma.push(s);
            color.extend_from_slice(&c);
        }
        batch.ray_count += 1;
    }
    (batch, sigma, color)
}

#[test]
fn criterion_02_compositing_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let bg = [0.3f32, 0.6, 0.1];

    // (a) weight sums equal opacity within 1e-5 on random rays.
    let rays: Vec<Vec<(f32, [f32; 3], f32)>> = (0..24)
        .map(|_| {
            (0..rng.random_range(0..40usize))
                .map(|_| {
                    (
                        rng.random_range(0.0f32..4.0),
                        [rng.random(), rng.random(), rng.random()],
                        rng.random_range(0.01f32..0.2),
                    )
                })
                .collect()
        })
        .collect();
    let (batch, sigma, color) = manual_batch(&rays);
    let mut out = RenderResult::default();
    composite(&batch, &sigma, &color, &bg, &mut out);
    let mut max_weight_gap = 0.0f64;
    let mut i = 0usize;
    for ray in 0..batch.ray_count {
        let mut w = 0.0f64;
        while i < batch.dt.len() && batch.ray_id[i] == ray {
            w += out.weights[i] as f64;
            i += 1;
        }
        max_weight_gap = max_weight_gap.max((w - out.opacity[ray] as f64).abs());
    }

    // (b) replacing any one sample (sigma, c, dt) by two samples at dt/2
    //     changes nothing beyond 1e-5 (piecewise-constant quadrature is
    //     split-invariant). Rays are kept above the early-termination
    //     transmittance threshold: crossing it truncates a tail of weight
    //     up to 1e-4, which is a separate, threshold-bounded effect.
    let split_rays: Vec<Vec<(f32, [f32; 3], f32)>> = (0..24)
        .map(|_| {
            (0..rng.random_range(1..30usize))
                .map(|_| {
                    (
                        rng.random_range(0.0f32..2.0),
                        [rng.random(), rng.random(), rng.random()],
                        rng.random_range(0.01f32..0.08),
                    )
                })
                .collect()
        })
        .collect();
    let (sbatch, ssigma, scolor) = manual_batch(&split_rays);
    let mut sout = RenderResult::default();
    composite(&sbatch, &ssigma, &scolor, &bg, &mut sout);
    let mut max_split_gap = 0.0f64;
    for (r, ray) in split_rays.iter().enumerate() {
        for j in 0..ray.len() {
            let mut split = ray.clone();
            let (s, c, dt) = split[j];
            split[j] = (s, c, dt / 2.0);
            split.insert(j + 1, (s, c, dt / 2.0));
            let (hbatch, hsigma, hcolor) = manual_batch(std::slice::from_ref(&split));
            let mut hout = RenderResult::default();
            composite(&hbatch, &hsigma, &hcolor, &bg, &mut hout);
            for ch in 0..3 {
                let gap = (sout.color[r * 3 + ch] as f64 - hout.color[ch] as f64).abs();
                max_split_gap = max_split_gap.max(gap);
            }
            max_split_gap =
                max_split_gap.max((sout.opacity[r] as f64 - hout.opacity[0] as f64).abs());
        }
    }

    // (c) two unit-density, unit-step samples: w1 = 1 - 1/e, w2 = (1/e)(1 - 1/e).
    let (tb, ts, tc) = manual_batch(&[vec![(1.0, [1.0, 0.0, 0.0], 1.0), (1.0, [0.0, 1.0, 0.0], 1.0)]]);
    let mut tout = RenderResult::default();
    composite(&tb, &ts, &tc, &[0.0; 3], &mut tout);
    let w1 = 1.0 - (-1.0f64).exp();
    let w2 = (-1.0f64).exp() * w1;
    let closed_gap = (tout.weights[0] as f64 - w1)
        .abs()
        .max((tout.weights[1] as f64 - w2).abs());

    let ok = max_weight_gap <= 1e-5 && max_split_gap <= 1e-5 && closed_gap <= 1e-6;
    verdict(
        2,
        ok,
        &format!(
            "weight-sum vs opacity gap {max_weight_gap:.2e} (<=1e-5), split invariance {max_split_gap:.2e} \
             (<=1e-5), two-sample closed form off by {closed_gap:.2e} (<=1e-6)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: tile accumulation equals one big batch
// ---------------------------------------------------------------------------

/// Forward + backward of one tile, identical to the trainer's internal pass.
fn tile_pass(model: &FieldModel, tile: &Tile, background: &[f32], delta: f32, scale: f32, grads: &mut Gradients) -> f64 {
    let mut outputs = FieldOutputs::default();
    let mut cache = FieldCache::default();
    field_forward(model, &tile.batch.positions, &tile.batch.directions, &mut outputs, &mut cache);
    let mut result = RenderResult::default();
    composite(&tile.batch, &outputs.sigma, &outputs.color, background, &mut result);
    let mut d_pred = Vec::new();
    let loss = huber_loss_scaled(&result.color, &tile.targets, delta, scale, &mut d_pred);
    let mut d_sigma = Vec::new();
    let mut d_color = Vec::new();
    composite_backward(&tile.batch, &outputs.sigma, &outputs.color, background, &d_pred, &mut d_sigma, &mut d_color);
    field_backward(model, &outputs, &cache, &d_sigma, &d_color, grads);
    loss
}

fn append_ray(tile: &mut Tile, scratch: &SampleBatch, target: &[f32]) {
    let id = tile.batch.ray_count;
    tile.batch.positions.extend_from_slice(&scratch.positions);
    tile.batch.directions.extend_from_slice(&scratch.directions);
    tile.batch.dt.extend_from_slice(&scratch.dt);
    tile.batch.ray_id.extend(std::iter::repeat_n(id, scratch.dt.len()));
    tile.batch.ray_count += 1;
    tile.targets.extend_from_slice(target);
}

#[test]
fn criterion_03_tile_accumulation_matches_one_batch() {
    const TILE: usize = 1024;
    const TILES: usize = 8;
    let (scene, _) = eval_scene();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // Full-precision model at the full table size; a sparse occupancy makes
    // rays emit ~100 samples so eight 1024-sample tiles pack a few rays each.
    let model = FieldModel::init(HashGridConfig::default(), 3, Precision::Full32, &mut rng);
    let mut occupancy = OccupancyGrid::new(16);
    for bit in occupancy.occupied.iter_mut() {
        *bit = rng.random::<f32>() < 0.12;
    }

    let frames = scene.train_frames();
    let mut pixels = PixelBatch::default();
    sample_training_pixels(scene, &mut rng, 400, 4, &frames, &mut pixels);

    let ch = scene.channels;
    let mut tiles: Vec<Tile> = Vec::new();
    let mut current = Tile::default();
    let mut scratch = SampleBatch::default();
    for i in 0..pixels.len() {
        let ray = generate_ray(&scene.cameras[pixels.frames[i]], pixels.us[i], pixels.vs[i]);
        scratch.clear();
        march_ray(&ray, &occupancy, TILE, &mut scratch);
        if current.batch.dt.len() + scratch.dt.len() > TILE {
            tiles.push(std::mem::take(&mut current));
            if tiles.len() == TILES {
                break;
            }
        }
        append_ray(&mut current, &scratch, &pixels.targets[i * ch..(i + 1) * ch]);
    }
    if tiles.len() < TILES && current.batch.ray_count > 0 {
        tiles.push(current);
    }
    assert_eq!(tiles.len(), TILES, "not enough pixels to fill {TILES} tiles");

    // The identical samples as one concatenated batch.
    let mut big = Tile::default();
    for tile in &tiles {
        let mut i = 0usize;
        for ray in 0..tile.batch.ray_count {
            scratch.clear();
            while i < tile.batch.dt.len() && tile.batch.ray_id[i] == ray {
                scratch.positions.extend_from_slice(&tile.batch.positions[i * 3..i * 3 + 3]);
                scratch.directions.extend_from_slice(&tile.batch.directions[i * 3..i * 3 + 3]);
                scratch.dt.push(tile.batch.dt[i]);
                scratch.ray_id.push(0);
                i += 1;
            }
            append_ray(&mut big, &scratch, &tile.targets[ray * ch..(ray + 1) * ch]);
        }
    }
    let total: usize = tiles.iter().map(|t| t.batch.dt.len()).sum();
    assert_eq!(big.batch.dt.len(), total);
    assert!(total > 6 * TILE, "sample packing fell short: {total}");

    let background = [1.0f32; 3];
    let delta = 0.1f32;
    let scale = 1.0 / big.targets.len() as f32;
    let config = TrainConfig { precision: Precision::Full32, ..TrainConfig::default() };

    let mut grads_tiled = Gradients::zeros_like(&model);
    let mut loss_tiled = 0.0f64;
    for tile in &tiles {
        loss_tiled += tile_pass(&model, tile, &background, delta, scale, &mut grads_tiled);
    }
    let mut grads_once = Gradients::zeros_like(&model);
    let loss_once = tile_pass(&model, &big, &background, delta, scale, &mut grads_once);

    let mut model_tiled = model.clone();
    let mut adam_tiled = AdamState::new(&model_tiled);
    adam_step(&mut model_tiled, &grads_tiled, &mut adam_tiled, &config);
    let mut model_once = model.clone();
    let mut adam_once = AdamState::new(&model_once);
    adam_step(&mut model_once, &grads_once, &mut adam_once, &config);

    let mut a = Vec::new();
    model_tiled.visit_params(|_, _, d| a.extend_from_slice(d));
    let mut b = Vec::new();
    model_once.visit_params(|_, _, d| b.extend_from_slice(d));
    let mut max_rel = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        let diff = (*x as f64 - *y as f64).abs();
        let denom = (x.abs().max(y.abs()) as f64).max(1e-12);
        max_rel = max_rel.max(diff / denom);
    }

    let ok = max_rel < 1e-6 && (loss_tiled - loss_once).abs() < 1e-9;
    verdict(
        3,
        ok,
        &format!(
            "8x{TILE}-sample tiles vs one {total}-sample batch on identical samples: \
             post-step max relative parameter difference {max_rel:.2e} (<1e-6), \
             loss gap {:.2e}",
            (loss_tiled - loss_once).abs()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: end-to-end quality at desk scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_end_to_end_quality() {
    let (scene, source) = eval_scene();
    let outcome = trained();
    let test = scene.test_frames();
    let background = [1.0f32; 3];

    let mut psnr_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    for &f in &test {
        let cam = &scene.cameras[f];
        let (render, _) = render_image(&outcome.model, &outcome.occupancy, cam, &background);
        psnr_sum += psnr(&render, &scene.images[f]) as f64;
        ssim_sum += ssim(&render, &scene.images[f], cam.width, cam.height, scene.channels).unwrap() as f64;
    }
    let mean_psnr = psnr_sum / test.len() as f64;
    let mean_ssim = ssim_sum / test.len() as f64;

    let ok = mean_psnr >= 25.0 && mean_ssim >= 0.85;
    verdict(
        4,
        ok,
        &format!(
            "10k steps at B=8192, T=2^13, 1 img/step, 160x160 on {source}: \
             test PSNR {mean_psnr:.2} dB (>=25.0), SSIM {mean_ssim:.4} (>=0.85) over {} frames",
            test.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: occupancy skipping is consistent and cheap
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_occupancy_skip_consistency() {
    let (scene, source) = eval_scene();
    let outcome = trained();
    let frames = eval_subset(&scene.test_frames(), 4);
    let background = [1.0f32; 3];
    let all_occupied = OccupancyGrid::new(outcome.occupancy.resolution);

    let mut abs_err = 0.0f64;
    let mut elements = 0usize;
    let mut samples = 0usize;
    let mut rays = 0usize;
    for &f in &frames {
        let cam = &scene.cameras[f];
        let (skip, stats) = render_image(&outcome.model, &outcome.occupancy, cam, &background);
        let (full, _) = render_image(&outcome.model, &all_occupied, cam, &background);
        for (a, b) in skip.iter().zip(&full) {
            abs_err += (*a as f64 - *b as f64).abs();
        }
        elements += skip.len();
        samples += stats.total_samples;
        rays += stats.rays;
    }
    let mae = abs_err / elements as f64;
    let mean_spp = samples as f64 / rays as f64;

    let ok = mae <= 0.02 && (6.0..=26.0).contains(&mean_spp);
    verdict(
        5,
        ok,
        &format!(
            "skip vs all-occupied renders on {} test frames of {source}: MAE {mae:.5} (<=0.02), \
             mean samples/pixel {mean_spp:.1} (within [6, 26], occupied fraction {:.3})",
            frames.len(),
            outcome.occupancy.occupied_fraction()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: IID federation beats singles, trails centralized
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_federated_iid_ordering() {
    let (scene, source) = eval_scene();
    let train_cfg = fed_train_config();
    let fed = FederationConfig {
        n_clients: 4,
        pretrain_steps: 2000,
        local_steps: 1000,
        rounds: 10,
        payload_mode: PayloadMode::ParamsOnly,
        partition_mode: PartitionMode::Iid,
        bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
        seed: 42,
        train: train_cfg.clone(),
        eval_frames: 8,
    };
    eprintln!("[acceptance] criterion 06: IID federation (4 clients, 2k pretrain, 10x1k rounds)");
    let outcome = run_federation(scene, &fed).unwrap();

    let eval_frames = eval_subset(&scene.test_frames(), 16);
    let background = train_cfg.background();
    let global = evaluate(&outcome.model, &outcome.occupancy, scene, &eval_frames, &background);

    // Each client trained alone with the same per-client budget.
    let single_steps = fed.pretrain_steps + fed.rounds * fed.local_steps;
    eprintln!("[acceptance] criterion 06: training {} singles for {single_steps} steps", fed.n_clients);
    let singles = run_singles(scene, &outcome.plan, &train_cfg, single_steps, &eval_frames).unwrap();
    let best_single = singles.iter().cloned().fold(f32::NEG_INFINITY, f32::max);

    eprintln!("[acceptance] criterion 06: centralized reference (5k steps, all frames)");
    let central_cfg = TrainConfig { steps: 5000, ..train_cfg.clone() };
    let central_outcome = train(scene, &scene.train_frames(), &central_cfg).unwrap();
    let centralized =
        evaluate(&central_outcome.model, &central_outcome.occupancy, scene, &eval_frames, &background);

    let ok = global > best_single && global < centralized;
    verdict(
        6,
        ok,
        &format!(
            "IID, 4 clients on {source} (reduced variant: N_pt=2k, N_local=1k, 10 rounds, 5k centralized, B=1024): \
             global {global:.2} dB > best single {best_single:.2} dB (singles {:?}), \
             and < centralized {centralized:.2} dB (gap {:.2} dB)",
            singles.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>(),
            centralized - global
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: non-IID federation clears the best single by >= 1 dB
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_federated_noniid_gap() {
    let (scene, source) = eval_scene();
    let train_cfg = fed_train_config();
    let fed = FederationConfig {
        n_clients: 4,
        pretrain_steps: 2000,
        local_steps: 1000,
        rounds: 10,
        payload_mode: PayloadMode::ParamsOnly,
        partition_mode: PartitionMode::NonIid,
        bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
        seed: 42,
        train: train_cfg.clone(),
        eval_frames: 8,
    };
    eprintln!("[acceptance] criterion 07: non-IID federation (azimuth sectors)");
    let outcome = run_federation(scene, &fed).unwrap();

    let eval_frames = eval_subset(&scene.test_frames(), 16);
    let background = train_cfg.background();
    let global = evaluate(&outcome.model, &outcome.occupancy, scene, &eval_frames, &background);

    let single_steps = fed.pretrain_steps + fed.rounds * fed.local_steps;
    eprintln!("[acceptance] criterion 07: training {} sector singles for {single_steps} steps", fed.n_clients);
    let singles = run_singles(scene, &outcome.plan, &train_cfg, single_steps, &eval_frames).unwrap();
    let best_single = singles.iter().cloned().fold(f32::NEG_INFINITY, f32::max);

    let ok = global >= best_single + 1.0;
    verdict(
        7,
        ok,
        &format!(
            "non-IID sector partition, 4 clients on {source}: global {global:.2} dB vs best single \
             {best_single:.2} dB (gap {:.2} dB, required >= 1.0; singles {:?})",
            global - best_single,
            singles.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: payload variants track each other round by round
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_payload_variants_equivalent() {
    let (scene, source) = eval_scene();
    let train_cfg = fed_train_config();
    let base = FederationConfig {
        n_clients: 2,
        pretrain_steps: 1000,
        local_steps: 500,
        rounds: 5,
        payload_mode: PayloadMode::ParamsOnly,
        partition_mode: PartitionMode::Iid,
        bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
        seed: 42,
        train: train_cfg.clone(),
        eval_frames: 6,
    };
    eprintln!("[acceptance] criterion 08: params_only vs with_grid on identical seeds");
    let params_only = run_federation(scene, &base).unwrap();
    let with_grid = run_federation(
        scene,
        &FederationConfig { payload_mode: PayloadMode::WithGrid, ..base.clone() },
    )
    .unwrap();

    assert_eq!(params_only.records.len(), with_grid.records.len());
    let mut max_gap = 0.0f32;
    let mut curves = String::new();
    for (a, b) in params_only.records.iter().zip(&with_grid.records) {
        assert_eq!(a.round, b.round);
        max_gap = max_gap.max((a.psnr - b.psnr).abs());
        curves.push_str(&format!(" r{}:{:.2}/{:.2}", a.round, a.psnr, b.psnr));
    }

    let ok = max_gap <= 0.3;
    verdict(
        8,
        ok,
        &format!(
            "params_only vs with_grid per-round PSNR on {source} (2 clients, 5 rounds, shared seeds): \
             max gap {max_gap:.3} dB (<=0.3);{curves}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: communication accounting
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_communication_accounting() {
    // Nominal payload sizes: round time = bytes * 8 * 2 * clients / bandwidth.
    let t_params = round_seconds(520_000, 4, 15_000_000);
    let t_grid = round_seconds(4_700_000, 4, 15_000_000);
    let params_dev = (t_params - 2.24).abs() / 2.24;
    let grid_dev = (t_grid - 20.16).abs() / 20.16;

    // The actual model reproduces those payload sizes at 16-bit encoding.
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = FieldModel::init(HashGridConfig::default(), 3, Precision::Mixed16, &mut rng);
    let actual_params = payload_bytes(&model, PayloadMode::ParamsOnly, 128);
    let actual_grid = payload_bytes(&model, PayloadMode::WithGrid, 128);
    let occupancy_share = (actual_grid - actual_params) as f64 / actual_grid as f64;
    let params_mb = actual_params as f64 / 1e6;
    let grid_mb = actual_grid as f64 / 1e6;

    let ok = (t_params - 2.22).abs() < 5e-3
        && (t_grid - 20.05).abs() < 5e-3
        && params_dev < 0.05
        && grid_dev < 0.05
        && (params_mb - 0.52).abs() / 0.52 < 0.05
        && (grid_mb - 4.7).abs() / 4.7 < 0.05
        && (0.85..=0.92).contains(&occupancy_share);
    verdict(
        9,
        ok,
        &format!(
            "round overheads {t_params:.2} s / {t_grid:.2} s (expected 2.22 / 20.05; within \
             {:.1}% / {:.1}% of 2.24 / 20.16), model payloads {params_mb:.3} MB params_only and \
             {grid_mb:.3} MB with_grid at 4 clients, 15 Mbit/s; occupancy share {occupancy_share:.3} in [0.85, 0.92]",
            params_dev * 100.0,
            grid_dev * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: bit-identical checkpoints under --threads 1
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_deterministic_checkpoints() {
    let (scene, source) = eval_scene();
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        steps: 100,
        effective_batch: 1024,
        tile: 1024,
        occupancy_resolution: 64,
        checkpoint_every: 100,
        eval_every: 0,
        threads: 1,
        ..TrainConfig::default()
    };

    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let run_config = TrainConfig { out_dir: Some(out.clone()), ..config.clone() };
        train(scene, &scene.train_frames(), &run_config).unwrap();
        bytes.push((
            std::fs::read(out.join("step_000100.tdnf")).unwrap(),
            std::fs::read(out.join("final.tdnf")).unwrap(),
        ));
    }

    let identical = bytes[0] == bytes[1];
    let ok = identical && !bytes[0].0.is_empty();
    verdict(
        10,
        ok,
        &format!(
            "two identical 100-step runs (threads=1) on {source}: step-100 checkpoints byte-identical: \
             {identical} ({} bytes each)",
            bytes[0].0.len()
        ),
    );
}
