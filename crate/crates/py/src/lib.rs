//! Python bindings for the field trainer.
//!
//! Exposes scene loading, training, rendering, checkpoints, federated
//! simulation, and the memory/communication accounting as a `tdnf_py`
//! extension module. Build with
//! `cargo build -p tdnf-py --features extension-module`, then import the
//! produced `libtdnf_py.so` as `tdnf_py` (see `python/smoke_test.py`).
//!
//! Usage from Python:
//!
//!     import tdnf_py
//!     scene = tdnf_py.Scene.synthetic(resolution=96, n_train=9, n_test=3)
//!     model = tdnf_py.train(scene, steps=200, effective_batch=1024)
//!     print(model.evaluate(scene))

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tdnf::budget::{memory_footprint, SceneSpec};
use tdnf::checkpoint::{load_checkpoint, save_checkpoint};
use tdnf::dataset::{load_scene, partition, PartitionMode};
use tdnf::encoding::HashGridConfig;
use tdnf::federated::{self, FederationConfig, PayloadMode};
use tdnf::field::{FieldModel, Precision};
use tdnf::occupancy::OccupancyGrid;
use tdnf::renderer::{render_image, save_png};
use tdnf::synth::{self, SynthConfig};
use tdnf::trainer::{self, evaluate, TrainConfig};

fn py_err(e: tdnf::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_precision(name: &str) -> PyResult<Precision> {
    match name {
        "mixed16" => Ok(Precision::Mixed16),
        "full32" => Ok(Precision::Full32),
        _ => Err(PyValueError::new_err(format!(
            "unknown precision {name:?} (expected \"mixed16\" or \"full32\")"
        ))),
    }
}

fn parse_payload(name: &str) -> PyResult<PayloadMode> {
    match name {
        "params_only" => Ok(PayloadMode::ParamsOnly),
        "with_grid" => Ok(PayloadMode::WithGrid),
        _ => Err(PyValueError::new_err(format!(
            "unknown payload mode {name:?} (expected \"params_only\" or \"with_grid\")"
        ))),
    }
}

fn parse_partition(name: &str) -> PyResult<PartitionMode> {
    match name {
        "iid" => Ok(PartitionMode::Iid),
        "non_iid" => Ok(PartitionMode::NonIid),
        _ => Err(PyValueError::new_err(format!(
            "unknown partition mode {name:?} (expected \"iid\" or \"non_iid\")"
        ))),
    }
}

/// A calibrated multi-view scene (cameras, images, train/test split).
#[pyclass]
#[derive(Clone)]
pub struct Scene {
    inner: tdnf::dataset::Scene,
}

#[pymethods]
impl Scene {
    /// Load a transforms-JSON scene directory, downsampling to
    /// `resolution` x `resolution`.
    #[staticmethod]
    #[pyo3(signature = (root, resolution = 160, channels = 3))]
    fn load(root: PathBuf, resolution: usize, channels: usize) -> PyResult<Scene> {
        Ok(Scene { inner: load_scene(&root, resolution, channels).map_err(py_err)? })
    }

    /// Procedural test scene rendered from an analytic density field.
    #[staticmethod]
    #[pyo3(signature = (resolution = 96, n_train = 9, n_test = 3, channels = 3))]
    fn synthetic(resolution: usize, n_train: usize, n_test: usize, channels: usize) -> Scene {
        let config = SynthConfig { resolution, n_train, n_test };
        Scene { inner: synth::scene(&config, channels) }
    }

    #[getter]
    fn n_frames(&self) -> usize {
        self.inner.cameras.len()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.cameras[0].width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.cameras[0].height
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn train_frames(&self) -> Vec<usize> {
        self.inner.train_frames()
    }

    #[getter]
    fn test_frames(&self) -> Vec<usize> {
        self.inner.test_frames()
    }

    /// Pixels of one frame as a flat row-major list in [0,1].
    fn image(&self, frame: usize) -> PyResult<Vec<f32>> {
        self.inner
            .images
            .get(frame)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("frame {frame} out of range")))
    }

    /// Split training frames across federated clients; returns one frame
    /// list per client.
    #[pyo3(signature = (n_clients, mode = "iid", seed = 42))]
    fn partition(&self, n_clients: usize, mode: &str, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let plan = partition(&self.inner, n_clients, parse_partition(mode)?, seed).map_err(py_err)?;
        Ok((0..plan.n_clients()).map(|c| plan.client_frames(c)).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene({} frames, {}x{}x{}, {} train / {} test)",
            self.inner.cameras.len(),
            self.width(),
            self.height(),
            self.inner.channels,
            self.inner.train_frames().len(),
            self.inner.test_frames().len(),
        )
    }
}

/// A trained radiance field: hash-grid encoder, the two MLPs, and the
/// occupancy grid used for empty-space skipping.
#[pyclass]
pub struct Model {
    model: FieldModel,
    occupancy: OccupancyGrid,
}

impl Model {
    fn background(&self) -> Vec<f32> {
        // White for RGB, black for grayscale — same convention as training.
        if self.model.channels == 3 { vec![1.0; 3] } else { vec![0.0; self.model.channels] }
    }

    fn camera<'s>(&self, scene: &'s Scene, frame: usize) -> PyResult<&'s tdnf::dataset::Camera> {
        scene
            .inner
            .cameras
            .get(frame)
            .ok_or_else(|| PyValueError::new_err(format!("frame {frame} out of range")))
    }
}

#[pymethods]
impl Model {
    /// Load a `.tdnf` checkpoint. A checkpoint without occupancy data gets
    /// an all-occupied grid (no skipping).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        let (model, occupancy) = load_checkpoint(&path).map_err(py_err)?;
        let occupancy = occupancy.unwrap_or_else(|| OccupancyGrid::new(128));
        Ok(Model { model, occupancy })
    }

    /// Write model and occupancy grid to a `.tdnf` checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.model, Some(&self.occupancy)).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.model.channels
    }

    #[getter]
    fn occupied_fraction(&self) -> f32 {
        self.occupancy.occupied_fraction()
    }

    /// Bytes one client uploads per round under the given payload mode
    /// ("params_only" or "with_grid").
    fn payload_bytes(&self, mode: &str) -> PyResult<u64> {
        Ok(federated::payload_bytes(&self.model, parse_payload(mode)?, self.occupancy.resolution))
    }

    /// Render one frame's view. Returns `(pixels, stats)` where pixels is a
    /// flat row-major list and stats reports ray/sample counts.
    #[pyo3(signature = (scene, frame, background = None))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        scene: &Scene,
        frame: usize,
        background: Option<Vec<f32>>,
    ) -> PyResult<(Vec<f32>, Bound<'py, PyDict>)> {
        let camera = self.camera(scene, frame)?.clone();
        let bg = background.unwrap_or_else(|| self.background());
        if bg.len() != self.model.channels {
            return Err(PyValueError::new_err(format!(
                "background has {} channels, model has {}",
                bg.len(),
                self.model.channels
            )));
        }
        let (model, occupancy) = (&self.model, &self.occupancy);
        let (pixels, stats) = py.detach(|| render_image(model, occupancy, &camera, &bg));
        let out = PyDict::new(py);
        out.set_item("rays", stats.rays)?;
        out.set_item("total_samples", stats.total_samples)?;
        out.set_item("mean_samples_per_pixel", stats.mean_samples_per_pixel)?;
        Ok((pixels, out))
    }

    /// Render one frame's view straight to a PNG file.
    #[pyo3(signature = (scene, frame, path, background = None))]
    fn render_png(
        &self,
        py: Python<'_>,
        scene: &Scene,
        frame: usize,
        path: PathBuf,
        background: Option<Vec<f32>>,
    ) -> PyResult<()> {
        let camera = self.camera(scene, frame)?.clone();
        let (pixels, _) = self.render(py, scene, frame, background)?;
        save_png(&path, &pixels, camera.width, camera.height, self.model.channels).map_err(py_err)
    }

    /// Mean PSNR (dB) over the given frames (default: the test split).
    #[pyo3(signature = (scene, frames = None))]
    fn evaluate(&self, py: Python<'_>, scene: &Scene, frames: Option<Vec<usize>>) -> PyResult<f32> {
        let frames = frames.unwrap_or_else(|| scene.inner.test_frames());
        if frames.is_empty() {
            return Err(PyValueError::new_err("no frames to evaluate"));
        }
        if let Some(&bad) = frames.iter().find(|&&f| f >= scene.inner.cameras.len()) {
            return Err(PyValueError::new_err(format!("frame {bad} out of range")));
        }
        let bg = self.background();
        let (model, occupancy) = (&self.model, &self.occupancy);
        Ok(py.detach(|| evaluate(model, occupancy, &scene.inner, &frames, &bg)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} params, {} channels, {:.1}% occupied)",
            self.model.param_count(),
            self.model.channels,
            100.0 * self.occupancy.occupied_fraction()
        )
    }
}

fn build_train_config(
    steps: usize,
    effective_batch: usize,
    tile: usize,
    lr: f32,
    seed: u64,
    occupancy_resolution: usize,
    precision: &str,
    levels: usize,
    table_size_log2: u32,
    channels: usize,
    out_dir: Option<PathBuf>,
    threads: usize,
) -> PyResult<TrainConfig> {
    if effective_batch == 0 || tile == 0 || effective_batch % tile != 0 {
        return Err(PyValueError::new_err(format!(
            "effective_batch ({effective_batch}) must be a non-zero multiple of tile ({tile})"
        )));
    }
    Ok(TrainConfig {
        steps,
        effective_batch,
        tile,
        lr,
        seed,
        occupancy_resolution,
        precision: parse_precision(precision)?,
        grid: HashGridConfig { levels, table_size_log2, ..HashGridConfig::default() },
        channels,
        out_dir,
        threads,
        ..TrainConfig::default()
    })
}

/// Train a fresh model on the scene's training split. Returns the trained
/// [`Model`]; pass `out_dir` to also get checkpoints and a CSV loss log.
#[pyfunction]
#[pyo3(signature = (scene, steps = 10_000, effective_batch = 8192, tile = 1024,
       lr = 1e-2, seed = 42, occupancy_resolution = 128, precision = "mixed16",
       levels = 16, table_size_log2 = 13, out_dir = None, threads = 1))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    scene: &Scene,
    steps: usize,
    effective_batch: usize,
    tile: usize,
    lr: f32,
    seed: u64,
    occupancy_resolution: usize,
    precision: &str,
    levels: usize,
    table_size_log2: u32,
    out_dir: Option<PathBuf>,
    threads: usize,
) -> PyResult<Model> {
    let config = build_train_config(
        steps,
        effective_batch,
        tile,
        lr,
        seed,
        occupancy_resolution,
        precision,
        levels,
        table_size_log2,
        scene.inner.channels,
        out_dir,
        threads,
    )?;
    let frames = scene.inner.train_frames();
    let scene_ref = &scene.inner;
    let outcome = py.detach(|| trainer::train(scene_ref, &frames, &config)).map_err(py_err)?;
    Ok(Model { model: outcome.model, occupancy: outcome.occupancy })
}

/// Result of a federated simulation: the aggregated global model plus the
/// per-round PSNR curve and communication ledger.
#[pyclass]
pub struct FederationResult {
    #[pyo3(get)]
    /// `(round, psnr_db)` pairs; round 0 is right after pre-training.
    rounds: Vec<(usize, f32)>,
    #[pyo3(get)]
    /// Bytes one client uploads per round.
    payload_bytes: u64,
    #[pyo3(get)]
    /// Total bytes moved across all recorded rounds.
    total_bytes: u64,
    #[pyo3(get)]
    /// Total transfer time across all recorded rounds, seconds.
    total_seconds: f64,
    model: FieldModel,
    occupancy: OccupancyGrid,
}

#[pymethods]
impl FederationResult {
    /// The aggregated global model.
    #[getter]
    fn model(&self) -> Model {
        Model { model: self.model.clone(), occupancy: self.occupancy.clone() }
    }

    fn __repr__(&self) -> String {
        let last = self.rounds.last().map(|&(_, p)| p).unwrap_or(f32::NAN);
        format!(
            "FederationResult({} rounds, final psnr {:.2} dB, {} B/round payload)",
            self.rounds.len().saturating_sub(1),
            last,
            self.payload_bytes
        )
    }
}

/// Simulate synchronous federated training with round-based weight
/// averaging over a frame partition of the scene.
#[pyfunction]
#[pyo3(signature = (scene, n_clients = 4, pretrain_steps = 2000, local_steps = 1000,
       rounds = 10, payload = "params_only", partition = "iid",
       bandwidth_bps = federated::DEFAULT_BANDWIDTH_BPS, seed = 42, eval_frames = 8,
       effective_batch = 8192, tile = 1024, occupancy_resolution = 128,
       precision = "mixed16"))]
#[allow(clippy::too_many_arguments)]
fn federate(
    py: Python<'_>,
    scene: &Scene,
    n_clients: usize,
    pretrain_steps: usize,
    local_steps: usize,
    rounds: usize,
    payload: &str,
    partition: &str,
    bandwidth_bps: u64,
    seed: u64,
    eval_frames: usize,
    effective_batch: usize,
    tile: usize,
    occupancy_resolution: usize,
    precision: &str,
) -> PyResult<FederationResult> {
    let train = TrainConfig {
        effective_batch,
        tile,
        occupancy_resolution,
        precision: parse_precision(precision)?,
        channels: scene.inner.channels,
        eval_every: 0,
        checkpoint_every: 0,
        seed,
        ..TrainConfig::default()
    };
    let config = FederationConfig {
        n_clients,
        pretrain_steps,
        local_steps,
        rounds,
        payload_mode: parse_payload(payload)?,
        partition_mode: parse_partition(partition)?,
        bandwidth_bps,
        seed,
        train,
        eval_frames,
    };
    let scene_ref = &scene.inner;
    let outcome = py.detach(|| federated::run_federation(scene_ref, &config)).map_err(py_err)?;
    let payload = outcome.records.last().map(|r| r.payload_bytes).unwrap_or(0);
    Ok(FederationResult {
        rounds: outcome.records.iter().map(|r| (r.round, r.psnr)).collect(),
        payload_bytes: payload,
        total_bytes: outcome.ledger.entries.iter().map(|e| e.bytes).sum(),
        total_seconds: outcome.ledger.entries.iter().map(|e| e.seconds).sum(),
        model: outcome.model,
        occupancy: outcome.occupancy,
    })
}

/// Peak-memory and arithmetic budget for training this scene at the given
/// settings, itemized in bytes.
#[pyfunction]
#[pyo3(signature = (scene, effective_batch = 8192, table_size_log2 = 13, levels = 16,
       precision = "mixed16", occupancy_resolution = 128))]
fn memory_budget<'py>(
    py: Python<'py>,
    scene: &Scene,
    effective_batch: usize,
    table_size_log2: u32,
    levels: usize,
    precision: &str,
    occupancy_resolution: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let config = TrainConfig {
        effective_batch,
        occupancy_resolution,
        precision: parse_precision(precision)?,
        grid: HashGridConfig { levels, table_size_log2, ..HashGridConfig::default() },
        channels: scene.inner.channels,
        ..TrainConfig::default()
    };
    let report = memory_footprint(&config, &SceneSpec::of(&scene.inner));
    let out = PyDict::new(py);
    out.set_item("hash_bytes", report.hash_bytes)?;
    out.set_item("mlp_bytes", report.mlp_bytes)?;
    out.set_item("optimizer_bytes", report.optimizer_bytes)?;
    out.set_item("gradient_bytes", report.gradient_bytes)?;
    out.set_item("occupancy_bytes", report.occupancy_bytes)?;
    out.set_item("activation_bytes", report.activation_bytes)?;
    out.set_item("image_bytes", report.image_bytes)?;
    out.set_item("total_bytes", report.total_bytes())?;
    out.set_item("ops_per_step", report.ops_per_step)?;
    Ok(out)
}

/// Peak signal-to-noise ratio (dB) between two equally sized images.
#[pyfunction]
fn psnr(a: Vec<f32>, b: Vec<f32>) -> PyResult<f32> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PyValueError::new_err(format!(
            "image lengths differ or are empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(tdnf::metrics::psnr(&a, &b))
}

/// Mean structural similarity between two images (11x11 Gaussian window).
#[pyfunction]
fn ssim(a: Vec<f32>, b: Vec<f32>, width: usize, height: usize, channels: usize) -> PyResult<f32> {
    tdnf::metrics::ssim(&a, &b, width, height, channels).map_err(py_err)
}

/// Wall-clock seconds one aggregation round spends on the wire: every
/// client uploads `payload_bytes` and downloads the aggregate.
#[pyfunction]
fn round_seconds(payload_bytes: u64, n_clients: usize, bandwidth_bps: u64) -> f64 {
    federated::round_seconds(payload_bytes, n_clients, bandwidth_bps)
}

#[pymodule]
fn tdnf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scene>()?;
    m.add_class::<Model>()?;
    m.add_class::<FederationResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(federate, m)?)?;
    m.add_function(wrap_pyfunction!(memory_budget, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(round_seconds, m)?)?;
    Ok(())
}
