//! Round-synchronous FedAvg simulation: a coordinator pre-trains, every
//! client then alternates local optimization with weighted parameter
//! averaging, and a ledger prices each round's parameter exchange.
//!
//! Clients are plain structs trained sequentially, so runs are deterministic
//! and no client can touch another's image data. Aggregation reads immutable
//! payload snapshots; a failed round leaves the global model untouched.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{partition, PartitionMode, PartitionPlan, Scene};
use crate::field::{FieldModel, Gradients};
use crate::occupancy::OccupancyGrid;
use crate::tensor::{f16_roundtrip, Dtype, NamedTensors, Tensor};
use crate::trainer::{evaluate, train_step, TrainConfig, TrainState};
use crate::{Error, Result};

/// Simulated link speed in bits per second.
pub const DEFAULT_BANDWIDTH_BPS: u64 = 15_000_000;

/// What each client transmits per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadMode {
    /// Hash tables + MLPs + the occupancy density EMA. Occupancy bits are
    /// not sent; the receiver recomputes them from the threshold rule.
    WithGrid,
    /// Hash tables + MLPs only; every client maintains its own occupancy
    /// grid locally.
    ParamsOnly,
}

impl FromStr for PayloadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<PayloadMode> {
        match s {
            "with_grid" => Ok(PayloadMode::WithGrid),
            "params_only" => Ok(PayloadMode::ParamsOnly),
            other => Err(Error::config(format!(
                "unknown payload mode {other:?} (expected with_grid or params_only)"
            ))),
        }
    }
}

impl std::fmt::Display for PayloadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PayloadMode::WithGrid => "with_grid",
            PayloadMode::ParamsOnly => "params_only",
        })
    }
}

/// Parameters of one federation run.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub n_clients: usize,
    /// Coordinator warm-up steps before the first round.
    pub pretrain_steps: usize,
    /// Optimization steps each client runs per round.
    pub local_steps: usize,
    pub rounds: usize,
    pub payload_mode: PayloadMode,
    pub partition_mode: PartitionMode,
    pub bandwidth_bps: u64,
    pub seed: u64,
    /// Shared per-client training hyper-parameters.
    pub train: TrainConfig,
    /// Evaluate on at most this many test frames per round (0 = all).
    pub eval_frames: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_clients: 4,
            pretrain_steps: 10_000,
            local_steps: 1000,
            rounds: 20,
            payload_mode: PayloadMode::ParamsOnly,
            partition_mode: PartitionMode::Iid,
            bandwidth_bps: DEFAULT_BANDWIDTH_BPS,
            seed: 42,
            train: TrainConfig::default(),
            eval_frames: 0,
        }
    }
}

/// Bytes one client transmits per round at 16-bit tensor encoding.
pub fn payload_bytes(model: &FieldModel, mode: PayloadMode, occupancy_resolution: usize) -> u64 {
    let params = 2 * model.param_count() as u64;
    match mode {
        PayloadMode::ParamsOnly => params,
        PayloadMode::WithGrid => params + 2 * occupancy_resolution.pow(3) as u64,
    }
}

/// Total traffic of one round: every client uploads its payload and receives
/// the aggregated model back.
pub fn round_bytes(payload: u64, n_clients: usize) -> u64 {
    2 * n_clients as u64 * payload
}

/// Wall-clock transfer time of one round.
pub fn round_seconds(payload: u64, n_clients: usize, bandwidth_bps: u64) -> f64 {
    round_bytes(payload, n_clients) as f64 * 8.0 / bandwidth_bps as f64
}

/// One aggregation round's traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommEntry {
    pub round: usize,
    pub bytes: u64,
    pub seconds: f64,
}

/// Per-round byte/time accounting with running totals.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    pub entries: Vec<CommEntry>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, payload: u64, n_clients: usize, bandwidth_bps: u64) {
        self.entries.push(CommEntry {
            round,
            bytes: round_bytes(payload, n_clients),
            seconds: round_seconds(payload, n_clients, bandwidth_bps),
        });
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.entries.iter().map(|e| e.seconds).sum()
    }
}

/// Weighted average of named tensor sets, accumulated at full precision.
/// Weights are client data sizes; equal weights reduce to the arithmetic
/// mean. All sets must share names and shapes.
pub fn fedavg(payloads: &[NamedTensors], weights: &[f32]) -> Result<NamedTensors> {
    if payloads.is_empty() {
        return Err(Error::config("fedavg needs at least one payload"));
    }
    assert_eq!(payloads.len(), weights.len(), "one weight per payload");
    let total: f64 = weights.iter().map(|&w| w as f64).sum();
    if !(total > 0.0) || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::config("fedavg weights must be non-negative with a positive sum"));
    }

    let mut out = NamedTensors::new();
    for (name, first) in &payloads[0] {
        let mut acc = vec![0.0f64; first.data.len()];
        for (payload, &w) in payloads.iter().zip(weights) {
            let t = payload.get(name).ok_or_else(|| {
                Error::config(format!("fedavg payload missing tensor {name:?}"))
            })?;
            if t.dims != first.dims {
                return Err(Error::config(format!(
                    "fedavg shape mismatch for {name:?}: {:?} vs {:?}",
                    t.dims, first.dims
                )));
            }
            let scale = w as f64 / total;
            for (a, &v) in acc.iter_mut().zip(&t.data) {
                *a += scale * v as f64;
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        out.insert(name.clone(), Tensor::new(first.dims.clone(), first.dtype, data));
    }
    // Extra tensors in later payloads are a protocol violation, not noise.
    for payload in payloads {
        if payload.len() != payloads[0].len() {
            return Err(Error::config("fedavg payloads carry different tensor sets"));
        }
    }
    Ok(out)
}

/// One simulated participant.
#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    /// Training frames this client owns; never shared.
    pub frames: Vec<usize>,
    pub model: FieldModel,
    pub occupancy: OccupancyGrid,
    pub state: TrainState,
}

impl Client {
    /// The tensors this client uploads under `mode`.
    pub fn payload(&self, mode: PayloadMode) -> NamedTensors {
        let mut map = self.model.to_named();
        if mode == PayloadMode::WithGrid {
            let r = self.occupancy.resolution;
            map.insert(
                "occ.density_ema".to_string(),
                Tensor::new(vec![r, r, r], Dtype::F16, self.occupancy.density_ema.clone()),
            );
        }
        map
    }

    /// Run `steps` local optimization steps on the client's own frames.
    pub fn train_local(&mut self, scene: &Scene, steps: usize, config: &TrainConfig, grads: &mut Gradients) {
        for _ in 0..steps {
            train_step(
                &mut self.model,
                &mut self.occupancy,
                &mut self.state,
                scene,
                &self.frames,
                config,
                grads,
            );
        }
    }
}

/// Train every client for `local_steps`, aggregate, and return the new
/// global tensor set. Client models are not yet updated; the caller
/// broadcasts after installing the aggregate.
pub fn run_round(clients: &mut [Client], scene: &Scene, config: &FederationConfig) -> Result<NamedTensors> {
    let mut grads = Gradients::zeros_like(&clients[0].model);
    for client in clients.iter_mut() {
        client.train_local(scene, config.local_steps, &config.train, &mut grads);
    }
    let payloads: Vec<NamedTensors> = clients.iter().map(|c| c.payload(config.payload_mode)).collect();
    let weights: Vec<f32> = clients.iter().map(|c| c.frames.len() as f32).collect();
    fedavg(&payloads, &weights)
}

/// Install an aggregated tensor set into a model/occupancy pair. Model
/// parameters are re-quantized by `load_named`; the density EMA (when
/// present) is f16-rounded and the bits recomputed.
pub fn install_global(
    global: &NamedTensors,
    model: &mut FieldModel,
    occupancy: &mut OccupancyGrid,
) -> Result<()> {
    model.load_named(global)?;
    if let Some(ema) = global.get("occ.density_ema") {
        assert_eq!(ema.data.len(), occupancy.density_ema.len(), "occupancy resolution mismatch");
        for (dst, &src) in occupancy.density_ema.iter_mut().zip(&ema.data) {
            *dst = f16_roundtrip(src);
        }
        occupancy.recompute_bits();
    }
    Ok(())
}

/// Global state after one evaluation point.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    /// 0 = right after pre-training; rounds count from 1.
    pub round: usize,
    /// Mean test PSNR of the global model.
    pub psnr: f32,
    pub payload_bytes: u64,
    pub cumulative_seconds: f64,
}

/// Everything a federation run produces.
pub struct FederationOutcome {
    pub model: FieldModel,
    /// The coordinator's grid in params_only mode, the averaged one in
    /// with_grid mode.
    pub occupancy: OccupancyGrid,
    pub plan: PartitionPlan,
    pub records: Vec<RoundRecord>,
    pub ledger: CommLedger,
}

impl FederationOutcome {
    /// CSV with columns `round,client_id,psnr,payload_bytes,cumulative_comm_seconds`.
    pub fn write_report(&self, path: &std::path::Path) -> Result<()> {
        let mut text = String::from("round,client_id,psnr,payload_bytes,cumulative_comm_seconds\n");
        for r in &self.records {
            text.push_str(&format!(
                "{},global,{:.4},{},{:.6}\n",
                r.round, r.psnr, r.payload_bytes, r.cumulative_seconds
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Up to `k` indices spread evenly across `frames` (all of them when `k`
/// is 0 or exceeds the count).
pub fn eval_subset(frames: &[usize], k: usize) -> Vec<usize> {
    if k == 0 || k >= frames.len() {
        return frames.to_vec();
    }
    (0..k).map(|i| frames[i * frames.len() / k]).collect()
}

/// Simulate the full protocol: partition, coordinator pre-training, an
/// initial broadcast, then `rounds` alternations of local training and
/// FedAvg. The global model is evaluated on the test split after
/// pre-training and after every round.
pub fn run_federation(scene: &Scene, config: &FederationConfig) -> Result<FederationOutcome> {
    if config.n_clients == 0 {
        return Err(Error::config("federation needs at least one client"));
    }
    let plan = partition(scene, config.n_clients, config.partition_mode, config.seed)?;
    let background = config.train.background();
    let test = eval_subset(&scene.test_frames(), config.eval_frames);

    // All clients start from one shared initialization, like the trainer.
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let init = FieldModel::init(config.train.grid, config.train.channels, config.train.precision, &mut init_rng);
    let mut clients: Vec<Client> = (0..config.n_clients)
        .map(|id| Client {
            id,
            frames: plan.client_frames(id),
            model: init.clone(),
            occupancy: OccupancyGrid::new(config.train.occupancy_resolution),
            state: TrainState::new(&init, config.train.seed.wrapping_add(1 + id as u64)),
        })
        .collect();

    // Coordinator pre-training, then the initial broadcast.
    let mut grads = Gradients::zeros_like(&init);
    clients[0].train_local(scene, config.pretrain_steps, &config.train, &mut grads);
    let first = clients[0].payload(config.payload_mode);
    broadcast(&first, &mut clients)?;

    let payload = payload_bytes(&clients[0].model, config.payload_mode, config.train.occupancy_resolution);
    let mut ledger = CommLedger::default();
    let mut records = Vec::with_capacity(config.rounds + 1);
    let record = |round: usize, clients: &[Client], ledger: &CommLedger| {
        let psnr = if test.is_empty() {
            f32::NAN
        } else {
            evaluate(&clients[0].model, &clients[0].occupancy, scene, &test, &background)
        };
        RoundRecord { round, psnr, payload_bytes: payload, cumulative_seconds: ledger.total_seconds() }
    };
    records.push(record(0, &clients, &ledger));

    for round in 1..=config.rounds {
        let global = run_round(&mut clients, scene, config)?;
        broadcast(&global, &mut clients)?;
        ledger.record(round, payload, config.n_clients, config.bandwidth_bps);
        records.push(record(round, &clients, &ledger));
    }

    let coordinator = clients.into_iter().next().expect("at least one client");
    Ok(FederationOutcome {
        model: coordinator.model,
        occupancy: coordinator.occupancy,
        plan,
        records,
        ledger,
    })
}

/// Load the aggregated tensors into every client and refresh optimizer
/// masters; moments stay local.
fn broadcast(global: &NamedTensors, clients: &mut [Client]) -> Result<()> {
    for client in clients.iter_mut() {
        install_global(global, &mut client.model, &mut client.occupancy)?;
        client.state.adam.refresh_masters(&client.model);
    }
    Ok(())
}

/// Baseline: each client trains alone on its own partition for `steps`
/// steps. Returns each client's mean test PSNR over `test_frames`.
pub fn run_singles(
    scene: &Scene,
    plan: &PartitionPlan,
    train: &TrainConfig,
    steps: usize,
    test_frames: &[usize],
) -> Result<Vec<f32>> {
    let background = train.background();
    let mut scores = Vec::with_capacity(plan.n_clients());
    for id in 0..plan.n_clients() {
        let config = TrainConfig {
            steps,
            out_dir: None,
            eval_every: 0,
            checkpoint_every: 0,
            ..train.clone()
        };
        let outcome = crate::trainer::train(scene, &plan.client_frames(id), &config)?;
        scores.push(evaluate(&outcome.model, &outcome.occupancy, scene, test_frames, &background));
    }
    Ok(scores)
}
