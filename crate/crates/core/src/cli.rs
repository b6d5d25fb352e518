//! Command-line entry point: reproducible experiments over the trainer,
//! renderer, federation simulator, and budget analyzer.
//!
//! Configuration merges three layers, later ones winning: built-in defaults,
//! a flat `key=value` config file, then command-line flags. The effective
//! configuration is echoed into the output directory so any run can be
//! reproduced bit-exactly (with `--threads 1`) from its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::budget::{memory_footprint, sweep, SceneSpec, SweepPoint, SELECTED_POINT};
use crate::dataset::{load_scene, partition, PartitionMode, Scene};
use crate::encoding::HashGridConfig;
use crate::federated::{
    eval_subset, payload_bytes, round_seconds, run_federation, FederationConfig, PayloadMode,
};
use crate::field::{FieldModel, Precision};
use crate::metrics::{psnr, ssim};
use crate::occupancy::OccupancyGrid;
use crate::renderer::{render_image, save_png};
use crate::synth::{self, SynthConfig};
use crate::trainer::{train, TrainConfig};
use crate::{checkpoint, Error, Result};

/// Environment variable overriding the default output directory.
pub const OUT_ENV: &str = "TDN_OUT";

/// Every tunable of the toolkit as one flat key set. Keys are addressable
/// from the config file and echoed back in sorted order.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // Training.
    pub steps: usize,
    pub batch: usize,
    pub tile: usize,
    pub img_per_step: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps_adam: f32,
    pub weight_decay: f32,
    pub huber_delta: f32,
    pub grid_update_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    // Model.
    pub levels: usize,
    pub features: usize,
    pub table_log2: u32,
    pub base_resolution: u32,
    pub max_resolution: u32,
    pub channels: usize,
    pub precision: Precision,
    pub occupancy_resolution: usize,
    // Data.
    pub resolution: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    // Federation.
    pub clients: usize,
    pub pretrain_steps: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub payload: PayloadMode,
    pub partition: PartitionMode,
    pub bandwidth_bps: u64,
    pub eval_frames: usize,
    // Execution.
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FederationConfig::default();
        RunConfig {
            steps: t.steps,
            batch: t.effective_batch,
            tile: t.tile,
            img_per_step: t.img_per_step,
            lr: t.lr,
            beta1: t.betas.0,
            beta2: t.betas.1,
            eps_adam: t.eps_adam,
            weight_decay: t.weight_decay_mlp,
            huber_delta: t.huber_delta,
            grid_update_every: t.grid_update_every,
            eval_every: 1000,
            checkpoint_every: t.checkpoint_every,
            levels: t.grid.levels,
            features: t.grid.features,
            table_log2: t.grid.table_size_log2,
            base_resolution: t.grid.base_resolution,
            max_resolution: t.grid.max_resolution,
            channels: t.channels,
            precision: t.precision,
            occupancy_resolution: t.occupancy_resolution,
            resolution: 160,
            synth_train: 100,
            synth_test: 200,
            clients: f.n_clients,
            pretrain_steps: f.pretrain_steps,
            local_steps: f.local_steps,
            rounds: f.rounds,
            payload: f.payload_mode,
            partition: f.partition_mode,
            bandwidth_bps: f.bandwidth_bps,
            eval_frames: f.eval_frames,
            seed: t.seed,
            threads: 1,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value {value:?} for key {key:?}: {e}")))
}

impl RunConfig {
    /// Set one key; unknown keys are a configuration error. Mode values
    /// accept hyphens or underscores interchangeably.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let normalized = value.replace('-', "_");
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "tile" => self.tile = parse_value(key, value)?,
            "img_per_step" => self.img_per_step = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps_adam" => self.eps_adam = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "huber_delta" => self.huber_delta = parse_value(key, value)?,
            "grid_update_every" => self.grid_update_every = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "levels" => self.levels = parse_value(key, value)?,
            "features" => self.features = parse_value(key, value)?,
            "table_log2" => self.table_log2 = parse_value(key, value)?,
            "base_resolution" => self.base_resolution = parse_value(key, value)?,
            "max_resolution" => self.max_resolution = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "precision" => {
                self.precision = match normalized.as_str() {
                    "full32" => Precision::Full32,
                    "mixed16" => Precision::Mixed16,
                    other => {
                        return Err(Error::config(format!(
                            "bad value {other:?} for key \"precision\" (expected full32 or mixed16)"
                        )))
                    }
                }
            }
            "occupancy_resolution" => self.occupancy_resolution = parse_value(key, value)?,
            "resolution" => self.resolution = parse_value(key, value)?,
            "synth_train" => self.synth_train = parse_value(key, value)?,
            "synth_test" => self.synth_test = parse_value(key, value)?,
            "clients" => self.clients = parse_value(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse_value(key, value)?,
            "local_steps" => self.local_steps = parse_value(key, value)?,
            "rounds" => self.rounds = parse_value(key, value)?,
            "payload" => self.payload = normalized.parse()?,
            "partition" => self.partition = normalized.parse()?,
            "bandwidth_bps" => self.bandwidth_bps = parse_value(key, value)?,
            "eval_frames" => self.eval_frames = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "threads" => self.threads = parse_value(key, value)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Merge a flat `key = value` file (one pair per line, `#` comments).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical echo of every key, one `key=value` per line, sorted.
    pub fn echo(&self) -> String {
        let pairs: Vec<(&str, String)> = vec![
            ("bandwidth_bps", self.bandwidth_bps.to_string()),
            ("base_resolution", self.base_resolution.to_string()),
            ("batch", self.batch.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("channels", self.channels.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("clients", self.clients.to_string()),
            ("eps_adam", self.eps_adam.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_frames", self.eval_frames.to_string()),
            ("features", self.features.to_string()),
            ("grid_update_every", self.grid_update_every.to_string()),
            ("huber_delta", self.huber_delta.to_string()),
            ("img_per_step", self.img_per_step.to_string()),
            ("levels", self.levels.to_string()),
            ("local_steps", self.local_steps.to_string()),
            ("lr", self.lr.to_string()),
            ("max_resolution", self.max_resolution.to_string()),
            ("occupancy_resolution", self.occupancy_resolution.to_string()),
            ("partition", self.partition.to_string()),
            ("payload", self.payload.to_string()),
            ("precision", self.precision.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("resolution", self.resolution.to_string()),
            ("rounds", self.rounds.to_string()),
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("table_log2", self.table_log2.to_string()),
            ("threads", self.threads.to_string()),
            ("tile", self.tile.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn grid_config(&self) -> HashGridConfig {
        HashGridConfig {
            levels: self.levels,
            features: self.features,
            table_size_log2: self.table_log2,
            base_resolution: self.base_resolution,
            max_resolution: self.max_resolution,
        }
    }

    pub fn train_config(&self, out_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            effective_batch: self.batch,
            tile: self.tile,
            img_per_step: self.img_per_step,
            lr: self.lr,
            betas: (self.beta1, self.beta2),
            eps_adam: self.eps_adam,
            weight_decay_mlp: self.weight_decay,
            huber_delta: self.huber_delta,
            grid_update_every: self.grid_update_every,
            seed: self.seed,
            grid: self.grid_config(),
            channels: self.channels,
            precision: self.precision,
            occupancy_resolution: self.occupancy_resolution,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            out_dir,
            threads: self.threads,
        }
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            n_clients: self.clients,
            pretrain_steps: self.pretrain_steps,
            local_steps: self.local_steps,
            rounds: self.rounds,
            payload_mode: self.payload,
            partition_mode: self.partition,
            bandwidth_bps: self.bandwidth_bps,
            seed: self.seed,
            train: self.train_config(None),
            eval_frames: self.eval_frames,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            resolution: self.resolution,
            n_train: self.synth_train,
            n_test: self.synth_test,
        }
    }
}

/// Memory-frugal radiance-field trainer, federated simulator, and budget
/// analyzer.
#[derive(Debug, Parser)]
#[command(name = "tdnf", version)]
pub struct CliArgs {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat key=value configuration file, applied before flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory (default: $TDN_OUT or ./runs/<command>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scene directory with transforms_train.json / transforms_test.json;
    /// omit to use the built-in procedural scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (1 = fully deterministic).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize a field on a scene; writes checkpoints, a loss log, and
    /// periodic renders.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        steps: Option<usize>,
        /// Effective batch size (samples per optimizer step).
        #[arg(long)]
        batch: Option<usize>,
        /// log2 of the hash-table size.
        #[arg(long)]
        table_log2: Option<u32>,
        /// Training image resolution.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Render test-split views (or one frame) from a checkpoint.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Render only this frame index of the chosen split.
        #[arg(long)]
        frame: Option<usize>,
        /// Which split to render.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Evaluate a checkpoint: mean PSNR/SSIM over a split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Simulate federated training across virtual clients.
    Federate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        /// iid or non-iid.
        #[arg(long)]
        partition: Option<String>,
        /// params-only or with-grid.
        #[arg(long)]
        payload: Option<String>,
        #[arg(long)]
        pretrain_steps: Option<usize>,
        #[arg(long)]
        local_steps: Option<usize>,
    },
    /// Train a grid of (batch, table size) points and emit the Pareto CSV.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',', default_value = "2048,8192")]
        batches: Vec<usize>,
        /// Comma-separated log2 table sizes.
        #[arg(long, value_delimiter = ',', default_value = "11,13")]
        tables: Vec<u32>,
        /// Training steps per point (reduced counts rank fine).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write a client partition plan for a scene.
    Partition {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        clients: Option<usize>,
        /// iid or non-iid.
        #[arg(long)]
        partition: Option<String>,
    },
    /// Print the itemized memory/operations budget of the configuration.
    Budget {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        table_log2: Option<u32>,
    },
    /// Write the built-in procedural scene to disk in dataset layout.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Train { common, .. }
            | Command::Render { common, .. }
            | Command::Eval { common, .. }
            | Command::Federate { common, .. }
            | Command::Sweep { common, .. }
            | Command::Partition { common, .. }
            | Command::Budget { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Render { .. } => "render",
            Command::Eval { .. } => "eval",
            Command::Federate { .. } => "federate",
            Command::Sweep { .. } => "sweep",
            Command::Partition { .. } => "partition",
            Command::Budget { .. } => "budget",
            Command::Synth { .. } => "synth",
        }
    }
}

/// Parse argv and execute; returns the process exit code (0 success,
/// 1 runtime failure, 2 usage/configuration error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match CliArgs::try_parse_from(argv) {
        Ok(args) => args,
        Err(e) => {
            // clap prints help/version through this path too.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(args.command) {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) | Err(e @ Error::Format { .. }) => {
            eprintln!("configuration error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Merge defaults <- config file <- --set pairs <- named flags.
fn build_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &common.config {
        config.load_file(path)?;
    }
    for pair in &common.sets {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    Ok(config)
}

fn out_dir(common: &CommonArgs, command: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

/// Load `--scene` or fall back to the built-in procedural scene.
fn load_or_synth(common: &CommonArgs, config: &RunConfig) -> Result<Scene> {
    match &common.scene {
        Some(root) => {
            eprintln!("scene: loading {} at {}px", root.display(), config.resolution);
            load_scene(root, config.resolution, config.channels)
        }
        None => {
            eprintln!("scene: built-in procedural ({}px)", config.resolution);
            Ok(synth::scene(&config.synth_config(), config.channels))
        }
    }
}

fn write_echo(dir: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.txt");
    std::fs::write(&path, config.echo()).map_err(|e| Error::io(&path, e))
}

fn split_frames(scene: &Scene, split: &str) -> Result<Vec<usize>> {
    match split {
        "train" => Ok(scene.train_frames()),
        "test" => Ok(scene.test_frames()),
        other => Err(Error::config(format!("unknown split {other:?} (expected train or test)"))),
    }
}

/// Load a checkpoint, substituting a conservative all-occupied grid when the
/// file carries none.
fn load_model(path: &Path, config: &RunConfig) -> Result<(FieldModel, OccupancyGrid)> {
    let (model, occupancy) = checkpoint::load_checkpoint(path)?;
    Ok((model, occupancy.unwrap_or_else(|| OccupancyGrid::new(config.occupancy_resolution))))
}

fn execute(command: Command) -> Result<()> {
    let common = command.common();
    let mut config = build_config(common)?;
    let dir = out_dir(common, command.name());

    match &command {
        Command::Train { steps, batch, table_log2, resolution, .. } => {
            if let Some(v) = steps {
                config.steps = *v;
            }
            if let Some(v) = batch {
                config.batch = *v;
            }
            if let Some(v) = table_log2 {
                config.table_log2 = *v;
            }
            if let Some(v) = resolution {
                config.resolution = *v;
            }
            write_echo(&dir, &config)?;
            print!("{}", config.echo());
            let scene = load_or_synth(common, &config)?;
            let train_config = config.train_config(Some(dir.clone()));
            let outcome = train(&scene, &scene.train_frames(), &train_config)?;
            let last = outcome.log.entries.last().map(|e| e.loss).unwrap_or(f64::NAN);
            println!("trained {} steps; final loss {last:.6e}; artifacts in {}", config.steps, dir.display());
        }

        Command::Render { checkpoint, frame, split, .. } => {
            let scene = load_or_synth(common, &config)?;
            let (model, occupancy) = load_model(checkpoint, &config)?;
            let frames = split_frames(&scene, split)?;
            let chosen: Vec<usize> = match frame {
                Some(f) => {
                    let &id = frames.get(*f).ok_or_else(|| {
                        Error::config(format!("frame {f} out of range for split {split:?}"))
                    })?;
                    vec![id]
                }
                None => frames,
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let background = config.train_config(None).background();
            for id in chosen {
                let cam = &scene.cameras[id];
                let (pixels, stats) = render_image(&model, &occupancy, cam, &background);
                let path = dir.join(format!("frame_{id:04}.png"));
                save_png(&path, &pixels, cam.width, cam.height, scene.channels)?;
                println!(
                    "wrote {} ({:.1} samples/pixel)",
                    path.display(),
                    stats.mean_samples_per_pixel
                );
            }
        }

        Command::Eval { checkpoint, split, .. } => {
            let scene = load_or_synth(common, &config)?;
            let (model, occupancy) = load_model(checkpoint, &config)?;
            let frames = split_frames(&scene, split)?;
            let subset = eval_subset(&frames, config.eval_frames);
            let background = config.train_config(None).background();
            write_echo(&dir, &config)?;
            let mut csv = String::from("frame,psnr,ssim\n");
            let (mut psnr_sum, mut ssim_sum) = (0.0f32, 0.0f32);
            for &id in &subset {
                let cam = &scene.cameras[id];
                let (pixels, _) = render_image(&model, &occupancy, cam, &background);
                let p = psnr(&pixels, &scene.images[id]);
                let s = ssim(&pixels, &scene.images[id], cam.width, cam.height, scene.channels)?;
                let _ = writeln!(csv, "{id},{p:.4},{s:.5}");
                psnr_sum += p;
                ssim_sum += s;
            }
            let n = subset.len() as f32;
            let _ = writeln!(csv, "mean,{:.4},{:.5}", psnr_sum / n, ssim_sum / n);
            let path = dir.join("eval.csv");
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            println!(
                "{} frames: mean PSNR {:.2} dB, mean SSIM {:.4} ({})",
                subset.len(),
                psnr_sum / n,
                ssim_sum / n,
                path.display()
            );
        }

        Command::Federate { clients, rounds, partition, payload, pretrain_steps, local_steps, .. } => {
            if let Some(v) = clients {
                config.clients = *v;
            }
            if let Some(v) = rounds {
                config.rounds = *v;
            }
            if let Some(v) = partition {
                config.set("partition", v)?;
            }
            if let Some(v) = payload {
                config.set("payload", v)?;
            }
            if let Some(v) = pretrain_steps {
                config.pretrain_steps = *v;
            }
            if let Some(v) = local_steps {
                config.local_steps = *v;
            }
            write_echo(&dir, &config)?;
            print!("{}", config.echo());
            let scene = load_or_synth(common, &config)?;
            let fed = config.federation_config();
            let payload_size = {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let probe = FieldModel::init(fed.train.grid, fed.train.channels, fed.train.precision, &mut rng);
                payload_bytes(&probe, fed.payload_mode, fed.train.occupancy_resolution)
            };
            println!(
                "payload {} bytes/client/round; round transfer {:.3} s at {} bit/s",
                payload_size,
                round_seconds(payload_size, fed.n_clients, fed.bandwidth_bps),
                fed.bandwidth_bps
            );
            let outcome = run_federation(&scene, &fed)?;
            outcome.write_report(&dir.join("federation.csv"))?;
            checkpoint::save_checkpoint(&dir.join("final.tdnf"), &outcome.model, Some(&outcome.occupancy))?;
            for r in &outcome.records {
                println!("round {:2}: test PSNR {:.2} dB (cumulative comm {:.2} s)", r.round, r.psnr, r.cumulative_seconds);
            }
        }

        Command::Sweep { batches, tables, steps, .. } => {
            write_echo(&dir, &config)?;
            let scene = load_or_synth(common, &config)?;
            let points: Vec<SweepPoint> = batches
                .iter()
                .flat_map(|&b| tables.iter().map(move |&t| SweepPoint { batch: b, table_log2: t }))
                .collect();
            let base = config.train_config(None);
            let eval_frames = eval_subset(&scene.test_frames(), config.eval_frames.max(1));
            let csv = dir.join("sweep.csv");
            let rows = sweep(
                &points,
                &scene,
                &base,
                steps.unwrap_or(config.steps),
                &eval_frames,
                Some(&csv),
            )?;
            for row in &rows {
                let mark = if row.point == SELECTED_POINT { "  <- selected" } else { "" };
                println!(
                    "B={:6} T=2^{:2}: {:7.2} MB, {:6.2} GOps/step, PSNR {:.2}, SSIM {:.4}{mark}",
                    row.point.batch,
                    row.point.table_log2,
                    row.report.total_bytes() as f64 / 1e6,
                    row.report.ops_per_step as f64 / 1e9,
                    row.psnr,
                    row.ssim
                );
            }
            println!("wrote {}", csv.display());
        }

        Command::Partition { clients, partition: mode, .. } => {
            if let Some(v) = clients {
                config.clients = *v;
            }
            if let Some(v) = mode {
                config.set("partition", v)?;
            }
            let scene = load_or_synth(common, &config)?;
            let plan = partition(&scene, config.clients, config.partition, config.seed)?;
            write_echo(&dir, &config)?;
            let mut text = format!("# mode={} clients={} seed={}\n", config.partition, config.clients, config.seed);
            for (frame, client) in plan.train_frames.iter().zip(&plan.assignments) {
                let _ = writeln!(text, "{frame} {client}");
            }
            let path = dir.join("partition.txt");
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            for c in 0..plan.n_clients() {
                println!("client {c}: {} frames", plan.client_frames(c).len());
            }
            println!("wrote {}", path.display());
        }

        Command::Budget { batch, table_log2, .. } => {
            if let Some(v) = batch {
                config.batch = *v;
            }
            if let Some(v) = table_log2 {
                config.table_log2 = *v;
            }
            let spec = match &common.scene {
                Some(_) => SceneSpec::of(&load_or_synth(common, &config)?),
                None => SceneSpec {
                    frames: config.synth_train,
                    width: config.resolution,
                    height: config.resolution,
                    channels: config.channels,
                },
            };
            let report = memory_footprint(&config.train_config(None), &spec);
            let mb = |b: u64| b as f64 / 1e6;
            println!("memory footprint (B={}, T=2^{}):", config.batch, config.table_log2);
            println!("  hash tables       {:10} bytes ({:.3} MB)", report.hash_bytes, mb(report.hash_bytes));
            println!("  mlp parameters    {:10} bytes ({:.3} MB)", report.mlp_bytes, mb(report.mlp_bytes));
            println!("  optimizer state   {:10} bytes ({:.3} MB)", report.optimizer_bytes, mb(report.optimizer_bytes));
            println!("  gradients         {:10} bytes ({:.3} MB)", report.gradient_bytes, mb(report.gradient_bytes));
            println!("  occupancy grid    {:10} bytes ({:.3} MB)", report.occupancy_bytes, mb(report.occupancy_bytes));
            println!("  activations       {:10} bytes ({:.3} MB)", report.activation_bytes, mb(report.activation_bytes));
            println!("  stored images     {:10} bytes ({:.3} MB)", report.image_bytes, mb(report.image_bytes));
            println!("  total             {:10} bytes ({:.3} MB)", report.total_bytes(), mb(report.total_bytes()));
            println!("  per-sample activations: {} bytes", report.activation_bytes_per_sample);
            println!("  per-step image working set: {} bytes", report.image_working_bytes);
            println!("  arithmetic: {:.3} GOps/step", report.ops_per_step as f64 / 1e9);
        }

        Command::Synth { resolution, .. } => {
            if let Some(v) = resolution {
                config.resolution = *v;
            }
            synth::write_scene(&dir, &config.synth_config())?;
            println!(
                "wrote {} train + {} test views at {}px under {}",
                config.synth_train,
                config.synth_test,
                config.resolution,
                dir.display()
            );
        }
    }
    Ok(())
}
