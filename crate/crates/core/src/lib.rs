//! Memory-frugal neural radiance field training and rendering.
//!
//! The crate implements a compact NeRF pipeline sized for devices with a few
//! hundred megabytes of memory: a multi-resolution hash encoding feeding two
//! small MLPs, an occupancy grid that lets the ray marcher skip empty space,
//! a tile-based trainer with gradient accumulation and an emulated
//! half-precision storage mode, a round-based federated training simulator
//! with communication accounting, and a memory/compute budget analyzer.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`dataset`] — scene loading (`transforms_*.json` + PNGs), cameras, rays,
//!   and client partitioning.
//! * [`synth`] — a procedural multi-view scene for self-contained runs.
//! * [`encoding`] — multi-resolution hash grid and spherical-harmonics
//!   direction encoding.
//! * [`field`] — the density/color MLPs and the full field forward/backward.
//! * [`occupancy`] — the density-EMA occupancy grid.
//! * [`renderer`] — ray marching and volumetric compositing (forward and
//!   backward), plus full-image rendering.
//! * [`trainer`] — Huber loss, Adam, tile packing, the training loop, and
//!   checkpoint I/O.
//! * [`federated`] — FedAvg simulation with payload/communication ledgers.
//! * [`budget`] — memory-footprint and ops-per-step accounting, and the
//!   batch/table-size sweep driver.
//! * [`metrics`] — PSNR and SSIM.
//! * [`cli`] — the `tdnf` command-line front end.

pub mod budget;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod encoding;
pub mod federated;
pub mod field;
pub mod metrics;
pub mod occupancy;
pub mod renderer;
pub mod synth;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
