//! Procedural multi-view test scene.
//!
//! An analytic density/color field — a handful of smooth, compactly
//! supported blobs — rendered from an orbit of poses with the exact
//! marching and compositing the renderer uses. The result is a
//! self-consistent posed dataset for end-to-end runs and tests when no
//! captured scene is on disk; it can be written out in the standard
//! transforms-plus-PNGs layout and read back with [`crate::dataset::load_scene`].

use std::f32::consts::{PI, TAU};
use std::path::Path;

use nalgebra::{Matrix4, Vector3};

use crate::dataset::{generate_ray, Camera, Scene, Split, TransformsFile, TransformsFrame, LUMA, WORLD_OFFSET, WORLD_SCALE};
use crate::occupancy::OccupancyGrid;
use crate::renderer::{composite, march_ray, save_png, RenderResult, SampleBatch, MAX_SAMPLES_PER_RAY};
use crate::{Error, Result};

/// Shared horizontal field of view (radians), the stock synthetic value.
pub const CAMERA_ANGLE_X: f64 = 0.6911112;
/// Orbit radius in raw world units (maps well inside the far plane).
const ORBIT_RADIUS: f32 = 4.0;
/// Golden angle (radians) spreads azimuths evenly for any frame count.
const GOLDEN_ANGLE: f32 = PI * (3.0 - 2.236_068);
const GOLDEN_RATIO_FRAC: f32 = 0.618_034;

/// One smooth blob: quartic bump `a * (1 - (d/r)^2)^2` inside radius `r`,
/// identically zero outside, with a flat color.
struct Blob {
    center: [f32; 3],
    radius: f32,
    amplitude: f32,
    color: [f32; 3],
}

/// The scene content, in field coordinates (inside the unit cube).
const BLOBS: [Blob; 5] = [
    Blob { center: [0.50, 0.50, 0.42], radius: 0.20, amplitude: 90.0, color: [0.85, 0.25, 0.20] },
    Blob { center: [0.38, 0.60, 0.56], radius: 0.14, amplitude: 110.0, color: [0.20, 0.55, 0.90] },
    Blob { center: [0.63, 0.42, 0.58], radius: 0.12, amplitude: 100.0, color: [0.25, 0.80, 0.30] },
    Blob { center: [0.50, 0.43, 0.70], radius: 0.09, amplitude: 130.0, color: [0.95, 0.80, 0.25] },
    Blob { center: [0.50, 0.50, 0.30], radius: 0.24, amplitude: 70.0, color: [0.55, 0.55, 0.65] },
];

/// Scene shape: image resolution and split sizes.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub resolution: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { resolution: 160, n_train: 100, n_test: 200 }
    }
}

/// Density and RGB color of the analytic field at `p` (field coordinates).
/// Color is the density-weighted mix of blob colors; where density is zero
/// the color is immaterial and defaults to neutral gray.
pub fn analytic_field(p: [f32; 3]) -> (f32, [f32; 3]) {
    let mut density = 0.0f32;
    let mut color = [0.0f32; 3];
    for blob in &BLOBS {
        let d2: f32 = (0..3).map(|i| (p[i] - blob.center[i]).powi(2)).sum();
        let q2 = d2 / (blob.radius * blob.radius);
        if q2 < 1.0 {
            let sigma = blob.amplitude * (1.0 - q2) * (1.0 - q2);
            density += sigma;
            for c in 0..3 {
                color[c] += sigma * blob.color[c];
            }
        }
    }
    if density > 0.0 {
        for c in &mut color {
            *c /= density;
        }
        (density, color)
    } else {
        (0.0, [0.5, 0.5, 0.5])
    }
}

/// Occupancy superset of the blob supports: a cell is marked when its
/// center lies within `radius + half cell diagonal` of some blob. Because
/// the field is exactly zero outside every support, marching this grid
/// composites the same color as marching everything.
pub fn content_occupancy(resolution: usize) -> OccupancyGrid {
    let mut grid = OccupancyGrid::new(resolution);
    let half_diag = 3.0f32.sqrt() * 0.5 / resolution as f32;
    for z in 0..resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let center = [
                    (x as f32 + 0.5) / resolution as f32,
                    (y as f32 + 0.5) / resolution as f32,
                    (z as f32 + 0.5) / resolution as f32,
                ];
                let near_blob = BLOBS.iter().any(|b| {
                    let d2: f32 = (0..3).map(|i| (center[i] - b.center[i]).powi(2)).sum();
                    d2.sqrt() < b.radius + half_diag
                });
                let idx = grid.cell_index(center);
                grid.occupied[idx] = near_blob;
            }
        }
    }
    grid
}

/// Camera-to-world pose on the orbit sphere, looking at the raw-world
/// origin with +z up. Returns the raw (pre-normalization) pose.
fn orbit_pose_raw(azimuth: f32, elevation: f32) -> Matrix4<f32> {
    let eye = Vector3::new(
        ORBIT_RADIUS * elevation.cos() * azimuth.cos(),
        ORBIT_RADIUS * elevation.cos() * azimuth.sin(),
        ORBIT_RADIUS * elevation.sin(),
    );
    let back = eye.normalize();
    let right = Vector3::z().cross(&back).normalize();
    let up = back.cross(&right);
    let mut pose = Matrix4::identity();
    for (j, col) in [right, up, back].iter().enumerate() {
        for i in 0..3 {
            pose[(i, j)] = col[i];
        }
    }
    for i in 0..3 {
        pose[(i, 3)] = eye[i];
    }
    pose
}

/// Deterministic orbit angles for frame `i` of a split. Test views are
/// offset half a golden angle so the splits never coincide.
fn orbit_angles(i: usize, split: Split) -> (f32, f32) {
    let (shift, el_shift) = match split {
        Split::Train => (0.0, 0.0),
        Split::Test => (0.5, 0.381_966),
    };
    let azimuth = ((i as f32 + shift) * GOLDEN_ANGLE) % TAU;
    let elevation = (15.0 + 40.0 * ((i as f32 * GOLDEN_RATIO_FRAC + el_shift) % 1.0)) * PI / 180.0;
    (azimuth, elevation)
}

fn normalized_camera(resolution: usize, azimuth: f32, elevation: f32) -> Camera {
    let mut pose = orbit_pose_raw(azimuth, elevation);
    for i in 0..3 {
        pose[(i, 3)] = pose[(i, 3)] * WORLD_SCALE + WORLD_OFFSET;
    }
    Camera {
        width: resolution,
        height: resolution,
        focal: (0.5 * resolution as f64 / (0.5 * CAMERA_ANGLE_X).tan()) as f32,
        pose,
    }
}

/// Render the analytic field through `camera` onto a white background.
/// Uses the renderer's own marching and compositing so the images are
/// exactly reproducible by a field that matches the analytic one.
pub fn render_analytic(camera: &Camera, grid: &OccupancyGrid) -> Vec<f32> {
    let bg = [1.0f32; 3];
    let mut image = Vec::with_capacity(camera.width * camera.height * 3);
    let mut batch = SampleBatch::default();
    let mut sigma = Vec::new();
    let mut color = Vec::new();
    let mut result = RenderResult::default();
    for v in 0..camera.height {
        for u in 0..camera.width {
            batch.clear();
            sigma.clear();
            color.clear();
            let ray = generate_ray(camera, u, v);
            march_ray(&ray, grid, MAX_SAMPLES_PER_RAY, &mut batch);
            for s in 0..batch.len() {
                let p = [batch.positions[s * 3], batch.positions[s * 3 + 1], batch.positions[s * 3 + 2]];
                let (d, c) = analytic_field(p);
                sigma.push(d);
                color.extend_from_slice(&c);
            }
            composite(&batch, &sigma, &color, &bg, &mut result);
            image.extend_from_slice(&result.color);
        }
    }
    image
}

/// Build the scene in memory at `channels` (3 = RGB, 1 = BT.601 grayscale).
pub fn scene(config: &SynthConfig, channels: usize) -> Scene {
    assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
    let grid = content_occupancy(32);
    let mut out = Scene { cameras: Vec::new(), images: Vec::new(), channels, split: Vec::new() };
    for (split, count) in [(Split::Train, config.n_train), (Split::Test, config.n_test)] {
        for i in 0..count {
            let (az, el) = orbit_angles(i, split);
            let camera = normalized_camera(config.resolution, az, el);
            let rgb = render_analytic(&camera, &grid);
            let image = match channels {
                3 => rgb,
                _ => rgb
                    .chunks_exact(3)
                    .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                    .collect(),
            };
            out.cameras.push(camera);
            out.images.push(image);
            out.split.push(split);
        }
    }
    out
}

/// Write the scene to `root` in the standard layout: RGB PNGs under
/// `train/` and `test/`, poses in `transforms_train.json` /
/// `transforms_test.json` (raw-world translations, as a capture would have).
pub fn write_scene(root: &Path, config: &SynthConfig) -> Result<()> {
    let grid = content_occupancy(32);
    for (split, name, count) in [(Split::Train, "train", config.n_train), (Split::Test, "test", config.n_test)] {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut frames = Vec::with_capacity(count);
        for i in 0..count {
            let (az, el) = orbit_angles(i, split);
            let camera = normalized_camera(config.resolution, az, el);
            let image = render_analytic(&camera, &grid);
            let png = dir.join(format!("r_{i}.png"));
            save_png(&png, &image, config.resolution, config.resolution, 3)?;

            let raw = orbit_pose_raw(az, el);
            let matrix: Vec<Vec<f64>> =
                (0..4).map(|r| (0..4).map(|c| raw[(r, c)] as f64).collect()).collect();
            frames.push(TransformsFrame {
                file_path: format!("./{name}/r_{i}"),
                transform_matrix: matrix,
            });
        }
        let file = TransformsFile { camera_angle_x: CAMERA_ANGLE_X, frames };
        let path = root.join(format!("transforms_{name}.json"));
        let text = serde_json::to_string_pretty(&file).expect("plain data serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
