//! Scene loading, camera rays, and federated frame partitioning.
//!
//! Scenes follow the NeRF-synthetic layout: `transforms_train.json` /
//! `transforms_test.json` with a shared horizontal field of view and one
//! camera-to-world matrix per frame, plus 8-bit PNG images. On load, images
//! are alpha-composited onto white, box-downscaled to the working
//! resolution, and optionally converted to grayscale; camera positions are
//! remapped so the object sits inside the unit cube the field is defined on.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// World-to-field mapping `x' = x * WORLD_SCALE + WORLD_OFFSET`: source
/// scenes orbit the origin at a few world units; this places the object
/// inside [0,1]^3.
pub const WORLD_SCALE: f32 = 1.0 / 3.0;
pub const WORLD_OFFSET: f32 = 0.5;

/// BT.601 luminance weights for grayscale conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// A pinhole camera: square pixels, principal point at the image center.
#[derive(Debug, Clone)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f32,
    /// Camera-to-world transform; the camera looks along its local -z.
    pub pose: Matrix4<f32>,
}

impl Camera {
    pub fn rotation(&self) -> Matrix3<f32> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn position(&self) -> Vector3<f32> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

/// A ray clipped against the unit cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f32; 3],
    /// Unit length.
    pub direction: [f32; 3],
    /// Entry of the unit cube, clamped to 0; equals `t_far` on a miss.
    pub t_near: f32,
    pub t_far: f32,
}

/// Which split a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A calibrated multi-view scene. Frames are stored train-first.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    /// Per-frame pixels, `height * width * channels`, row-major, in [0,1].
    pub images: Vec<Vec<f32>>,
    pub channels: usize,
    pub split: Vec<Split>,
}

impl Scene {
    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == Split::Train).collect()
    }

    pub fn test_frames(&self) -> Vec<usize> {
        (0..self.split.len()).filter(|&i| self.split[i] == Split::Test).collect()
    }

    /// Pixel of `frame` at column `u`, row `v` (`channels` values).
    #[inline]
    pub fn pixel(&self, frame: usize, u: usize, v: usize) -> &[f32] {
        let cam = &self.cameras[frame];
        let idx = (v * cam.width + u) * self.channels;
        &self.images[frame][idx..idx + self.channels]
    }
}

/// On-disk transforms file (shared field of view plus per-frame poses).
#[derive(Debug, Serialize, Deserialize)]
pub struct TransformsFile {
    /// Horizontal field of view in radians.
    pub camera_angle_x: f64,
    pub frames: Vec<TransformsFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TransformsFrame {
    /// Image path relative to the scene root; `.png` appended if absent.
    pub file_path: String,
    /// 4x4 camera-to-world matrix, row-major nested arrays.
    pub transform_matrix: Vec<Vec<f64>>,
}

/// Load a scene from `root`, downscaling every image to
/// `target_resolution` x `target_resolution` and converting to `channels`
/// (3 = RGB, 1 = BT.601 grayscale).
pub fn load_scene(root: &Path, target_resolution: usize, channels: usize) -> Result<Scene> {
    assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
    assert!(target_resolution > 0, "target resolution must be positive");

    let mut scene = Scene {
        cameras: Vec::new(),
        images: Vec::new(),
        channels,
        split: Vec::new(),
    };
    for (name, split) in [("transforms_train.json", Split::Train), ("transforms_test.json", Split::Test)] {
        let path = root.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let file: TransformsFile =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let focal = (0.5 * target_resolution as f64 / (0.5 * file.camera_angle_x).tan()) as f32;

        for frame in &file.frames {
            let pose = parse_pose(&path, &frame.transform_matrix)?;
            let img_path = resolve_image_path(root, &frame.file_path);
            let pixels = load_image(&img_path, target_resolution, channels)?;
            scene.cameras.push(Camera {
                width: target_resolution,
                height: target_resolution,
                focal,
                pose,
            });
            scene.images.push(pixels);
            scene.split.push(split);
        }
    }
    Ok(scene)
}

/// Parse and validate one camera-to-world matrix, remapping the translation
/// into field coordinates.
fn parse_pose(path: &Path, rows: &[Vec<f64>]) -> Result<Matrix4<f32>> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(Error::format(path, "transform_matrix must be 4x4"));
    }
    let mut pose = Matrix4::identity();
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            pose[(i, j)] = v as f32;
        }
    }
    let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let gram = rot.transpose() * rot;
    if (gram - Matrix3::identity()).abs().max() > 1e-3 {
        return Err(Error::format(path, "rotation block is not orthonormal"));
    }
    for i in 0..3 {
        pose[(i, 3)] = pose[(i, 3)] * WORLD_SCALE + WORLD_OFFSET;
    }
    Ok(pose)
}

fn resolve_image_path(root: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.trim_start_matches("./");
    let mut path = root.join(rel);
    if path.extension().is_none() {
        path.set_extension("png");
    }
    path
}

/// Decode a PNG, composite alpha onto white, box-downscale to
/// `target` x `target`, and convert channels. The downscale factor must be
/// an exact integer.
fn load_image(path: &Path, target: usize, channels: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let decoded = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let rgba = decoded.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    if w % target != 0 || h % target != 0 {
        return Err(Error::format(
            path,
            format!("cannot box-downscale {w}x{h} to {target}x{target}: non-integer factor"),
        ));
    }

    // Composite onto a white background at full resolution.
    let mut rgb = vec![0.0f32; w * h * 3];
    for (i, px) in rgba.pixels().enumerate() {
        let a = px[3] as f32 / 255.0;
        for c in 0..3 {
            rgb[i * 3 + c] = a * (px[c] as f32 / 255.0) + (1.0 - a);
        }
    }

    let small = box_downscale(&rgb, w, h, target);
    Ok(match channels {
        3 => small,
        _ => small
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect(),
    })
}

/// Average `k x k` blocks (`k = w / target`); exact for integer factors.
fn box_downscale(rgb: &[f32], w: usize, h: usize, target: usize) -> Vec<f32> {
    let (kx, ky) = (w / target, h / target);
    let norm = 1.0 / (kx * ky) as f32;
    let mut out = vec![0.0f32; target * target * 3];
    for ty in 0..target {
        for tx in 0..target {
            let mut acc = [0.0f32; 3];
            for dy in 0..ky {
                for dx in 0..kx {
                    let src = ((ty * ky + dy) * w + tx * kx + dx) * 3;
                    for c in 0..3 {
                        acc[c] += rgb[src + c];
                    }
                }
            }
            let dst = (ty * target + tx) * 3;
            for c in 0..3 {
                out[dst + c] = acc[c] * norm;
            }
        }
    }
    out
}

/// Build the ray through pixel `(u, v)` (column, row), clipped against the
/// unit cube. Pixel centers sit at half-integer offsets; the camera looks
/// along -z with +x right and +y up in camera space.
pub fn generate_ray(camera: &Camera, u: usize, v: usize) -> Ray {
    assert!(u < camera.width && v < camera.height, "pixel out of range");
    let dir_cam = Vector3::new(
        (u as f32 + 0.5 - camera.width as f32 / 2.0) / camera.focal,
        -(v as f32 + 0.5 - camera.height as f32 / 2.0) / camera.focal,
        -1.0,
    );
    let dir = (camera.rotation() * dir_cam).normalize();
    let origin = camera.position();
    let (t_near, t_far) = intersect_unit_cube([origin.x, origin.y, origin.z], [dir.x, dir.y, dir.z]);
    Ray {
        origin: [origin.x, origin.y, origin.z],
        direction: [dir.x, dir.y, dir.z],
        t_near,
        t_far,
    }
}

/// Slab intersection with [0,1]^3. Returns `(t_near, t_far)` with `t_near`
/// clamped to 0; a miss (or a box entirely behind the origin) collapses to
/// `t_near == t_far == 0`.
pub fn intersect_unit_cube(origin: [f32; 3], direction: [f32; 3]) -> (f32, f32) {
    let mut t0 = 0.0f32;
    let mut t1 = f32::INFINITY;
    for a in 0..3 {
        let inv = 1.0 / direction[a];
        let ta = (0.0 - origin[a]) * inv;
        let tb = (1.0 - origin[a]) * inv;
        // f32 min/max drop a NaN operand (axis-parallel ray starting on a
        // face), which leaves that axis unconstrained -- the safe choice.
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t1 < t0 {
        (0.0, 0.0)
    } else {
        (t0, t1)
    }
}

/// How training frames are spread across federated clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Seeded shuffle dealt round-robin: every client sees all viewpoints.
    Iid,
    /// Contiguous azimuth sectors: every client sees one side of the scene.
    NonIid,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<PartitionMode> {
        match s {
            "iid" => Ok(PartitionMode::Iid),
            "non_iid" => Ok(PartitionMode::NonIid),
            other => Err(Error::config(format!("unknown partition mode {other:?} (iid|non_iid)"))),
        }
    }
}

impl std::fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PartitionMode::Iid => "iid",
            PartitionMode::NonIid => "non_iid",
        })
    }
}

/// Assignment of every training frame to one client.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    /// Training frame ids, parallel to `assignments`.
    pub train_frames: Vec<usize>,
    /// Client index per entry of `train_frames`.
    pub assignments: Vec<usize>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.assignments.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Frame ids owned by `client`, in assignment order.
    pub fn client_frames(&self, client: usize) -> Vec<usize> {
        self.train_frames
            .iter()
            .zip(&self.assignments)
            .filter(|&(_, &c)| c == client)
            .map(|(&f, _)| f)
            .collect()
    }
}

/// Split the training frames across `n_clients`. Client sizes differ by at
/// most one in either mode.
pub fn partition(scene: &Scene, n_clients: usize, mode: PartitionMode, seed: u64) -> Result<PartitionPlan> {
    assert!(n_clients >= 1, "need at least one client");
    let train = scene.train_frames();
    if n_clients > train.len() {
        return Err(Error::config(format!(
            "cannot split {} training frames across {n_clients} clients",
            train.len()
        )));
    }
    let (train_frames, assignments) = match mode {
        PartitionMode::Iid => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = train;
            shuffled.shuffle(&mut rng);
            let assignments = (0..shuffled.len()).map(|i| i % n_clients).collect();
            (shuffled, assignments)
        }
        PartitionMode::NonIid => {
            // Sort by azimuth of the camera position around the vertical
            // axis through the scene center, then cut contiguous sectors.
            let mut order: Vec<usize> = train.clone();
            let azimuth = |f: usize| {
                let p = scene.cameras[f].position();
                (p.y - WORLD_OFFSET).atan2(p.x - WORLD_OFFSET)
            };
            order.sort_by(|&a, &b| {
                azimuth(a).partial_cmp(&azimuth(b)).unwrap().then(a.cmp(&b))
            });
            let base = order.len() / n_clients;
            let extra = order.len() % n_clients;
            let mut assignments = Vec::with_capacity(order.len());
            for c in 0..n_clients {
                let size = base + (c < extra) as usize;
                assignments.extend(std::iter::repeat_n(c, size));
            }
            (order, assignments)
        }
    };
    Ok(PartitionPlan { mode, train_frames, assignments })
}

/// One minibatch of ground-truth pixels, struct-of-arrays.
#[derive(Debug, Default, Clone)]
pub struct PixelBatch {
    pub frames: Vec<usize>,
    pub us: Vec<usize>,
    pub vs: Vec<usize>,
    /// `len() * channels` ground-truth values.
    pub targets: Vec<f32>,
}

impl PixelBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
        self.us.clear();
        self.vs.clear();
        self.targets.clear();
    }
}

/// Draw `n_rays` random pixels from at most `img_per_step` distinct frames
/// of `frames` (the caller's partition), with replacement. Appends to `out`.
pub fn sample_training_pixels(
    scene: &Scene,
    rng: &mut impl Rng,
    n_rays: usize,
    img_per_step: usize,
    frames: &[usize],
    out: &mut PixelBatch,
) {
    assert!(!frames.is_empty(), "cannot sample from an empty frame set");
    assert!(img_per_step >= 1, "img_per_step must be at least 1");
    let distinct = img_per_step.min(frames.len());
    let chosen: Vec<usize> = rand::seq::index::sample(rng, frames.len(), distinct)
        .iter()
        .map(|i| frames[i])
        .collect();
    for _ in 0..n_rays {
        let frame = chosen[rng.random_range(0..chosen.len())];
        let cam = &scene.cameras[frame];
        let u = rng.random_range(0..cam.width);
        let v = rng.random_range(0..cam.height);
        out.frames.push(frame);
        out.us.push(u);
        out.vs.push(v);
        out.targets.extend_from_slice(scene.pixel(frame, u, v));
    }
}
