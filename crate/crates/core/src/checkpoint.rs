//! Checkpoint files: a flat table of named tensors.
//!
//! Layout, all little-endian: magic `TDNF`, `u32` format version, `u32`
//! tensor count, then per tensor: `u32` name length + UTF-8 name, `u8`
//! dtype code (0 = f32, 1 = f16, 2 = bitfield), `u32` rank, `u64` dims,
//! payload (f32: 4 bytes/element; f16: 2; bitfield: one bit per element,
//! LSB-first, zero-padded to a byte). Tensors are written sorted by name.
//!
//! Model scalars ride along as two small metadata tensors: `meta.config`
//! (grid shape, channels, precision) and `meta.occ` (EMA decay, opacity
//! threshold), so a checkpoint alone reconstructs the full state.

use std::path::Path;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::HashGridConfig;
use crate::field::{FieldModel, Precision};
use crate::occupancy::{pack_bits, OccupancyGrid};
use crate::tensor::{Dtype, NamedTensors, Tensor};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TDNF";
pub const VERSION: u32 = 1;

/// Serialize `tensors` to `path`, creating parent directories.
pub fn write_tensors(path: &Path, tensors: &NamedTensors) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(tensor.dtype.code());
        bytes.extend_from_slice(&(tensor.dims.len() as u32).to_le_bytes());
        for &d in &tensor.dims {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match tensor.dtype {
            Dtype::F32 => {
                for &v in &tensor.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F16 => {
                for &v in &tensor.data {
                    bytes.extend_from_slice(&f16::from_f32(v).to_le_bytes());
                }
            }
            Dtype::Bits => {
                let bits: Vec<bool> = tensor.data.iter().map(|&v| v != 0.0).collect();
                bytes.extend_from_slice(&pack_bits(&bits));
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte-stream reader with checkpoint-shaped error reporting.
struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.offset),
            ));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse a checkpoint written by [`write_tensors`].
pub fn read_tensors(path: &Path) -> Result<NamedTensors> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut r = Reader { bytes: &bytes, offset: 0, path };

    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic (not a checkpoint file)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version} (expected {VERSION})")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let code = r.take(1, "dtype")?[0];
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::format(path, format!("unknown dtype code {code} for {name:?}")))?;
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(dtype.payload_len(numel), &format!("payload of {name:?}"))?;
        let data: Vec<f32> = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F16 => payload
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
            Dtype::Bits => (0..numel).map(|i| (payload[i / 8] >> (i % 8) & 1) as f32).collect(),
        };
        tensors.insert(name, Tensor::new(dims, dtype, data));
    }
    if r.offset != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.offset)));
    }
    Ok(tensors)
}

const META_CONFIG: &str = "meta.config";
const META_OCC: &str = "meta.occ";

/// Model parameters plus the `meta.config` scalars needed to rebuild it.
pub fn model_to_tensors(model: &FieldModel) -> NamedTensors {
    let mut tensors = model.to_named();
    let g = &model.grid.config;
    let config = vec![
        g.levels as f32,
        g.features as f32,
        g.table_size_log2 as f32,
        g.base_resolution as f32,
        g.max_resolution as f32,
        model.channels as f32,
        match model.precision {
            Precision::Full32 => 0.0,
            Precision::Mixed16 => 1.0,
        },
    ];
    tensors.insert(META_CONFIG.into(), Tensor::new(vec![config.len()], Dtype::F32, config));
    tensors
}

/// Rebuild a model from [`model_to_tensors`] output.
pub fn model_from_tensors(path: &Path, tensors: &NamedTensors) -> Result<FieldModel> {
    let meta = tensors
        .get(META_CONFIG)
        .ok_or_else(|| Error::format(path, "missing meta.config tensor"))?;
    if meta.numel() != 7 {
        return Err(Error::format(path, "meta.config must hold 7 values"));
    }
    let v = &meta.data;
    let config = HashGridConfig {
        levels: v[0] as usize,
        features: v[1] as usize,
        table_size_log2: v[2] as u32,
        base_resolution: v[3] as u32,
        max_resolution: v[4] as u32,
    };
    let precision = match v[6] as u32 {
        0 => Precision::Full32,
        1 => Precision::Mixed16,
        other => return Err(Error::format(path, format!("unknown precision code {other}"))),
    };
    // Parameters are fully overwritten by load_named; the init RNG is moot.
    let mut model = FieldModel::init(config, v[5] as usize, precision, &mut ChaCha8Rng::seed_from_u64(0));
    model.load_named(tensors)?;
    Ok(model)
}

/// Append the occupancy grid as `occ.density_ema` (f16), `occ.bits`
/// (bitfield) and `meta.occ`.
pub fn occupancy_to_tensors(grid: &OccupancyGrid, tensors: &mut NamedTensors) {
    let r = grid.resolution;
    tensors.insert(
        "occ.density_ema".into(),
        Tensor::new(vec![r, r, r], Dtype::F16, grid.density_ema.clone()),
    );
    let bits: Vec<f32> = grid.occupied.iter().map(|&b| b as u32 as f32).collect();
    tensors.insert("occ.bits".into(), Tensor::new(vec![r, r, r], Dtype::Bits, bits));
    tensors.insert(
        META_OCC.into(),
        Tensor::new(vec![2], Dtype::F32, vec![grid.decay, grid.opacity_threshold]),
    );
}

/// Rebuild the occupancy grid if the checkpoint carries one.
pub fn occupancy_from_tensors(path: &Path, tensors: &NamedTensors) -> Result<Option<OccupancyGrid>> {
    let Some(ema) = tensors.get("occ.density_ema") else {
        return Ok(None);
    };
    if ema.dims.len() != 3 || ema.dims[0] != ema.dims[1] || ema.dims[1] != ema.dims[2] {
        return Err(Error::format(path, "occ.density_ema must be a cube"));
    }
    let meta = tensors
        .get(META_OCC)
        .ok_or_else(|| Error::format(path, "occ tensors present but meta.occ missing"))?;
    if meta.numel() != 2 {
        return Err(Error::format(path, "meta.occ must hold 2 values"));
    }
    let bits = tensors
        .get("occ.bits")
        .ok_or_else(|| Error::format(path, "occ tensors present but occ.bits missing"))?;
    let mut grid = OccupancyGrid::new(ema.dims[0]);
    if bits.numel() != grid.cell_count() {
        return Err(Error::format(path, "occ.bits size does not match the grid"));
    }
    grid.density_ema.copy_from_slice(&ema.data);
    for (bit, &v) in grid.occupied.iter_mut().zip(&bits.data) {
        *bit = v != 0.0;
    }
    grid.decay = meta.data[0];
    grid.opacity_threshold = meta.data[1];
    Ok(Some(grid))
}

/// Write model (and optionally occupancy) state to one checkpoint file.
pub fn save_checkpoint(path: &Path, model: &FieldModel, occupancy: Option<&OccupancyGrid>) -> Result<()> {
    let mut tensors = model_to_tensors(model);
    if let Some(grid) = occupancy {
        occupancy_to_tensors(grid, &mut tensors);
    }
    write_tensors(path, &tensors)
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(FieldModel, Option<OccupancyGrid>)> {
    let tensors = read_tensors(path)?;
    let model = model_from_tensors(path, &tensors)?;
    let occupancy = occupancy_from_tensors(path, &tensors)?;
    Ok((model, occupancy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::f16_roundtrip;
    use rand::Rng;

    fn sample_tensors() -> NamedTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = NamedTensors::new();
        let full: Vec<f32> = (0..24).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        t.insert("a.full".into(), Tensor::new(vec![4, 6], Dtype::F32, full));
        // f16 tensors must carry f16-representable values to round-trip.
        let half: Vec<f32> = (0..10).map(|_| f16_roundtrip(rng.random_range(-2.0f32..2.0))).collect();
        t.insert("b.half".into(), Tensor::new(vec![10], Dtype::F16, half));
        let bits: Vec<f32> = (0..19).map(|_| (rng.random::<f32>() < 0.5) as u32 as f32).collect();
        t.insert("c.bits".into(), Tensor::new(vec![19], Dtype::Bits, bits));
        t
    }

    #[test]
    fn tensor_table_roundtrips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.tdnf");
        let tensors = sample_tensors();
        write_tensors(&path, &tensors).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), tensors.len());
        for (name, t) in &tensors {
            let b = &back[name];
            assert_eq!(b.dims, t.dims, "{name}");
            assert_eq!(b.dtype, t.dtype, "{name}");
            assert_eq!(b.data, t.data, "{name}");
        }
    }

    #[test]
    fn file_layout_is_pinned() {
        // Freeze the byte format with a hand-assembled expectation.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.tdnf");
        let mut tensors = NamedTensors::new();
        tensors.insert("x".into(), Tensor::new(vec![2], Dtype::F32, vec![1.0, -2.0]));
        write_tensors(&path, &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"TDNF");
        expect.extend_from_slice(&1u32.to_le_bytes()); // version
        expect.extend_from_slice(&1u32.to_le_bytes()); // count
        expect.extend_from_slice(&1u32.to_le_bytes()); // name length
        expect.extend_from_slice(b"x");
        expect.push(0); // f32 dtype code
        expect.extend_from_slice(&1u32.to_le_bytes()); // rank
        expect.extend_from_slice(&2u64.to_le_bytes()); // dim
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn malformed_files_are_rejected_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tdnf");

        assert!(matches!(read_tensors(&path), Err(Error::MissingFile(_))));

        std::fs::write(&path, b"NOPE").unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TDNF");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        // Valid header claiming one tensor, then nothing.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TDNF");
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Unknown dtype code.
        let tensors = sample_tensors();
        write_tensors(&path, &tensors).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4 + 4 + 4 + 4 + "a.full".len()] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");

        // Trailing garbage.
        write_tensors(&path, &tensors).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    fn small_model(precision: Precision) -> FieldModel {
        let config = HashGridConfig {
            levels: 3,
            features: 2,
            table_size_log2: 5,
            base_resolution: 2,
            max_resolution: 8,
        };
        FieldModel::init(config, 3, precision, &mut ChaCha8Rng::seed_from_u64(7))
    }

    #[test]
    fn model_checkpoint_roundtrips_exactly() {
        for precision in [Precision::Full32, Precision::Mixed16] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.tdnf");
            let model = small_model(precision);
            save_checkpoint(&path, &model, None).unwrap();
            let (back, occ) = load_checkpoint(&path).unwrap();
            assert!(occ.is_none());
            assert_eq!(back.channels, model.channels);
            assert_eq!(back.precision, model.precision);
            assert_eq!(back.grid.config, model.grid.config);
            let mut originals: Vec<Vec<f32>> = Vec::new();
            model.visit_params(|_, _, data| originals.push(data.to_vec()));
            let mut i = 0;
            back.visit_params(|name, _, data| {
                assert_eq!(data, &originals[i][..], "{name} drifted through the checkpoint");
                i += 1;
            });
        }
    }

    #[test]
    fn occupancy_checkpoint_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.tdnf");
        let model = small_model(Precision::Mixed16);
        let mut grid = OccupancyGrid::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut grid.density_ema {
            *v = f16_roundtrip(rng.random_range(0.0f32..20.0));
        }
        grid.recompute_bits();
        save_checkpoint(&path, &model, Some(&grid)).unwrap();
        let (_, occ) = load_checkpoint(&path).unwrap();
        let occ = occ.expect("grid was saved");
        assert_eq!(occ.resolution, 8);
        assert_eq!(occ.density_ema, grid.density_ema);
        assert_eq!(occ.occupied, grid.occupied);
        assert_eq!(occ.decay, grid.decay);
        assert_eq!(occ.opacity_threshold, grid.opacity_threshold);
    }

    #[test]
    fn expected_tensor_names_are_present() {
        let model = small_model(Precision::Full32);
        let mut tensors = model_to_tensors(&model);
        occupancy_to_tensors(&OccupancyGrid::new(4), &mut tensors);
        for name in [
            "grid.level0",
            "grid.level2",
            "mlp.density.w0",
            "mlp.density.b1",
            "mlp.color.w2",
            "occ.density_ema",
            "occ.bits",
            "meta.config",
            "meta.occ",
        ] {
            assert!(tensors.contains_key(name), "missing {name}");
        }
    }
}
