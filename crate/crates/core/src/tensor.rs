//! Small shared tensor plumbing: named parameter sets exchanged between the
//! trainer, checkpoint writer, and federated averaging, plus the half-precision
//! storage emulation helpers.

use std::collections::BTreeMap;

use half::f16;

/// Element types a serialized tensor can carry.
///
/// `Bits` packs one boolean per logical element, eight per byte, LSB first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    Bits,
}

impl Dtype {
    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F16 => 1,
            Dtype::Bits => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            2 => Some(Dtype::Bits),
            _ => None,
        }
    }

    /// Serialized payload size for `numel` logical elements.
    pub fn payload_len(self, numel: usize) -> usize {
        match self {
            Dtype::F32 => numel * 4,
            Dtype::F16 => numel * 2,
            Dtype::Bits => numel.div_ceil(8),
        }
    }
}

/// A dense tensor held at full precision, with the dtype it serializes as.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, dtype: Dtype, data: Vec<f32>) -> Tensor {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "tensor dims {:?} do not match data length {}",
            dims,
            data.len()
        );
        Tensor { dims, dtype, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bytes this tensor occupies when serialized at its dtype.
    pub fn payload_bytes(&self) -> usize {
        self.dtype.payload_len(self.numel())
    }
}

/// Ordered name → tensor map. `BTreeMap` keeps iteration deterministic.
pub type NamedTensors = BTreeMap<String, Tensor>;

/// Round a value through 16-bit storage (round-to-nearest-even).
#[inline]
pub fn f16_roundtrip(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

/// Quantize a slice in place through 16-bit storage.
pub fn quantize_f16_slice(xs: &mut [f32]) {
    for x in xs.iter_mut() {
        *x = f16_roundtrip(*x);
    }
}
