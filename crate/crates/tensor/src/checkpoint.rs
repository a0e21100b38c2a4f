//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `PPDT`, version `u32`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, rank `u8`, extents
//! `u32 × rank`, element code `u8` (0 = f32, 1 = f64), raw element data.

use std::fs;
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PPDT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type (exact when widening).
    pub fn to<E: Element>(&self) -> Tensor<E> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub trait IntoAny {
    fn into_any(self) -> AnyTensor;
}

impl IntoAny for Tensor<f32> {
    fn into_any(self) -> AnyTensor {
        AnyTensor::F32(self)
    }
}

impl IntoAny for Tensor<f64> {
    fn into_any(self) -> AnyTensor {
        AnyTensor::F64(self)
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: AnyTensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| TensorError::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| TensorError::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| TensorError::Format("rank exceeds 255".into()))?;
            out.push(rank);
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| TensorError::Format("extent exceeds u32".into()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.push(t.dtype() as u8);
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| TensorError::Format(format!("unknown element code {code}")))?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| TensorError::Format("size overflow".into()))?)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(&shape, raw.chunks_exact(4).map(f32::read_le).collect())?),
                DType::F64 => AnyTensor::F64(Tensor::new(&shape, raw.chunks_exact(8).map(f64::read_le).collect())?),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            TensorError::Format(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("blocks.0.w", Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2).into_any());
        ck.push("step", Tensor::<f64>::scalar(17.0).into_any());
        ck
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"PPDT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 10);
        assert_eq!(&bytes[14..24], b"blocks.0.w");
        assert_eq!(bytes[24], 2);
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[29..33].try_into().unwrap()), 3);
        assert_eq!(bytes[33], 0);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(TensorError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.encode().unwrap(), ck.encode().unwrap());
        match back.get("blocks.0.w").unwrap() {
            AnyTensor::F32(t) => assert_eq!(t.shape(), &[2, 3]),
            _ => panic!("dtype changed"),
        }
    }
}
