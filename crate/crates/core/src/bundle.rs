//! Model-bundle file: named parameter tensors plus the stain settings a
//! decoder needs, sealed with a trailing FNV-1a hash.
//!
//! ```text
//! "SQLM" | version u8 | codec u8 | quality u8
//! | normalization lo[3], hi[3] as f32 | stain matrix 9 × f32
//! | tensor count u32
//! | per tensor: name_len u16, UTF-8 name, dtype u8 (0 = f32), rank u8,
//!   extents u32 × rank, data f32 × product(extents)
//! | FNV-1a 64 over everything above, u64
//! ```
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::path::Path;

use sqlc_tensor::Tensor;

use crate::error::{BundleError, Error, Result};
use crate::stain::{NormRanges, StainMatrix};

pub const MAGIC: [u8; 4] = *b"SQLM";
pub const VERSION: u8 = 1;
/// Codec id of a bundle holding only stain-encoder weights.
pub const STAIN_ENCODER_CODEC: u8 = 0x10;
const DTYPE_F32: u8 = 0;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub codec: u8,
    pub quality: u8,
    pub ranges: NormRanges,
    pub stain_matrix: StainMatrix,
    tensors: Vec<(String, Tensor)>,
}

impl ModelBundle {
    pub fn new(codec: u8, quality: u8, ranges: NormRanges, stain_matrix: StainMatrix) -> Self {
        ModelBundle { codec, quality, ranges, stain_matrix: stain_matrix.quantized(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), BundleError> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(BundleError::DuplicateTensor(name));
        }
        if name.len() > u16::MAX as usize || tensor.shape().len() > u8::MAX as usize {
            return Err(BundleError::Malformed(format!("tensor {name} cannot be encoded")));
        }
        let mut t = tensor;
        t.set_requires_grad(false);
        t.clear_grad();
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, BundleError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| BundleError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    /// Bundle restricted to tensors whose names start with `prefix`.
    pub fn subset(&self, codec: u8, prefix: &str) -> Self {
        ModelBundle {
            codec,
            quality: self.quality,
            ranges: self.ranges,
            stain_matrix: self.stain_matrix,
            tensors: self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect(),
        }
    }

    pub fn expect_codec(&self, codec: u8) -> Result<(), BundleError> {
        if self.codec != codec {
            return Err(BundleError::WrongCodec { expected: codec, found: self.codec });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&[VERSION, self.codec, self.quality]);
        for v in self.ranges.lo.iter().chain(&self.ranges.hi) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.stain_matrix.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let h = fnv1a64(&out);
        out.extend_from_slice(&h.to_le_bytes());
        out
    }

    /// Hash that containers use to bind themselves to this model.
    pub fn hash(&self) -> u64 {
        let bytes = self.to_bytes();
        u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        if bytes.len() < 4 + 3 + 24 + 36 + 4 + 8 {
            return Err(BundleError::Truncated);
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(BundleError::BadMagic(magic));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(BundleError::HashMismatch { stored, computed });
        }
        if body[4] != VERSION {
            return Err(BundleError::BadVersion(body[4]));
        }
        let mut r = Reader { bytes: body, pos: 7 };
        let mut f3 = || -> Result<[f32; 3], BundleError> { Ok([r.f32()?, r.f32()?, r.f32()?]) };
        let lo = f3()?;
        let hi = f3()?;
        let ranges = NormRanges { lo, hi };
        ranges.validate().map_err(|e| BundleError::Malformed(e.to_string()))?;
        let stain_bytes: [u8; 36] = r.take(36)?.try_into().unwrap();
        let stain_matrix = StainMatrix::from_le_bytes(&stain_bytes).map_err(|e| BundleError::Malformed(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut bundle = ModelBundle { codec: body[5], quality: body[6], ranges, stain_matrix, tensors: Vec::new() };
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| BundleError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            if r.u8()? != DTYPE_F32 {
                return Err(BundleError::Malformed(format!("tensor {name}: unsupported dtype")));
            }
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(BundleError::Truncated)?;
            let raw = r.take(numel.checked_mul(4).ok_or(BundleError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if !seen.insert(name.clone()) {
                return Err(BundleError::DuplicateTensor(name));
            }
            let t = Tensor::new(shape, data).map_err(|e| BundleError::Malformed(e.to_string()))?;
            bundle.tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(BundleError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(BundleError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, BundleError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
