//! Binary containers. Both formats are little-endian and fixed-layout:
//!
//! `LRST` (dense tensor): magic "LRST", format version u16, dtype tag u8
//! (0 = f32), dim count u8, extents as u32 each, raw f32 payload.
//!
//! `LRSD` (decomposed layer): magic "LRSD", format version u16, original
//! extents as 4×u32, rank u32, achieved epsilon f32, the four factor
//! matrices row-major f32 (a, b, c, d), sparse entry count u32, then sorted
//! (u32 linear index, f32 value) pairs.
//!
//! Values are copied bit-for-bit in both directions; round-trips are exact.

use std::fs;
use std::path::Path;

use crate::decomp::{CpFactors, DecomposedLayer, SparseTensor4};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor4};

pub const TENSOR_MAGIC: [u8; 4] = *b"LRST";
pub const LAYER_MAGIC: [u8; 4] = *b"LRSD";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn tensor_to_bytes(t: &Tensor4) -> Vec<u8> {
    let (i, j, k, l) = t.dims();
    let mut out = Vec::with_capacity(4 + 2 + 1 + 1 + 16 + 4 * t.numel());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(4);
    for d in [i, j, k, l] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor4> {
    let mut r = Reader::new(bytes);
    r.expect_magic(&TENSOR_MAGIC, "LRST")?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported LRST version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let ndims = r.u8()?;
    if ndims != 4 {
        return Err(Error::Format(format!(
            "expected 4 dims for a kernel tensor, got {ndims}"
        )));
    }
    let dims = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
    let numel = Tensor4::zeros(dims)?.numel();
    let data = r.f32_vec(numel)?;
    r.finish()?;
    Tensor4::new(dims, data)
}

pub fn layer_to_bytes(layer: &DecomposedLayer) -> Vec<u8> {
    let (i, j, k, l) = layer.original_dims();
    let f = layer.low_rank();
    let s = layer.sparse();
    let mut out = Vec::with_capacity(
        4 + 2 + 16 + 4 + 4 + 4 * (f.param_count() as usize) + 4 + 8 * s.nnz(),
    );
    out.extend_from_slice(&LAYER_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [i, j, k, l] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(f.rank() as u32).to_le_bytes());
    out.extend_from_slice(&layer.achieved_epsilon().to_le_bytes());
    for m in [f.a(), f.b(), f.c(), f.d()] {
        for &v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(s.nnz() as u32).to_le_bytes());
    for &(idx, v) in s.entries() {
        out.extend_from_slice(&idx.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn layer_from_bytes(bytes: &[u8]) -> Result<DecomposedLayer> {
    let mut r = Reader::new(bytes);
    r.expect_magic(&LAYER_MAGIC, "LRSD")?;
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported LRSD version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let dims = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(Error::Format("rank must be >= 1".into()));
    }
    let achieved = r.f32()?;
    let mut mats = Vec::with_capacity(4);
    for rows in [dims.0, dims.1, dims.2, dims.3] {
        let data = r.f32_vec(rows.checked_mul(rank).ok_or_else(|| {
            Error::Format(format!("factor size {rows}x{rank} overflows usize"))
        })?)?;
        mats.push(Matrix::new(rows, rank, data)?);
    }
    let d = mats.pop().expect("four factors");
    let c = mats.pop().expect("four factors");
    let b = mats.pop().expect("four factors");
    let a = mats.pop().expect("four factors");
    let factors = CpFactors::new(a, b, c, d)?;
    let nnz = r.u32()? as usize;
    let mut entries = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let idx = r.u32()?;
        let v = r.f32()?;
        entries.push((idx, v));
    }
    r.finish()?;
    let sparse = SparseTensor4::new(dims, entries)?;
    DecomposedLayer::from_parts(factors, sparse, achieved)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor4) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor4> {
    tensor_from_bytes(&fs::read(path)?)
}

pub fn write_layer(path: impl AsRef<Path>, layer: &DecomposedLayer) -> Result<()> {
    fs::write(path, layer_to_bytes(layer))?;
    Ok(())
}

pub fn read_layer(path: impl AsRef<Path>) -> Result<DecomposedLayer> {
    layer_from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated container: needed {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))),
        }
    }

    fn expect_magic(&mut self, magic: &[u8; 4], name: &str) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {got:02x?}, expected {name}"
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dim(&mut self) -> Result<usize> {
        let d = self.u32()?;
        if d == 0 {
            return Err(Error::Format("zero extent in container header".into()));
        }
        Ok(d as usize)
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("payload of {n} f32 values overflows usize"))
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
