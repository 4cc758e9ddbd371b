//! The "ADST1" little-endian binary container.
//!
//! Matrix files (audio features, displacement and pose sequences):
//!
//! ```text
//! "ADST1" | version: u32 = 1 | n_frames: u64 | dim: u64 | n_frames * dim f32
//! ```
//!
//! Checkpoints reuse the magic with version 2 and hold named weight blocks:
//!
//! ```text
//! "ADST1" | version: u32 = 2 | n_blocks: u64
//! per block: name_len: u32 | name (utf-8) | ndim: u32 | dims: u64 * ndim | f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ADST1";
pub const MATRIX_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 2;

/// A dense row-major `n_frames × dim` matrix of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub n_frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_frames * dim {
            return Err(Error::invalid(format!(
                "payload has {} values, expected {n_frames} x {dim}",
                data.len()
            )));
        }
        Ok(Self { n_frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("rows have inconsistent lengths"));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(rows.len(), dim, data)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_frames)
            .map(|i| self.row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }
}

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_matrix(path: &Path, m: &FrameMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(25 + m.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.n_frames as u64).to_le_bytes());
    buf.extend_from_slice(&(m.dim as u64).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<FrameMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic_and_version(MATRIX_VERSION)?;
    let n_frames = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let count = n_frames
        .checked_mul(dim)
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let data = r.f32s(count)?;
    r.finish()?;
    Ok(FrameMatrix { n_frames, dim, data })
}

pub fn write_checkpoint(path: &Path, blocks: &[WeightBlock]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(blocks.len() as u64).to_le_bytes()).map_err(io)?;
    for b in blocks {
        if b.shape.iter().product::<usize>() != b.data.len() {
            return Err(Error::invalid(format!("block {} has inconsistent shape", b.name)));
        }
        w.write_all(&(b.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(b.name.as_bytes()).map_err(io)?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for d in &b.shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in &b.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<WeightBlock>> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path);
    r.magic_and_version(CHECKPOINT_VERSION)?;
    let n_blocks = r.u64()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(4096));
    for _ in 0..n_blocks {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "block name is not utf-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product();
        let data = r.f32s(count)?;
        blocks.push(WeightBlock { name, shape, data });
    }
    r.finish()?;
    Ok(blocks)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let n = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.path, "payload size overflows"))?;
        Ok(self
            .bytes(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic_and_version(&mut self, expected: u32) -> Result<()> {
        if self.bytes(5)? != MAGIC {
            return Err(Error::format(self.path, "missing ADST1 magic"));
        }
        let version = self.u32()?;
        if version != expected {
            return Err(Error::format(
                self.path,
                format!("unsupported container version {version} (expected {expected})"),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes after payload"));
        }
        Ok(())
    }
}
