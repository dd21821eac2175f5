//! Versioned binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SFMW0001"
//! count    u32      number of layers
//! layer*   u32 rows, u32 cols, rows*cols f64 (row-major)
//! crc      u32      CRC-32 of the concatenated f64 payloads
//! ```
//!
//! Each layer is stored as the augmented matrix `[W | b]` of shape
//! `(out, in + 1)`, so one matrix fully describes one dense layer.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Activation, Dense, Matrix, MlpParams, Scalar};

pub const MAGIC: &[u8; 8] = b"SFMW0001";

pub fn encode<T: Scalar>(params: &MlpParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.layers().len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for layer in params.layers() {
        let rows = layer.out_width();
        let cols = layer.in_width() + 1;
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        for r in 0..rows {
            let bias = layer.bias.as_slice()[r];
            for &v in layer.weight.row(r).iter().chain(std::iter::once(&bias)) {
                let bytes = v.to_f64_lossy().to_le_bytes();
                crc.update(&bytes);
                out.extend_from_slice(&bytes);
            }
        }
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8], activation: Activation) -> Result<MlpParams<T>> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let count = rd.u32()? as usize;
    if count == 0 {
        return Err(Error::Format("zero layers".into()));
    }
    let mut crc = crc32fast::Hasher::new();
    let mut layers = Vec::with_capacity(count);
    for k in 0..count {
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        if rows == 0 || cols < 2 {
            return Err(Error::Format(format!("layer {k} has shape {rows}x{cols}")));
        }
        let payload = rd.take(rows * cols * 8)?;
        crc.update(payload);
        let vals: Vec<T> = payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let aug = Matrix::from_vec(rows, cols, vals)?;
        let weight = aug.slice_cols(0, cols - 1);
        let bias = aug.slice_cols(cols - 1, cols).transpose();
        layers.push(Dense::new(weight, bias)?);
    }
    let stored = rd.u32()?;
    if rd.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    let computed = crc.finalize();
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    MlpParams::from_layers(layers, activation)
        .map_err(|e| Error::Format(format!("inconsistent layers: {e}")))
}

pub fn save<T: Scalar>(params: &MlpParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path, activation: Activation) -> Result<MlpParams<T>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, activation)
}
