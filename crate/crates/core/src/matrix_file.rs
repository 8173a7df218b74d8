//! Flat little-endian matrix files used for spectrograms and feature tables.
//!
//! Layout: `SPEC` magic, `u32` rows, `u32` cols, `u32` kind, then
//! `rows × cols` `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPEC";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    Stft = 0,
    Mel = 1,
    Features = 2,
}

impl MatrixKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::Stft),
            1 => Some(Self::Mel),
            2 => Some(Self::Features),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub kind: MatrixKind,
    pub values: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, kind: MatrixKind, values: Vec<f32>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::Size(format!(
                "{rows}×{cols} matrix given {} values",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            kind,
            values,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Data(format!("matrix file: {detail}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing SPEC header".into()));
        }
        let word = |at: usize| {
            u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
        };
        let (rows, cols) = (word(4) as usize, word(8) as usize);
        let kind = MatrixKind::from_u32(word(12))
            .ok_or_else(|| bad(format!("unknown kind {}", word(12))))?;
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("dimensions overflow".into()))?;
        if bytes.len() - 16 != expected {
            return Err(bad(format!(
                "{rows}×{cols} needs {expected} payload bytes, found {}",
                bytes.len() - 16
            )));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            rows,
            cols,
            kind,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
