//! Embedding matrices, per-example score arrays and their on-disk formats.
//!
//! Two binary formats are supported, both little-endian:
//!
//! * `EMB1` embeddings: magic `EMB1`, u64 row count, u32 dim, one dtype byte
//!   (0x01 = f32), then `rows * dim` f32 values row-major.
//! * `SCR1` scores: magic `SCR1`, u64 row count, then `rows` f32 values.
//!
//! Values are stored as f32; every reduction over them (norms, means, dot
//! products) accumulates in f64.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{format_err, io_err, Error, Result};
use crate::mask::SelectionMask;
use crate::vecmath;

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const SCORE_MAGIC: [u8; 4] = *b"SCR1";
const DTYPE_F32: u8 = 0x01;
const EMB_HEADER_LEN: usize = 17;
const SCORE_HEADER_LEN: usize = 12;

/// Dense row-major matrix of example embeddings.
///
/// Invariants: at least one row and one column, all entries finite, and when
/// `normalized` is set every row has Euclidean norm within 1e-5 of 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row-major data. The result is marked
    /// unnormalized regardless of the actual row norms.
    pub fn from_vec(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Data(format!(
                "matrix must have at least one row and one column, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::Data(format!(
                "matrix payload has {} values, expected {rows}x{dim} = {}",
                data.len(),
                rows * dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {} col {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Self {
            rows,
            dim,
            data,
            normalized: false,
        })
    }

    /// Internal constructor for rows that are unit-norm by construction.
    pub(crate) fn from_unit_rows(rows: usize, dim: usize, data: Vec<f32>) -> Self {
        debug_assert!(data
            .chunks_exact(dim)
            .all(|r| (vecmath::norm(r) - 1.0).abs() < 1e-5));
        Self {
            rows,
            dim,
            data,
            normalized: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Scales every row to unit Euclidean norm. Rows are independent, so the
    /// pass runs in parallel. A zero-norm row is a hard error: it has no
    /// direction on the sphere.
    pub fn normalize_rows(mut self) -> Result<Self> {
        let dim = self.dim;
        self.data
            .par_chunks_mut(dim)
            .enumerate()
            .try_for_each(|(i, row)| {
                let norm = vecmath::norm(row);
                if norm == 0.0 {
                    return Err(Error::Data(format!("row {i} has zero norm")));
                }
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
                Ok(())
            })?;
        self.normalized = true;
        Ok(self)
    }

    /// Returns the rows selected by `mask`, order preserved.
    pub fn subset(&self, mask: &SelectionMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Invalid(
                "subset mask is empty; every stage requires at least one example".into(),
            ));
        }
        let mut data = Vec::with_capacity(mask.len() * self.dim);
        for &id in mask.ids() {
            if id >= self.rows {
                return Err(Error::Invalid(format!(
                    "mask id {id} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(id));
        }
        Ok(Self {
            rows: mask.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        })
    }
}

/// Per-example match scores companion to an [`EmbeddingMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArray {
    scores: Vec<f32>,
}

impl ScoreArray {
    pub fn from_vec(scores: Vec<f32>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|v| v.is_nan()) {
            return Err(Error::Data(format!("NaN score at row {i}")));
        }
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.scores
    }

    pub fn subset(&self, mask: &SelectionMask) -> Result<Self> {
        let mut scores = Vec::with_capacity(mask.len());
        for &id in mask.ids() {
            if id >= self.scores.len() {
                return Err(Error::Invalid(format!(
                    "mask id {id} out of range for {} scores",
                    self.scores.len()
                )));
            }
            scores.push(self.scores[id]);
        }
        Ok(Self { scores })
    }
}

/// Reads an `EMB1` file. The returned matrix is marked unnormalized.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < EMB_HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!(
                "truncated header: need {EMB_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes[0..4] != EMB_MAGIC {
        return Err(format_err(
            path,
            0,
            format!(
                "bad magic {:?}, expected \"EMB1\"",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if rows == 0 {
        return Err(format_err(path, 4, "row count is zero"));
    }
    if dim == 0 {
        return Err(format_err(path, 12, "dim is zero"));
    }
    if bytes[16] != DTYPE_F32 {
        return Err(format_err(
            path,
            16,
            format!(
                "unsupported dtype code {:#04x}, expected 0x01 (f32)",
                bytes[16]
            ),
        ));
    }
    let values = rows
        .checked_mul(dim as u64)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| format_err(path, 4, "rows * dim overflows"))?;
    let payload = &bytes[EMB_HEADER_LEN..];
    if (payload.len() as u64) < values {
        return Err(format_err(
            path,
            (EMB_HEADER_LEN + payload.len()) as u64,
            format!(
                "truncated payload: expected {values} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if (payload.len() as u64) > values {
        return Err(format_err(
            path,
            EMB_HEADER_LEN as u64 + values,
            format!(
                "trailing data: expected {values} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity((rows * dim as u64) as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                path,
                (EMB_HEADER_LEN + i * 4) as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v);
    }
    EmbeddingMatrix::from_vec(rows as usize, dim as usize, data)
}

/// Writes an `EMB1` file; `load_embeddings` reproduces the matrix bitwise.
pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| io_err(path, e));
    emit(&EMB_MAGIC)?;
    emit(&(m.rows as u64).to_le_bytes())?;
    emit(&(m.dim as u32).to_le_bytes())?;
    emit(&[DTYPE_F32])?;
    for v in &m.data {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads an `SCR1` file.
pub fn load_scores(path: &Path) -> Result<ScoreArray> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < SCORE_HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!(
                "truncated header: need {SCORE_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes[0..4] != SCORE_MAGIC {
        return Err(format_err(
            path,
            0,
            format!(
                "bad magic {:?}, expected \"SCR1\"",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let payload = &bytes[SCORE_HEADER_LEN..];
    let expected = rows
        .checked_mul(4)
        .ok_or_else(|| format_err(path, 4, "row count overflows"))?;
    if (payload.len() as u64) < expected {
        return Err(format_err(
            path,
            (SCORE_HEADER_LEN + payload.len()) as u64,
            format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    if (payload.len() as u64) > expected {
        return Err(format_err(
            path,
            SCORE_HEADER_LEN as u64 + expected,
            format!(
                "trailing data: expected {expected} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut scores = Vec::with_capacity(rows as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if v.is_nan() {
            return Err(format_err(
                path,
                (SCORE_HEADER_LEN + i * 4) as u64,
                "NaN score",
            ));
        }
        scores.push(v);
    }
    Ok(ScoreArray { scores })
}

pub fn write_scores(path: &Path, s: &ScoreArray) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| io_err(path, e));
    emit(&SCORE_MAGIC)?;
    emit(&(s.scores.len() as u64).to_le_bytes())?;
    for v in &s.scores {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
