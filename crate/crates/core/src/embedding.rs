//! Embedding vectors, embedding sets and the EMB1 binary container.
//!
//! EMB1 layout (little-endian throughout):
//!
//! | bytes   | content                          |
//! |---------|----------------------------------|
//! | 0..4    | ASCII magic `EMB1`               |
//! | 4..8    | `u32` version, must be 1         |
//! | 8..12   | `u32` vector count               |
//! | 12..16  | `u32` dimension                  |
//! | 16..    | `count * dim` `f32`, vector-major |
//!
//! Matrix-shaped embeddings are stored flattened row-major; see
//! [`EmbeddingVector::from_matrix`].

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: header declares {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },
    #[error("zero vector at index {index}")]
    ZeroVector { index: usize },
    #[error("non-finite coordinate {coordinate} in vector at index {index}")]
    NonFinite { index: usize, coordinate: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding vector must have at least one coordinate")]
    EmptyVector,
    #[error("embedding set '{0}' is empty")]
    EmptySet(String),
}

/// A single policy embedding. Always finite, nonzero and of positive dimension.
///
/// The Euclidean norm is computed once, in `f64`, at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        Self::validated(values, 0)
    }

    /// Flattens a row-major `rows x cols` matrix embedding.
    pub fn from_matrix(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, EmbeddingError> {
        let expected = rows.saturating_mul(cols);
        if values.len() != expected {
            return Err(EmbeddingError::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        Self::new(values)
    }

    fn validated(values: Vec<f32>, index: usize) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::EmptyVector);
        }
        if let Some(coordinate) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index, coordinate });
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::ZeroVector { index });
        }
        Ok(Self { values, norm })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    // independent lanes so the loop vectorizes
    const LANES: usize = 8;
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    let mut acc = [0.0f64; LANES];
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += f64::from(x[i]) * f64::from(y[i]);
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Cosine distance from cached norms; callers guarantee equal dimensions.
#[inline]
pub(crate) fn cosine_distance_unchecked(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    let similarity = dot(&a.values, &b.values) / (a.norm * b.norm);
    (1.0 - similarity).clamp(0.0, 2.0)
}

/// `1 - a.b / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(cosine_distance_unchecked(a, b))
}

/// A labelled, non-empty collection of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    label: String,
    dim: usize,
    vectors: Vec<EmbeddingVector>,
}

impl EmbeddingSet {
    pub fn new(label: impl Into<String>, vectors: Vec<EmbeddingVector>) -> Result<Self, EmbeddingError> {
        let label = label.into();
        let Some(first) = vectors.first() else {
            return Err(EmbeddingError::EmptySet(label));
        };
        let dim = first.dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(EmbeddingError::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        Ok(Self { label, dim, vectors })
    }

    /// Builds a set from raw rows, validating each with its index.
    pub fn from_rows(label: impl Into<String>, rows: Vec<Vec<f32>>) -> Result<Self, EmbeddingError> {
        let vectors = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| EmbeddingVector::validated(row, i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(label, vectors)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EmbeddingVector> {
        self.vectors.iter()
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// New set holding the vectors at `indices`, in that order.
    pub fn select(&self, label: impl Into<String>, indices: &[usize]) -> Result<Self, EmbeddingError> {
        let vectors = indices.iter().map(|&i| self.vectors[i].clone()).collect();
        Self::new(label, vectors)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<(), EmbeddingError> {
        let count =
            u32::try_from(self.len()).map_err(|_| EmbeddingError::MalformedHeader("count exceeds u32".into()))?;
        let dim = u32::try_from(self.dim).map_err(|_| EmbeddingError::MalformedHeader("dim exceeds u32".into()))?;
        writer.write_all(MAGIC)?;
        writer.write_all(&VERSION.to_le_bytes())?;
        writer.write_all(&count.to_le_bytes())?;
        writer.write_all(&dim.to_le_bytes())?;
        for v in &self.vectors {
            for x in &v.values {
                writer.write_all(&x.to_le_bytes())?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut reader: R, label: impl Into<String>) -> Result<Self, EmbeddingError> {
        let mut header = [0u8; HEADER_LEN];
        reader.read_exact(&mut header).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => EmbeddingError::MalformedHeader("truncated header".into()),
            _ => EmbeddingError::Io(e),
        })?;
        if &header[0..4] != MAGIC {
            return Err(EmbeddingError::MalformedHeader(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&header[0..4])
            )));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(EmbeddingError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        if dim == 0 {
            return Err(EmbeddingError::MalformedHeader("dim must be positive".into()));
        }
        let label = label.into();
        if count == 0 {
            return Err(EmbeddingError::EmptySet(label));
        }
        let expected = (count as u64) * (dim as u64) * 4;

        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        if payload.len() as u64 != expected {
            return Err(EmbeddingError::PayloadLength {
                expected,
                actual: payload.len() as u64,
            });
        }

        let vectors = payload
            .chunks_exact(dim * 4)
            .enumerate()
            .map(|(i, chunk)| {
                let values = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                EmbeddingVector::validated(values, i)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(label, vectors)
    }
}

impl<'a> IntoIterator for &'a EmbeddingSet {
    type Item = &'a EmbeddingVector;
    type IntoIter = std::slice::Iter<'a, EmbeddingVector>;

    fn into_iter(self) -> Self::IntoIter {
        self.vectors.iter()
    }
}

/// Loads an EMB1 file and labels the resulting set `expected_label`.
pub fn load_embedding_set(path: impl AsRef<Path>, expected_label: &str) -> Result<EmbeddingSet, EmbeddingError> {
    let file = File::open(path)?;
    EmbeddingSet::read_from(BufReader::new(file), expected_label)
}

pub fn save_embedding_set(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<(), EmbeddingError> {
    let file = File::create(path)?;
    set.write_to(BufWriter::new(file))
}
