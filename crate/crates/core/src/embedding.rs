//! Unit-norm embedding vectors, row matrices keyed by chunk id, exhaustive
//! top-k search and the `IVEM` matrix file format.

use std::cmp::Ordering;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NORM_TOLERANCE: f64 = 1e-9;
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T: Scalar = f64> {
    values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    /// Wraps values as-is. Entries must be finite and the vector non-empty.
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimMismatch { expected: 1, found: 0 });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("embedding entry {i}"),
            });
        }
        Ok(Self { values })
    }

    /// Scales `values` to unit Euclidean norm.
    pub fn normalized(values: Vec<T>) -> Result<Self> {
        let mut e = Self::new(values)?;
        let n = norm(&e.values);
        if n.to_f64_lossy() < ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        for v in &mut e.values {
            *v /= n;
        }
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn norm(&self) -> T {
        norm(&self.values)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm().to_f64_lossy() - 1.0).abs() <= NORM_TOLERANCE
    }

    pub fn cast<U: Scalar>(&self) -> Embedding<U> {
        Embedding {
            values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Row-major matrix of unit embeddings; row `i` belongs to chunk id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T: Scalar = f64> {
    dim: usize,
    data: Vec<T>,
    provider_tag: String,
    corpus_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub provider_tag: String,
    pub corpus_label: String,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn from_rows(
        rows: Vec<Embedding<T>>,
        provider_tag: impl Into<String>,
        corpus_label: impl Into<String>,
    ) -> Result<Self> {
        let dim = rows.first().map(Embedding::dim).ok_or(Error::EmptyCorpus)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.dim(),
                });
            }
            data.extend(row.into_vec());
        }
        Ok(Self {
            dim,
            data,
            provider_tag: provider_tag.into(),
            corpus_label: corpus_label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, chunk_id: usize) -> &[T] {
        &self.data[chunk_id * self.dim..(chunk_id + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn corpus_label(&self) -> &str {
        &self.corpus_label
    }

    /// Dot product of `query` with every row, in chunk id order.
    pub fn scores(&self, query: &[T]) -> Result<Vec<T>> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(self.rows().map(|r| dot(query, r)).collect())
    }

    pub fn map_rows(&self, f: impl Fn(usize, &[T]) -> Vec<T> + Sync) -> Self {
        use rayon::prelude::*;
        let rows: Vec<Vec<T>> = (0..self.len()).into_par_iter().map(|i| f(i, self.row(i))).collect();
        Self {
            dim: self.dim,
            data: rows.concat(),
            provider_tag: self.provider_tag.clone(),
            corpus_label: self.corpus_label.clone(),
        }
    }

    pub fn meta(&self) -> MatrixMeta {
        MatrixMeta {
            provider_tag: self.provider_tag.clone(),
            corpus_label: self.corpus_label.clone(),
        }
    }

    /// Writes the `IVEM` binary file and its JSON sidecar (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 8);
        buf.extend_from_slice(IVEM_MAGIC);
        buf.extend_from_slice(&IVEM_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        fs::write(path, buf)?;
        let mut side = fs::File::create(sidecar_path(path))?;
        serde_json::to_writer(&mut side, &self.meta())?;
        side.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..4] != IVEM_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != IVEM_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if dim == 0 || bytes.len() != 20 + n * dim * 8 {
            return Err(corrupt("length does not match header"));
        }
        let data = bytes[20..]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let meta: MatrixMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        Ok(Self {
            dim,
            data,
            provider_tag: meta.provider_tag,
            corpus_label: meta.corpus_label,
        })
    }
}

const IVEM_MAGIC: &[u8; 4] = b"IVEM";
const IVEM_VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Descending by score, ascending chunk id on ties.
pub(crate) fn rank_order<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// The `k` best `(index, score)` pairs of a dense score vector (all if `k >= n`).
pub fn top_k_scores<T: Scalar>(scores: &[T], k: usize) -> Vec<(usize, T)> {
    let mut ranked: Vec<(usize, T)> = scores.iter().copied().enumerate().collect();
    let k = k.min(ranked.len());
    if k < ranked.len() && k > 0 {
        ranked.select_nth_unstable_by(k - 1, rank_order);
        ranked.truncate(k);
    }
    ranked.sort_by(rank_order);
    ranked.truncate(k);
    ranked
}

/// Exact top-k by dot product over every row of `matrix`.
pub fn top_k<T: Scalar>(query: &Embedding<T>, matrix: &EmbeddingMatrix<T>, k: usize) -> Result<Vec<(usize, T)>> {
    if k == 0 {
        return Err(Error::EmptyCandidates);
    }
    if matrix.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(top_k_scores(&matrix.scores(query.as_slice())?, k))
}
