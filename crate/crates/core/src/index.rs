//! Brute-force fact index: one unit-normalized embedding per fact.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "TKGQAIDX"
//! version u32      1
//! rows    u64
//! dim     u32
//! fp_len  u32
//! fp      fp_len bytes of UTF-8 embedder fingerprint
//! data    rows * dim f32, row-major
//! ```

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::embed::{normalize, EmbedError, Embedder};
use crate::store::{FactId, Quadruple, TkgStore};

const MAGIC: &[u8; 8] = b"TKGQAIDX";
const VERSION: u32 = 1;
const BATCH_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown fact id {0}")]
    UnknownFactId(FactId),
    #[error("index fingerprint {found:?} does not match configured embedder {expected:?}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// `"{head} {relation} {tail} on {timestamp}"` with underscores in names
/// replaced by spaces. The timestamp is kept exactly as ingested.
pub fn verbalize_fact(q: &Quadruple, store: &TkgStore) -> String {
    format!(
        "{} {} {} on {}",
        store.entity_name(q.head).replace('_', " "),
        store.relation_name(q.relation).replace('_', " "),
        store.entity_name(q.tail).replace('_', " "),
        store.timestamp_text(q.fact_id)
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactIndex {
    dimension: usize,
    fingerprint: String,
    data: Vec<f32>,
}

impl FactIndex {
    /// Wraps pre-computed rows. Each row is re-normalized.
    pub fn from_rows(dimension: usize, fingerprint: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self, IndexError> {
        let mut data = Vec::with_capacity(rows.len() * dimension);
        for row in rows {
            if row.len() != dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: dimension,
                    got: row.len(),
                });
            }
            data.extend(normalize(row)?);
        }
        Ok(Self {
            dimension,
            fingerprint: fingerprint.into(),
            data,
        })
    }

    /// Embeds every fact's verbalization in `batch_size` chunks. A failing
    /// batch is retried up to three attempts while the error is transient.
    pub fn build(store: &TkgStore, embedder: &dyn Embedder, batch_size: usize) -> Result<Self, IndexError> {
        let batch_size = batch_size.max(1);
        let dimension = embedder.dimension();
        let texts: Vec<String> = store.facts().iter().map(|q| verbalize_fact(q, store)).collect();
        let mut data = Vec::with_capacity(texts.len() * dimension);
        for chunk in texts.chunks(batch_size) {
            let vectors = embed_with_retry(embedder, chunk)?;
            if vectors.len() != chunk.len() {
                return Err(EmbedError::CountMismatch {
                    expected: chunk.len(),
                    got: vectors.len(),
                }
                .into());
            }
            for v in vectors {
                if v.len() != dimension {
                    return Err(IndexError::DimensionMismatch {
                        expected: dimension,
                        got: v.len(),
                    });
                }
                data.extend(normalize(&v)?);
            }
        }
        Ok(Self {
            dimension,
            fingerprint: embedder.fingerprint(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dimension).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row(&self, id: FactId) -> Option<&[f32]> {
        let start = id as usize * self.dimension;
        self.data.get(start..start + self.dimension)
    }

    /// Cosine score (dot product of unit vectors) for every candidate, in
    /// candidate order.
    pub fn score(&self, query: &[f32], candidates: &[FactId]) -> Result<Vec<(FactId, f64)>, IndexError> {
        if query.len() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                got: query.len(),
            });
        }
        candidates
            .iter()
            .map(|&id| {
                let row = self.row(id).ok_or(IndexError::UnknownFactId(id))?;
                Ok((id, dot(query, row)))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        let fp = self.fingerprint.as_bytes();
        w.write_all(&(fp.len() as u32).to_le_bytes())?;
        w.write_all(fp)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads an index, refusing a fingerprint other than `expected` unless
    /// `force` is set (in which case a warning is logged).
    pub fn load(path: &Path, expected: &str, force: bool) -> Result<Self, IndexError> {
        let index = Self::read_from(&mut io::BufReader::new(fs::File::open(path)?))?;
        if index.fingerprint != expected {
            if !force {
                return Err(IndexError::FingerprintMismatch {
                    expected: expected.to_string(),
                    found: index.fingerprint,
                });
            }
            warn!(
                "loading index built with {:?} under embedder {:?}",
                index.fingerprint, expected
            );
        }
        Ok(index)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(IndexError::Corrupt(format!("unsupported version {version}")));
        }
        let mut rows = [0u8; 8];
        r.read_exact(&mut rows)?;
        let rows = u64::from_le_bytes(rows) as usize;
        let dimension = read_u32(r)? as usize;
        let fp_len = read_u32(r)? as usize;
        let mut fp = vec![0u8; fp_len];
        r.read_exact(&mut fp)?;
        let fingerprint = String::from_utf8(fp).map_err(|_| IndexError::Corrupt("fingerprint not utf-8".into()))?;
        let count = rows
            .checked_mul(dimension)
            .ok_or_else(|| IndexError::Corrupt("size overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(IndexError::Corrupt(format!(
                "expected {} data bytes, found {}",
                count * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            dimension,
            fingerprint,
            data,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Dot product with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn embed_with_retry(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
    let mut attempt = 1;
    loop {
        match embedder.embed_batch(texts) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_transient() && attempt < BATCH_ATTEMPTS => {
                warn!("embedding batch failed (attempt {attempt}): {e}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
