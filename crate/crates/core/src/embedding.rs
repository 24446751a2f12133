//! Item embeddings: pooling token vectors, file ingestion, a deterministic
//! hash-based stand-in embedder, cosine similarity and exhaustive top-k retrieval.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Catalog, ItemRecord};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::rank;
use crate::scalar::{dot, norm, Scalar};

pub const MIN_DIM: usize = 2;
pub const MAX_DIM: usize = 4096;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Elementwise mean over token vectors.
    #[default]
    Average,
    /// First token vector, the stand-in for CLS pooling.
    First,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingSequence<T> {
    pub item_id: String,
    pub vectors: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbedding<T> {
    pub item_id: String,
    pub vector: Vec<T>,
    pub normalized: bool,
}

impl<T: Scalar> ItemEmbedding<T> {
    pub fn normalize(mut self) -> Result<Self> {
        let n = norm(&self.vector);
        if n == T::zero() || !n.is_finite() {
            return Err(Error::invalid(format!(
                "embedding of `{}` cannot be normalized",
                self.item_id
            )));
        }
        // Already-unit rows are kept bit-exact so that write/ingest round-trips.
        if (n - T::one()).abs() > T::of(1e-12) {
            self.vector.iter_mut().for_each(|x| *x = *x / n);
        }
        self.normalized = true;
        Ok(self)
    }
}

pub fn pool<T: Scalar>(tokens: &TokenEmbeddingSequence<T>, mode: Pooling) -> Result<ItemEmbedding<T>> {
    let first = tokens
        .vectors
        .first()
        .ok_or_else(|| Error::invalid(format!("`{}` has no token vectors", tokens.item_id)))?;
    let dim = first.len();
    if let Some(bad) = tokens.vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let vector = match mode {
        Pooling::First => first.clone(),
        Pooling::Average => {
            let mut acc = vec![T::zero(); dim];
            for v in &tokens.vectors {
                acc.iter_mut().zip(v).for_each(|(a, &x)| *a = *a + x);
            }
            let n = T::of_usize(tokens.vectors.len());
            acc.into_iter().map(|a| a / n).collect()
        }
    };
    Ok(ItemEmbedding {
        item_id: tokens.item_id.clone(),
        vector,
        normalized: false,
    })
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let denom = norm(a) * norm(b);
    if denom == T::zero() {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((dot(a, b) / denom).max(-T::one()).min(T::one()))
}

/// Deterministic unit vector for a token: SHA-256 of `(seed, token)` seeds a
/// ChaCha8 stream of standard normals, which is then normalized.
pub fn token_vector<T: Scalar>(token: &str, dim: usize, seed: u64) -> Vec<T> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    raw.into_iter().map(|x| T::of(x / n)).collect()
}

/// Stand-in for the external text encoder: average-pooled token hash vectors,
/// L2-normalized.
pub fn pseudo_embed<T: Scalar>(item: &ItemRecord, dim: usize, seed: u64) -> Result<ItemEmbedding<T>> {
    check_dim(dim)?;
    if item.tokens.is_empty() {
        return Err(Error::invalid(format!("item `{}` has no tokens", item.item_id)));
    }
    let seq = TokenEmbeddingSequence {
        item_id: item.item_id.clone(),
        vectors: item.tokens.iter().map(|t| token_vector(t, dim, seed)).collect(),
    };
    pool(&seq, Pooling::Average)?.normalize()
}

fn check_dim(dim: usize) -> Result<()> {
    if (MIN_DIM..=MAX_DIM).contains(&dim) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "embedding dimension {dim} outside [{MIN_DIM}, {MAX_DIM}]"
        )))
    }
}

/// Row-major matrix of unit-norm item embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<T> {
    dim: usize,
    ids: Vec<String>,
    data: Vec<T>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    /// Builds the matrix, normalizing every row.
    pub fn from_rows(rows: Vec<ItemEmbedding<T>>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.vector.len());
        check_dim(dim)?;
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut index = HashMap::with_capacity(rows.len());
        for row in rows {
            if row.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.vector.len(),
                });
            }
            if let Some(position) = row.vector.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    item_id: row.item_id,
                    position,
                });
            }
            let row = row.normalize()?;
            if index.insert(row.item_id.clone(), ids.len()).is_some() {
                return Err(Error::DuplicateItem(row.item_id));
            }
            ids.push(row.item_id);
            data.extend(row.vector);
        }
        Ok(EmbeddingMatrix { dim, ids, data, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn row_at(&self, pos: usize) -> &[T] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn row(&self, item_id: &str) -> Option<&[T]> {
        self.position(item_id).map(|p| self.row_at(p))
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    /// Checks that rows and catalog items are in bijection.
    pub fn check_covers(&self, catalog: &Catalog) -> Result<()> {
        if let Some(missing) = catalog.ids().find(|id| self.position(id).is_none()) {
            return Err(Error::MissingItem(missing.to_owned()));
        }
        if let Some(extra) = self.ids.iter().find(|id| catalog.position(id).is_none()) {
            return Err(Error::UnknownItem(extra.clone()));
        }
        Ok(())
    }
}

/// Embeds every catalog item with [`pseudo_embed`].
pub fn pseudo_embed_catalog<T: Scalar>(catalog: &Catalog, dim: usize, seed: u64) -> Result<EmbeddingMatrix<T>> {
    let rows = catalog
        .items()
        .iter()
        .map(|item| pseudo_embed(item, dim, seed))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows(rows)
}

/// Items with the highest cosine to `query`, excluding `exclude`; ties by item id.
pub fn top_k_semantic<T: Scalar>(
    query: &[T],
    matrix: &EmbeddingMatrix<T>,
    k: usize,
    exclude: &HashSet<&str>,
) -> Result<Vec<(String, T)>> {
    if query.len() != matrix.dim() {
        return Err(Error::DimensionMismatch {
            expected: matrix.dim(),
            found: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut scored = Vec::with_capacity(matrix.len());
    for (id, row) in matrix.rows() {
        if !exclude.contains(id) {
            scored.push((id, cosine(query, row)?));
        }
    }
    Ok(rank::top_k(scored, k)
        .into_iter()
        .map(|(id, s)| (id.to_owned(), s))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Row {
    item_id: String,
    vector: Vec<f64>,
}

/// Reads an embedding file (a `{"dim": d}` header line, then one row per
/// item) and checks it covers `catalog` exactly. Rows are stored normalized
/// and in catalog order.
pub fn ingest_embeddings<T: Scalar>(path: &Path, catalog: &Catalog) -> Result<EmbeddingMatrix<T>> {
    let lines = jsonl::read_lines(path)?;
    let (header_line, header_text) = lines.first().ok_or_else(|| Error::Malformed {
        path: path.to_path_buf(),
        line: 1,
        message: "missing dim header".into(),
    })?;
    let header: Header = jsonl::parse_line(path, *header_line, header_text)?;
    check_dim(header.dim)?;
    let mut by_id: HashMap<String, Vec<f64>> = HashMap::with_capacity(lines.len());
    for (no, text) in &lines[1..] {
        let row: Row = jsonl::parse_line(path, *no, text)?;
        if row.vector.len() != header.dim {
            return Err(Error::DimensionMismatch {
                expected: header.dim,
                found: row.vector.len(),
            });
        }
        if let Some(position) = row.vector.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                item_id: row.item_id,
                position,
            });
        }
        if by_id.insert(row.item_id.clone(), row.vector).is_some() {
            return Err(Error::DuplicateItem(row.item_id));
        }
    }
    if let Some(extra) = by_id.keys().filter(|id| catalog.position(id).is_none()).min() {
        return Err(Error::UnknownItem(extra.clone()));
    }
    let rows = catalog
        .ids()
        .map(|id| {
            let v = by_id.remove(id).ok_or_else(|| Error::MissingItem(id.to_owned()))?;
            Ok(ItemEmbedding {
                item_id: id.to_owned(),
                vector: v.into_iter().map(T::of).collect(),
                normalized: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows(rows)
}

pub fn write_embeddings<T: Scalar>(path: &Path, matrix: &EmbeddingMatrix<T>) -> Result<()> {
    let rows: Vec<Row> = matrix
        .rows()
        .map(|(id, v)| Row {
            item_id: id.to_owned(),
            vector: v.iter().map(|x| x.to_f64_lossy()).collect(),
        })
        .collect();
    jsonl::write_with_header(path, Some(&Header { dim: matrix.dim() }), &rows)
}
