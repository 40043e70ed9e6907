//! Embedding storage and exact cosine k-nearest-neighbor retrieval.
//!
//! Rows are stored L2-normalized as 32-bit floats; dot products accumulate in
//! 64-bit so sort orders are stable. Retrieval is brute force: pools in the
//! instance-level setting are small enough that approximate indexes would be
//! pointless complexity.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::IndexError;

/// Immutable matrix of L2-normalized embeddings, row per example id.
/// Concurrent reads need no synchronization.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    data: Vec<f32>,
    dim: usize,
    by_id: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Validate and normalize raw vectors into an index.
    pub fn build(ids: Vec<String>, vectors: Vec<Vec<f32>>) -> Result<Self, IndexError> {
        if ids.len() != vectors.len() {
            return Err(IndexError::CountMismatch {
                ids: ids.len(),
                vectors: vectors.len(),
            });
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if !vectors.is_empty() && dim == 0 {
            return Err(IndexError::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        let mut by_id = HashMap::with_capacity(ids.len());
        for (row, (id, vector)) in ids.iter().zip(&vectors).enumerate() {
            if vector.len() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: vector.len(),
                });
            }
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::NonFinite { id: id.clone() });
            }
            let norm = vector
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(IndexError::ZeroVector { id: id.clone() });
            }
            if by_id.insert(id.clone(), row).is_some() {
                return Err(IndexError::DuplicateId { id: id.clone() });
            }
            data.extend(vector.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            ids,
            data,
            dim,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn id_at(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// The normalized vector stored for `id`.
    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.row_of(id).map(|i| self.row(i))
    }

    /// Fail unless every id in `ids` has an embedding.
    pub fn ensure_covers<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), IndexError> {
        for id in ids {
            if !self.by_id.contains_key(id) {
                return Err(IndexError::UnknownId(id.to_string()));
            }
        }
        Ok(())
    }

    /// New matrix restricted to `ids`, in the given order. Rows are already
    /// normalized so they are copied as-is.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self, IndexError> {
        let mut out_ids = Vec::new();
        let mut data = Vec::new();
        let mut by_id = HashMap::new();
        for id in ids {
            let row = self
                .row_of(id)
                .ok_or_else(|| IndexError::UnknownId(id.to_string()))?;
            if by_id.insert(id.to_string(), out_ids.len()).is_some() {
                return Err(IndexError::DuplicateId { id: id.to_string() });
            }
            out_ids.push(id.to_string());
            data.extend_from_slice(self.row(row));
        }
        Ok(Self {
            ids: out_ids,
            data,
            dim: self.dim,
            by_id,
        })
    }

    /// Load embeddings from a file. `.jsonl` files are parsed as one
    /// `{"id": ..., "vector": [...]}` object per line; any other extension is
    /// read as the binary sidecar (little-endian u32 count, u32 dim, then
    /// count*dim little-endian f32), with ids supplied by the caller in row
    /// order.
    pub fn load(path: impl AsRef<Path>, sidecar_ids: &[String]) -> Result<Self, IndexError> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Self::load_jsonl(path),
            _ => Self::load_sidecar(path, sidecar_ids),
        }
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| IndexError::Io {
            path: display.clone(),
            source,
        })?;
        let mut ids = Vec::new();
        let mut vectors = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|source| IndexError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| IndexError::Parse {
                    path: display.clone(),
                    line: line_no,
                    message: e.to_string(),
                })?;
            ids.push(record.id);
            vectors.push(record.vector);
        }
        Self::build(ids, vectors)
    }

    pub fn load_sidecar(path: impl AsRef<Path>, ids: &[String]) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut file = File::open(path).map_err(|source| IndexError::Io {
            path: display.clone(),
            source,
        })?;
        let mut header = [0u8; 8];
        file.read_exact(&mut header)
            .map_err(|_| IndexError::Sidecar {
                path: display.clone(),
                message: "file shorter than the 8-byte header".into(),
            })?;
        let count = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        if count != ids.len() {
            return Err(IndexError::Sidecar {
                path: display,
                message: format!("header says {count} rows, dataset has {}", ids.len()),
            });
        }
        let mut bytes = vec![0u8; count * dim * 4];
        file.read_exact(&mut bytes)
            .map_err(|_| IndexError::Sidecar {
                path: display.clone(),
                message: format!("expected {count}x{dim} f32 payload"),
            })?;
        let mut vectors = Vec::with_capacity(count);
        for row in 0..count {
            let mut vector = Vec::with_capacity(dim);
            for col in 0..dim {
                let off = (row * dim + col) * 4;
                vector.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            }
            vectors.push(vector);
        }
        Self::build(ids.to_vec(), vectors)
    }

    /// Write the binary sidecar format read by [`load_sidecar`].
    pub fn write_sidecar(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut bytes = Vec::with_capacity(8 + self.data.len() * 4);
        bytes.extend_from_slice(&(self.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for value in &self.data {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
        let mut file = File::create(path).map_err(|source| IndexError::Io {
            path: display.clone(),
            source,
        })?;
        file.write_all(&bytes).map_err(|source| IndexError::Io {
            path: display,
            source,
        })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut out = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            let record = EmbeddingRecord {
                id: id.clone(),
                vector: self.row(i).to_vec(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|source| IndexError::Io {
            path: display,
            source,
        })
    }

    /// Normalize a raw query vector against this index's dimension.
    pub fn normalize_query(&self, query: &[f32]) -> Result<Vec<f32>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite {
                id: "<query>".into(),
            });
        }
        let norm = query
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(IndexError::ZeroVector {
                id: "<query>".into(),
            });
        }
        Ok(query
            .iter()
            .map(|&v| (f64::from(v) / norm) as f32)
            .collect())
    }

    #[cfg(test)]
    fn max_norm_error(&self) -> f64 {
        (0..self.len())
            .map(|i| {
                let norm = self
                    .row(i)
                    .iter()
                    .map(|&v| f64::from(v) * f64::from(v))
                    .sum::<f64>()
                    .sqrt();
                (norm - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EmbeddingRecord {
    id: String,
    vector: Vec<f32>,
}

/// Connection details for fetching embeddings over HTTP, sharing the scoring
/// backend's transport conventions (JSON POST, bearer auth).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingEndpoint {
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
    #[serde(default = "default_embed_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_embed_timeout_ms() -> u64 {
    60_000
}

const EMBED_BATCH: usize = 64;

/// Fetch embeddings for `(id, text)` pairs from an embeddings endpoint:
/// `POST {model, input: [texts]}` returning `{data: [{embedding: [...]}]}`
/// aligned with the input order. The result is a normalized index over the
/// given ids.
pub fn fetch_embeddings(
    config: &EmbeddingEndpoint,
    items: &[(String, String)],
) -> Result<EmbeddingMatrix, IndexError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(std::time::Duration::from_millis(config.timeout_ms)))
        .build()
        .into();
    let mut vectors: Vec<Vec<f32>> = Vec::with_capacity(items.len());
    for batch in items.chunks(EMBED_BATCH) {
        let texts: Vec<&str> = batch.iter().map(|(_, text)| text.as_str()).collect();
        let body = serde_json::json!({ "model": config.model, "input": texts });
        let mut request = agent
            .post(&config.endpoint)
            .header("content-type", "application/json");
        if let Some(token) = &config.auth_token {
            request = request.header("authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| IndexError::Endpoint(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(IndexError::Endpoint(format!("HTTP {status}: {text}")));
        }
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| IndexError::Endpoint(e.to_string()))?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| IndexError::Endpoint("response has no data array".into()))?;
        if data.len() != batch.len() {
            return Err(IndexError::Endpoint(format!(
                "asked for {} embeddings, got {}",
                batch.len(),
                data.len()
            )));
        }
        for entry in data {
            let embedding = entry
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| IndexError::Endpoint("entry has no embedding".into()))?;
            vectors.push(
                embedding
                    .iter()
                    .map(|v| v.as_f64().unwrap_or(f64::NAN) as f32)
                    .collect(),
            );
        }
    }
    let ids = items.iter().map(|(id, _)| id.clone()).collect();
    EmbeddingMatrix::build(ids, vectors)
}

/// Cosine similarity of two normalized vectors: their dot product,
/// accumulated in f64 and clamped to [-1, 1].
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, IndexError> {
    if u.len() != v.len() {
        return Err(IndexError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let dot = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum::<f64>();
    Ok(dot.clamp(-1.0, 1.0))
}

/// The `m` nearest rows to `query` by cosine similarity, descending, with
/// ties broken by ascending id so the order is total and reproducible. A pool
/// smaller than `m` is returned whole. The raw query is normalized first, so
/// results are invariant under positive rescaling.
pub fn knn(
    index: &EmbeddingMatrix,
    query: &[f32],
    m: usize,
) -> Result<Vec<(String, f64)>, IndexError> {
    if index.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    let query = index.normalize_query(query)?;
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .map(|row| {
            let score = cosine(&query, index.row(row)).expect("dims match");
            (row, score)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| index.id_at(a.0).cmp(index.id_at(b.0)))
    });
    scored.truncate(m);
    Ok(scored
        .into_iter()
        .map(|(row, score)| (index.id_at(row).to_string(), score))
        .collect())
}
