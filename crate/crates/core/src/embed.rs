//! Text embedders.
//!
//! [`HashEmbedder`] is a deterministic bag-of-tokens embedder for offline use;
//! [`RemoteEmbedder`] talks to a hosted embeddings endpoint
//! (`POST {model, input: [..]}` returning `data[].embedding`).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("embedder unavailable: {0}")]
    Unavailable(String),
    #[error("embedder returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedder returned a non-finite component")]
    NonFinite,
    #[error("bad embedder response: {0}")]
    BadResponse(String),
}

impl EmbedError {
    /// Transport-level failures are worth retrying; contract violations are not.
    pub fn is_transient(&self) -> bool {
        matches!(self, EmbedError::Unavailable(_))
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Identifies the configuration an index was built with.
    fn fingerprint(&self) -> String {
        format!("{}:dim={}", self.name(), self.dimension())
    }

    /// Raw (not necessarily normalized) vectors, one per input, in order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        out.pop().ok_or(EmbedError::CountMismatch { expected: 1, got: 0 })
    }
}

/// L2-normalizes `raw` into a unit vector. Values are accumulated in f64;
/// an all-zero vector maps to the first basis vector.
pub fn normalize(raw: &[f32]) -> Result<Vec<f32>, EmbedError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let norm = raw.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut basis = vec![0.0; raw.len()];
        if let Some(first) = basis.first_mut() {
            *first = 1.0;
        }
        return Ok(basis);
    }
    Ok(raw.iter().map(|&v| (f64::from(v) / norm) as f32).collect())
}

/// Embeds and normalizes, checking the declared width.
pub fn embed_unit(embedder: &dyn Embedder, text: &str) -> Result<Vec<f32>, EmbedError> {
    let raw = embedder.embed(text)?;
    if raw.len() != embedder.dimension() {
        return Err(EmbedError::DimensionMismatch {
            expected: embedder.dimension(),
            got: raw.len(),
        });
    }
    normalize(&raw)
}

/// Token-hashing embedder: lowercased whitespace tokens, seeded FNV-1a hash
/// into `dimension` buckets, +1 per hit, then L2 normalization.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
    name: String,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension >= 2, "hash embedder needs at least 2 dimensions");
        Self {
            dimension,
            seed,
            name: format!("hash-v1:seed={seed}"),
        }
    }

    fn bucket(&self, token: &str) -> usize {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for b in self.seed.to_le_bytes().iter().chain(token.as_bytes()) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(PRIME);
        }
        (h % self.dimension as u64) as usize
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.dimension];
        for token in text.split_whitespace() {
            acc[self.bucket(&token.to_lowercase())] += 1.0;
        }
        normalize(&acc).expect("counts are finite")
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub url: String,
    pub model: String,
    pub dimension: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        Self {
            url: "https://open.bigmodel.cn/api/paas/v4/embeddings".into(),
            model: "embedding-3".into(),
            dimension: 256,
            api_key_env: "EMBEDDING_API_KEY".into(),
            timeout_secs: 60,
        }
    }
}

pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    name: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
    dimensions: usize,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Self {
        let api_key = std::env::var(&cfg.api_key_env).ok();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: format!("remote:{}", cfg.model),
            cfg,
            api_key,
            agent,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = EmbeddingRequest {
            model: &self.cfg.model,
            input: texts,
            dimensions: self.cfg.dimension,
        };
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| EmbedError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(EmbedError::Unavailable(format!("http status {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(EmbedError::BadResponse(format!("http status {status}: {text}")));
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        let mut data = parsed.data;
        if data.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                got: data.len(),
            });
        }
        data.sort_by_key(|d| d.index.unwrap_or(0));
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}
