//! Text embeddings and cosine similarity for the translation step.
//!
//! Two providers: a deterministic offline trigram-hash embedder used for
//! tests and fixtures, and a remote HTTP provider speaking the common
//! `POST /embeddings` JSON shape.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::num::Real;

pub const TRIGRAM_DIM: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("embedding transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector<F> {
    pub values: Vec<F>,
    pub norm: F,
}

impl<F: Real> EmbeddingVector<F> {
    pub fn new(values: Vec<F>) -> Self {
        let norm = values
            .iter()
            .fold(F::zero(), |acc, &x| acc + x * x)
            .sqrt();
        EmbeddingVector { values, norm }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// `u·v / (‖u‖‖v‖)`, clamped to [-1, 1] against rounding.
pub fn cosine<F: Real>(
    u: &EmbeddingVector<F>,
    v: &EmbeddingVector<F>,
) -> Result<F, EmbeddingError> {
    if u.dimension() != v.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.dimension(),
            right: v.dimension(),
        });
    }
    if u.norm == F::zero() || v.norm == F::zero() {
        return Err(EmbeddingError::ZeroNorm);
    }
    let dot = u
        .values
        .iter()
        .zip(v.values.iter())
        .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
    let c = dot / (u.norm * v.norm);
    Ok(c.min(F::one()).max(-F::one()))
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercases the text, hashes character trigrams into `dim` buckets,
/// counts, and L2-normalizes. Texts shorter than three characters hash as a
/// single gram so every non-empty text maps to a unit vector.
pub fn trigram_embed<F: Real>(text: &str, dim: usize) -> Result<EmbeddingVector<F>, EmbeddingError> {
    let lowered = text.trim().to_lowercase();
    if lowered.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let chars: Vec<char> = lowered.chars().collect();
    let mut counts = vec![F::zero(); dim];
    if chars.len() < 3 {
        let h = fnv1a(lowered.as_bytes()) as usize % dim;
        counts[h] = F::one();
    } else {
        for window in chars.windows(3) {
            let gram: String = window.iter().collect();
            let h = fnv1a(gram.as_bytes()) as usize % dim;
            counts[h] = counts[h] + F::one();
        }
    }
    let mut v = EmbeddingVector::new(counts);
    let norm = v.norm;
    for x in v.values.iter_mut() {
        *x = *x / norm;
    }
    v.norm = F::one();
    Ok(v)
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    /// None until the provider has observed its dimension.
    fn dimension(&self) -> Option<usize>;
    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError>;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Deterministic offline provider (D=256 trigram hashing).
#[derive(Debug, Default)]
pub struct TrigramEmbedder;

impl EmbeddingProvider for TrigramEmbedder {
    fn name(&self) -> &str {
        "trigram"
    }

    fn dimension(&self) -> Option<usize> {
        Some(TRIGRAM_DIM)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError> {
        trigram_embed(text, TRIGRAM_DIM)
    }
}

/// Caching wrapper; repeated texts return bit-identical vectors.
pub struct CachedProvider<P> {
    inner: P,
    cache: Mutex<HashMap<String, EmbeddingVector<f64>>>,
}

impl<P: EmbeddingProvider> CachedProvider<P> {
    pub fn new(inner: P) -> Self {
        CachedProvider {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> Option<usize> {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(text)?;
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Remote provider for `POST /embeddings` with `{"input": [...]}` requests
/// and `data[i].embedding` responses. Configured via `CAPE_EMBED_URL` and
/// `CAPE_API_KEY`.
pub struct RemoteEmbedder {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    dimension: Mutex<Option<usize>>,
    max_retries: u32,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
        RemoteEmbedder {
            url: url.into(),
            api_key,
            client: reqwest::blocking::Client::new(),
            dimension: Mutex::new(None),
            max_retries: 3,
        }
    }

    pub fn from_env() -> Option<Self> {
        let url = std::env::var("CAPE_EMBED_URL").ok()?;
        Some(Self::new(url, std::env::var("CAPE_API_KEY").ok()))
    }

    fn post(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbeddingError> {
        let mut last_err = String::new();
        let mut attempts = 0;
        while attempts <= self.max_retries {
            attempts += 1;
            let mut req = self.client.post(&self.url).json(&EmbedRequest { input: texts });
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let body: EmbedResponse = resp.json().map_err(|e| EmbeddingError::Transport {
                        message: e.to_string(),
                        attempts,
                    })?;
                    let vectors: Vec<_> = body
                        .data
                        .into_iter()
                        .map(|d| EmbeddingVector::new(d.embedding))
                        .collect();
                    if let Some(first) = vectors.first() {
                        *self.dimension.lock().unwrap() = Some(first.dimension());
                    }
                    return Ok(vectors);
                }
                Ok(resp) => {
                    last_err = format!("HTTP {}", resp.status());
                }
                Err(e) => {
                    last_err = e.to_string();
                }
            }
            std::thread::sleep(Duration::from_millis(100 << attempts));
        }
        Err(EmbeddingError::Transport {
            message: last_err,
            attempts,
        })
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn name(&self) -> &str {
        "remote"
    }

    fn dimension(&self) -> Option<usize> {
        *self.dimension.lock().unwrap()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let mut v = self.post(&[text.to_string()])?;
        v.pop().ok_or(EmbeddingError::Transport {
            message: "empty response".into(),
            attempts: 1,
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector<f64>>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        self.post(texts)
    }
}

/// Ranks candidates by descending cosine similarity to the query, ties
/// broken lexicographically. Returns at most `top_k` entries.
pub fn rank_by_similarity(
    provider: &dyn EmbeddingProvider,
    query: &str,
    candidates: &[String],
    top_k: usize,
) -> Result<Vec<(String, f64)>, EmbeddingError> {
    if candidates.is_empty() {
        return Err(EmbeddingError::NoCandidates);
    }
    let q = provider.embed(query)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        let v = provider.embed(c)?;
        scored.push((c.clone(), cosine(&q, &v)?));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(top_k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigram_embed_is_deterministic_and_unit_norm() {
        let a: EmbeddingVector<f64> = trigram_embed("grab milk", TRIGRAM_DIM).unwrap();
        let b: EmbeddingVector<f64> = trigram_embed("grab milk", TRIGRAM_DIM).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(
            trigram_embed::<f64>("   ", TRIGRAM_DIM),
            Err(EmbeddingError::EmptyText)
        ));
    }

    #[test]
    fn related_text_scores_higher_than_unrelated() {
        let p = TrigramEmbedder;
        let a = p.embed("grab milk").unwrap();
        let b = p.embed("grab the milk").unwrap();
        let c = p.embed("sit on couch").unwrap();
        assert!(cosine(&a, &b).unwrap() > cosine(&a, &c).unwrap());
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let v = EmbeddingVector::new(vec![0.3, -0.4, 1.2]);
        assert!((cosine(&v, &v).unwrap() - 1.0_f64).abs() < 1e-12);
        let e1 = EmbeddingVector::new(vec![1.0, 0.0]);
        let e2 = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        let neg = EmbeddingVector::new(v.values.iter().map(|x| -x).collect());
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_an_error() {
        let z = EmbeddingVector::new(vec![0.0, 0.0]);
        let v = EmbeddingVector::new(vec![1.0, 0.0]);
        assert!(matches!(cosine(&z, &v), Err(EmbeddingError::ZeroNorm)));
    }

    #[test]
    fn rank_puts_verbatim_query_first() {
        let p = TrigramEmbedder;
        let candidates = vec![
            "walk to kitchen".to_string(),
            "grab milk".to_string(),
            "open fridge".to_string(),
        ];
        let ranked = rank_by_similarity(&p, "grab milk", &candidates, 10).unwrap();
        assert_eq!(ranked[0].0, "grab milk");
        assert!((ranked[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(ranked.len(), 3);
    }

    #[test]
    fn rank_matches_brute_force_sort() {
        let p = TrigramEmbedder;
        let candidates: Vec<String> = [
            "walk to the kitchen",
            "grab the glass",
            "open the fridge door",
            "sit down on the couch",
            "switch on the television",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let query = "turn on the tv";
        let ranked = rank_by_similarity(&p, query, &candidates, 5).unwrap();

        let q = p.embed(query).unwrap();
        let mut oracle: Vec<(String, f64)> = candidates
            .iter()
            .map(|c| (c.clone(), cosine(&q, &p.embed(c).unwrap()).unwrap()))
            .collect();
        oracle.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        assert_eq!(ranked, oracle);
    }

    #[test]
    fn cache_is_transparent_to_ranking() {
        let plain = TrigramEmbedder;
        let cached = CachedProvider::new(TrigramEmbedder);
        let candidates = vec!["grab milk".to_string(), "open fridge".to_string()];
        let a = rank_by_similarity(&plain, "get milk", &candidates, 2).unwrap();
        let b = rank_by_similarity(&cached, "get milk", &candidates, 2).unwrap();
        let c = rank_by_similarity(&cached, "get milk", &candidates, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }
}
