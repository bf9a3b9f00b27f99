//! Text embedders.
//!
//! [`HashEmbedder`] is the deterministic reference embedder: lowercased word
//! unigrams and bigrams, each hashed with 64-bit FNV-1a into one of `dim`
//! buckets (index = hash mod dim, sign = bit 63), counts accumulated and the
//! result L2-normalized.

use thiserror::Error;

use crate::model::{Embedding, EmbeddingError};

pub const DEFAULT_EMBED_DIM: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Degenerate(#[from] EmbeddingError),
    #[error("embedding provider returned {got} dimensions, expected {expected}")]
    WrongDimension { expected: usize, got: usize },
    #[error("embedding provider error: {0}")]
    Provider(String),
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercased alphanumeric word tokens.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn accumulate(&self, feature: &str, counts: &mut [f64]) {
        let h = fnv1a64(feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        counts[idx] += sign;
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let tokens = words(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0.0; self.dim];
        for w in &tokens {
            self.accumulate(w, &mut counts);
        }
        for pair in tokens.windows(2) {
            self.accumulate(&format!("{} {}", pair[0], pair[1]), &mut counts);
        }
        Ok(Embedding::normalize(counts)?)
    }
}

/// Embedder backed by an OpenAI-compatible `POST {base}/embeddings` endpoint.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, dim: usize, timeout: std::time::Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            agent,
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.to_owned(),
            api_key,
            dim,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = serde_json::json!({ "model": self.model, "input": text }).to_string();
        let mut req = self.agent.post(&self.url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.as_bytes()).map_err(|e| EmbedError::Provider(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbedError::Provider(format!("HTTP {}", resp.status())));
        }
        let text = resp.body_mut().read_to_string().map_err(|e| EmbedError::Provider(e.to_string()))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| EmbedError::Provider(e.to_string()))?;
        let vector: Vec<f64> = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| EmbedError::Provider("response lacks data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(0.0))
            .collect();
        if vector.len() != self.dim {
            return Err(EmbedError::WrongDimension { expected: self.dim, got: vector.len() });
        }
        Ok(Embedding::normalize(vector)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar recomputation of the hash-bag formula: builds a
    /// sparse feature map and computes cosine without touching `HashEmbedder`.
    fn oracle_cosine(a: &str, b: &str) -> f64 {
        fn bag(text: &str) -> std::collections::HashMap<usize, f64> {
            let lower = text.to_lowercase();
            let toks: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).collect();
            let mut feats: Vec<String> = toks.iter().map(|s| s.to_string()).collect();
            for i in 1..toks.len() {
                feats.push(format!("{} {}", toks[i - 1], toks[i]));
            }
            let mut m = std::collections::HashMap::new();
            for f in feats {
                let mut h: u64 = 14695981039346656037;
                for b in f.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                let sign = if h & (1u64 << 63) != 0 { -1.0 } else { 1.0 };
                *m.entry((h % 256) as usize).or_insert(0.0) += sign;
            }
            m
        }
        let (x, y) = (bag(a), bag(b));
        let dot: f64 = x.iter().map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0)).sum();
        let nx = x.values().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.values().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny)
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn self_similarity_is_one() {
        let e = HashEmbedder::default();
        for s in ["retrieve credentials", "A", "weekly calendar meeting", "x y x y x y"] {
            let v = e.embed(s).unwrap();
            assert!((v.cosine(&v) - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn pairwise_cosine_matches_oracle() {
        let e = HashEmbedder::default();
        let a = e.embed("retrieve credentials").unwrap();
        let b = e.embed("weekly calendar meeting").unwrap();
        let got = a.cosine(&b);
        let want = oracle_cosine("retrieve credentials", "weekly calendar meeting");
        assert!((got - want).abs() < 1e-12, "got {got}, oracle {want}");
        assert_eq!(got.to_bits(), e.embed("retrieve credentials").unwrap().cosine(&b).to_bits());
    }

    #[test]
    fn credential_descriptions_match_oracle() {
        let e = HashEmbedder::default();
        let a = "Retrieve service account credentials";
        let b = "Obtain application login credentials";
        let got = e.embed(a).unwrap().cosine(&e.embed(b).unwrap());
        assert!((got - oracle_cosine(a, b)).abs() < 1e-12);
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        let e = HashEmbedder::default();
        assert_eq!(e.embed("Retrieve, Credentials!").unwrap(), e.embed("retrieve credentials").unwrap());
    }

    #[test]
    fn empty_text_errors() {
        let e = HashEmbedder::default();
        assert!(matches!(e.embed(""), Err(EmbedError::EmptyText)));
        assert!(matches!(e.embed("   \n"), Err(EmbedError::EmptyText)));
        assert!(matches!(e.embed("?!"), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn output_is_unit_norm_and_fixed_dim() {
        let e = HashEmbedder::new(64);
        let v = e.embed("paginate through all recommended songs").unwrap();
        assert_eq!(v.dim(), 64);
        let n: f64 = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}
