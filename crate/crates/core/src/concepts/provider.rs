//! Embedding providers: anything that maps captions, concepts and images into
//! one unit-norm space.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::image::ImageTensor;
use crate::data::synthetic::describe_shape_image;
use crate::tokenizer::normalize_words;
use crate::{Error, Result};

pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier recorded in provenance.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

pub fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::Provider {
            item: "<vector>".into(),
            message: "embedding has zero or non-finite norm".into(),
        });
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit vector derived from a SHA-256 of `seed`, a domain tag and `bytes`.
pub fn hash_to_unit_vector(seed: u64, domain: &str, bytes: &[u8], dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(bytes);
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(v).expect("gaussian sample has positive norm")
}

/// Pure hash-based provider: unrelated inputs map to unrelated directions.
#[derive(Debug, Clone)]
pub struct MockProvider {
    pub seed: u64,
    pub dim: usize,
}

impl MockProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl EmbeddingProvider for MockProvider {
    fn id(&self) -> String {
        format!("mock(seed={},dim={})", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        Ok(hash_to_unit_vector(
            self.seed,
            "text",
            text.as_bytes(),
            self.dim,
        ))
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(hash_to_unit_vector(
            self.seed,
            "image",
            &image.bytes(),
            self.dim,
        ))
    }
}

/// Provider for the synthetic shapes domain. Text is a normalised bag of
/// hashed word vectors; an image is embedded as the text describing the
/// colour, shape and position read back from its pixels.
#[derive(Debug, Clone)]
pub struct ShapesProvider {
    pub seed: u64,
    pub dim: usize,
}

impl ShapesProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl EmbeddingProvider for ShapesProvider {
    fn id(&self) -> String {
        format!("shapes(seed={},dim={})", self.seed, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<String> = normalize_words(text)
            .into_iter()
            .filter(|w| !matches!(w.as_str(), "a" | "an" | "the" | "on" | "in"))
            .collect();
        if words.is_empty() {
            return Ok(hash_to_unit_vector(
                self.seed,
                "text",
                text.as_bytes(),
                self.dim,
            ));
        }
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            for (a, x) in acc.iter_mut().zip(hash_to_unit_vector(
                self.seed,
                "word",
                w.as_bytes(),
                self.dim,
            )) {
                *a += x;
            }
        }
        normalize(acc)
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        match describe_shape_image(image) {
            Some(d) => self.embed_text(&d.words()),
            None => Ok(hash_to_unit_vector(
                self.seed,
                "image",
                &image.bytes(),
                self.dim,
            )),
        }
    }
}

/// Text embeddings served from a concept cache file; images are unsupported.
#[derive(Debug, Clone)]
pub struct CacheProvider {
    pub path: String,
    pub dim: usize,
    pub table: HashMap<String, Vec<f64>>,
}

impl CacheProvider {
    pub fn open(path: &Path) -> Result<Self> {
        let records = super::cache::read_cache(path)?;
        let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
        Ok(Self {
            path: path.display().to_string(),
            dim,
            table: records
                .into_iter()
                .map(|r| (r.concept, r.embedding))
                .collect(),
        })
    }
}

impl EmbeddingProvider for CacheProvider {
    fn id(&self) -> String {
        format!("cache({})", self.path)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Provider {
                item: text.to_string(),
                message: format!("not present in cache {}", self.path),
            })
    }

    fn embed_image(&self, _image: &ImageTensor) -> Result<Vec<f64>> {
        Err(Error::Provider {
            item: "<image>".into(),
            message: "the cache provider only serves concept embeddings".into(),
        })
    }
}

/// Environment variable holding the default remote endpoint.
pub const REMOTE_ENDPOINT_ENV: &str = "VICHA_REMOTE_ENDPOINT";

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<&'a ImageTensor>,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    embedding: Vec<f64>,
}

/// Client for an external embedding service: `POST {endpoint}/embed` with
/// `{"text": ...}` or `{"image": {"shape": [c, h, w], "data": [...]}}`,
/// answered by `{"embedding": [...]}`. Responses are re-normalised.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    pub endpoint: String,
    pub dim: usize,
    client: reqwest::blocking::Client,
}

impl RemoteProvider {
    pub fn new(endpoint: &str, dim: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Http(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            dim,
            client,
        })
    }

    pub fn from_env(dim: usize) -> Result<Self> {
        let endpoint = std::env::var(REMOTE_ENDPOINT_ENV)
            .map_err(|_| Error::Usage(format!("{REMOTE_ENDPOINT_ENV} is not set")))?;
        Self::new(&endpoint, dim)
    }

    fn call(&self, item: &str, body: &RemoteRequest<'_>) -> Result<Vec<f64>> {
        let fail = |message: String| Error::Provider {
            item: item.to_string(),
            message,
        };
        let resp = self
            .client
            .post(format!("{}/embed", self.endpoint))
            .json(body)
            .send()
            .map_err(|e| fail(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(fail(format!("HTTP {}", resp.status())));
        }
        let parsed: RemoteResponse = resp.json().map_err(|e| fail(e.to_string()))?;
        if self.dim != 0 && parsed.embedding.len() != self.dim {
            return Err(fail(format!(
                "expected {} dimensions, got {}",
                self.dim,
                parsed.embedding.len()
            )));
        }
        normalize(parsed.embedding).map_err(|_| fail("zero-norm embedding".into()))
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn id(&self) -> String {
        format!("remote({})", self.endpoint)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.call(
            text,
            &RemoteRequest {
                text: Some(text),
                image: None,
            },
        )
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.call(
            "<image>",
            &RemoteRequest {
                text: None,
                image: Some(image),
            },
        )
    }
}
