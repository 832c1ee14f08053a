//! Abstract embeddings and cosine similarity.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::PaperRecord;
use crate::error::{Error, Result};

/// A unit-L2-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values`. Fails on empty, non-finite or all-zero input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("embedding has zero dimension".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("embedding has non-finite values".into()));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 {
            return Err(Error::Precondition("zero vector".into()));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    /// Accepts already-normalized values unchanged, so stored vectors
    /// round-trip bit for bit.
    fn try_from(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("invalid stored embedding".into()));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Precondition(format!("stored embedding has norm {norm}")));
        }
        Ok(Self(values))
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `dot(a, b) / (|a| |b|)`, clamped into `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Precondition("cosine of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Embedding>;
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Hashed bag-of-words encoder.
///
/// Each distinct token maps to a pseudo-random vector drawn from a ChaCha8
/// stream seeded with `sha256(seed_le || token)`; a text is the count-weighted
/// sum of its token vectors, normalized. Texts that share vocabulary end up
/// close, and identical token multisets give identical vectors.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { dim, seed }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        (0..self.dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }
}

impl TextEncoder for MockEncoder {
    fn name(&self) -> &str {
        "mock"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            counts.insert(text.to_string(), 1);
        }
        let mut acc = vec![0.0; self.dim];
        for (token, count) in &counts {
            for (a, v) in acc.iter_mut().zip(self.token_vector(token)) {
                *a += f64::from(*count) * v;
            }
        }
        Embedding::new(acc)
    }
}

/// `POST {endpoint}` with `{"input": text}`, expecting `{"embedding": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    endpoint: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEncoder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            dim,
            agent,
        }
    }
}

impl TextEncoder for HttpEncoder {
    fn name(&self) -> &str {
        "http"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(json!({ "input": text }))
            .map_err(|e| Error::transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::transport(format!("HTTP {}", resp.status().as_u16())));
        }
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::transport(format!("bad response body: {e}")))?;
        let values: Vec<f64> = serde_json::from_value(v["embedding"].clone())
            .map_err(|e| Error::transport(format!("bad embedding: {e}")))?;
        if values.len() != self.dim {
            return Err(Error::config(
                "encoder.dim",
                format!("backend returned {} values, expected {}", values.len(), self.dim),
            ));
        }
        Embedding::new(values)
    }
}

/// Embeds a paper from its abstract alone.
pub fn embed_abstract(paper: &PaperRecord, encoder: &dyn TextEncoder) -> Result<Embedding> {
    if paper.abstract_text.trim().is_empty() {
        return Err(Error::Precondition(format!("paper `{}` has an empty abstract", paper.id)));
    }
    let e = encoder.encode(&paper.abstract_text)?;
    if e.dim() != encoder.dim() {
        return Err(Error::config(
            "encoder.dim",
            format!("encoder produced {} values, configured for {}", e.dim(), encoder.dim()),
        ));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert_eq, prop_assume, proptest};

    fn paper(abs: &str) -> PaperRecord {
        PaperRecord::new("a", "A", Some(2020), abs)
    }

    #[test]
    fn cosine_identity_and_orthogonality() {
        let v = [0.3, -0.4, 0.5];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_hand_value() {
        // (1,2,3).(3,2,1) = 10, |.|^2 = 14
        let a = Embedding::new(vec![1.0, 2.0, 3.0]).unwrap();
        let b = Embedding::new(vec![3.0, 2.0, 1.0]).unwrap();
        let c = cosine(a.as_slice(), b.as_slice()).unwrap();
        assert!((c - 10.0 / 14.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::Precondition(_))));
        assert!(Embedding::new(vec![0.0; 3]).is_err());
        assert!(Embedding::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn mock_encoder_matches_independent_recomputation() {
        let enc = MockEncoder::new(16, 9);
        let got = embed_abstract(&paper("Graph graph networks."), &enc).unwrap();
        // recompute: tokens {graph: 2, networks: 1}
        let tv = |t: &str| {
            let mut seed = Vec::new();
            seed.extend_from_slice(&9u64.to_le_bytes());
            seed.extend_from_slice(t.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(Sha256::digest(&seed).into());
            (0..16).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect::<Vec<f64>>()
        };
        let (g, n) = (tv("graph"), tv("networks"));
        let raw: Vec<f64> = g.iter().zip(&n).map(|(a, b)| 2.0 * a + b).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (x, y) in got.as_slice().iter().zip(raw.iter().map(|r| r / norm)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((l2_norm(got.as_slice()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedding_is_deterministic_and_rejects_empty_abstract() {
        let enc = MockEncoder::new(32, 1);
        let p = paper("Retrieval augmented generation with dense passages.");
        assert_eq!(embed_abstract(&p, &enc).unwrap(), embed_abstract(&p, &enc).unwrap());
        assert!(matches!(embed_abstract(&paper("  "), &enc), Err(Error::Precondition(_))));
    }

    #[test]
    fn shared_vocabulary_means_higher_similarity() {
        let enc = MockEncoder::new(256, 0);
        let a = enc.encode("graph neural networks message passing").unwrap();
        let b = enc.encode("graph neural networks attention").unwrap();
        let c = enc.encode("protein folding with diffusion").unwrap();
        let ab = cosine(a.as_slice(), b.as_slice()).unwrap();
        let ac = cosine(a.as_slice(), c.as_slice()).unwrap();
        assert!(ab > ac);
    }

    #[test]
    fn random_unit_vectors_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let dim = rng.gen_range(1..20);
            let a = Embedding::new((0..dim).map(|_| rng.gen::<f64>() - 0.5).collect());
            let b = Embedding::new((0..dim).map(|_| rng.gen::<f64>() - 0.5).collect());
            if let (Ok(a), Ok(b)) = (a, b) {
                let c = cosine(a.as_slice(), b.as_slice()).unwrap();
                assert!(c.abs() <= 1.0 + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn cosine_is_exactly_symmetric(
            a in proptest::collection::vec(-10.0f64..10.0, 8),
            b in proptest::collection::vec(-10.0f64..10.0, 8),
        ) {
            prop_assume!(l2_norm(&a) > 0.0 && l2_norm(&b) > 0.0);
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }
    }
}
