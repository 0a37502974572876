//! Text embeddings, the task encoder and the candidate matrix.
//!
//! The default provider is a signed feature-hashing embedder (FNV-1a over
//! unigrams and bigrams) so everything runs offline and reproducibly. An
//! HTTP encoder can be plugged in for real sentence embeddings.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GroupPool;
use crate::model::ModelParams;
use crate::nn::kernels::Mlp2Cache;
use crate::nn::{Matrix, Mlp2, ShapeError};

pub const ENCODER_URL_ENV: &str = "GOA_ENCODER_URL";
pub const ENCODER_KEY_ENV: &str = "GOA_ENCODER_KEY";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("encoder endpoint not configured (set {ENCODER_URL_ENV})")]
    NotConfigured,
    #[error("encoder request failed: {0}")]
    Transport(String),
    #[error("encoder response malformed: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("candidate pool is empty")]
    EmptyPool,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = crate::nn::tensor::l2_norm(&v);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Signed hashing of unigrams and bigrams into `dim` buckets, L2-normalized.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f64> {
    let tokens = tokenize(text);
    let mut v = vec![0.0; dim];
    let mut bump = |feature: &str| {
        let h = fnv1a64(feature.as_bytes());
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[bucket] += sign;
    };
    for t in &tokens {
        bump(t);
    }
    for pair in tokens.windows(2) {
        bump(&format!("{} {}", pair[0], pair[1]));
    }
    normalize(v)
}

/// Client for an external sentence encoder.
///
/// Wire format: `POST {"texts": [...]}` answered by `{"vectors": [[...]]}`.
/// Results are memoized so repeated texts return identical vectors.
#[derive(Debug)]
pub struct ExternalEncoder {
    pub url: String,
    pub key: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

impl ExternalEncoder {
    pub fn new(url: impl Into<String>, key: Option<String>, dim: usize) -> Self {
        Self {
            url: url.into(),
            key,
            dim,
            timeout: Duration::from_secs(30),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_env(dim: usize) -> Result<Self, EmbeddingError> {
        let url = std::env::var(ENCODER_URL_ENV).map_err(|_| EmbeddingError::NotConfigured)?;
        let key = std::env::var(ENCODER_KEY_ENV).ok();
        Ok(Self::new(url, key, dim))
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.url);
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EncodeRequest { texts })
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        let body: EncodeResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbeddingError::BadResponse(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbeddingError::BadResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        for v in &body.vectors {
            if v.len() != self.dim {
                return Err(EmbeddingError::BadResponse(format!(
                    "expected dimension {}, got {}",
                    self.dim,
                    v.len()
                )));
            }
        }
        Ok(body.vectors.into_iter().map(normalize).collect())
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let v = self.request(&[text])?.remove(0);
        self.cache
            .lock()
            .unwrap()
            .entry(text.to_string())
            .or_insert(v.clone());
        Ok(v)
    }
}

#[derive(Debug)]
pub enum EmbeddingProvider {
    HashFeature { dim: usize },
    External(ExternalEncoder),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HashFeature,
    ExternalEncoder,
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Self {
        EmbeddingProvider::HashFeature { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::HashFeature { dim } => *dim,
            EmbeddingProvider::External(e) => e.dim,
        }
    }

    pub fn kind(&self) -> ProviderKind {
        match self {
            EmbeddingProvider::HashFeature { .. } => ProviderKind::HashFeature,
            EmbeddingProvider::External(_) => ProviderKind::ExternalEncoder,
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        if self.dim() == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        match self {
            EmbeddingProvider::HashFeature { dim } => Ok(hash_embed(text, *dim)),
            EmbeddingProvider::External(enc) => enc.embed(text),
        }
    }
}

/// Global task representation `z_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding {
    pub z_q: Vec<f64>,
}

/// Sentence embedding plus the task FFN activations needed for backprop.
#[derive(Debug, Clone)]
pub struct EncodedTask {
    pub embedding: TaskEmbedding,
    pub cache: Mlp2Cache,
}

/// `z_q = W2 · relu(W1 · embed(query) + b1) + b2`
pub fn encode_task(
    ffn: &Mlp2,
    provider: &EmbeddingProvider,
    query: &str,
) -> Result<EncodedTask, EmbeddingError> {
    let e = provider.embed_text(query)?;
    encode_embedded(ffn, &e)
}

pub fn encode_embedded(ffn: &Mlp2, sentence: &[f64]) -> Result<EncodedTask, EmbeddingError> {
    let cache = ffn.forward(sentence)?;
    Ok(EncodedTask {
        embedding: TaskEmbedding { z_q: cache.y.clone() },
        cache,
    })
}

/// `(K+1) × d` matrix: embedded group descriptions followed by the END row.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMatrix {
    x: Matrix,
}

impl CandidateMatrix {
    pub fn from_rows(group_rows: &[Vec<f64>], end_row: &[f64]) -> Result<Self, EmbeddingError> {
        if group_rows.is_empty() {
            return Err(EmbeddingError::EmptyPool);
        }
        let d = end_row.len();
        let mut data = Vec::with_capacity((group_rows.len() + 1) * d);
        for r in group_rows {
            if r.len() != d {
                return Err(ShapeError::new("candidate row", format!("[{d}]"), format!("[{}]", r.len())).into());
            }
            data.extend_from_slice(r);
        }
        data.extend_from_slice(end_row);
        Ok(Self {
            x: Matrix::from_vec(group_rows.len() + 1, d, data)?,
        })
    }

    /// Number of real groups K (excluding END).
    pub fn num_groups(&self) -> usize {
        self.x.rows() - 1
    }

    pub fn end_index(&self) -> usize {
        self.x.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.x.row(k)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.x
    }

    pub fn end_row(&self) -> &[f64] {
        self.x.row(self.end_index())
    }

    /// Replaces the END row, leaving group rows untouched.
    pub fn set_end_row(&mut self, end_row: &[f64]) {
        let k = self.end_index();
        self.x.row_mut(k).copy_from_slice(end_row);
    }
}

pub fn embed_pool(provider: &EmbeddingProvider, pool: &GroupPool) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    if pool.is_empty() {
        return Err(EmbeddingError::EmptyPool);
    }
    pool.groups()
        .iter()
        .map(|g| provider.embed_text(&g.description()))
        .collect()
}

/// Rows `0..K` embed the group descriptions; row `K` is the learnable END
/// embedding taken from `params`.
pub fn build_candidate_matrix(
    params: &ModelParams,
    provider: &EmbeddingProvider,
    pool: &GroupPool,
) -> Result<CandidateMatrix, EmbeddingError> {
    if provider.dim() != params.end_row.len() {
        return Err(ShapeError::new(
            "embedding provider",
            format!("dim {}", params.end_row.len()),
            format!("dim {}", provider.dim()),
        )
        .into());
    }
    let rows = embed_pool(provider, pool)?;
    CandidateMatrix::from_rows(&rows, &params.end_row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_support::*;
    use crate::graph::{GroupPool, IntraTopology};
    use crate::model::ModelConfig;
    use crate::nn::gradcheck::{finite_diff_check, FdOptions};
    use crate::nn::ParamSet;
    use rand::Rng;

    #[test]
    fn hash_embedding_is_deterministic_and_normalized() {
        let p = EmbeddingProvider::hash(64);
        for t in ["solve the equation", "Write Python code!", "a"] {
            let a = p.embed_text(t).unwrap();
            assert_eq!(a, p.embed_text(t).unwrap());
            assert!((crate::nn::tensor::l2_norm(&a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn distinct_texts_are_distinguishable() {
        let p = EmbeddingProvider::hash(384);
        let a = p.embed_text("solve the equation").unwrap();
        let b = p.embed_text("write python code").unwrap();
        assert!(crate::nn::tensor::cosine(&a, &b) < 0.99);
    }

    #[test]
    fn empty_and_symbol_only_texts() {
        let p = EmbeddingProvider::hash(16);
        assert!(matches!(p.embed_text("   "), Err(EmbeddingError::EmptyText)));
        assert_eq!(p.embed_text("?!").unwrap(), vec![0.0; 16]);
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("Hello, World-2x"), vec!["hello", "world", "2x"]);
    }

    fn random_ffn(d: usize, h: usize, seed: u64) -> Mlp2 {
        let mut rng = crate::rng::seeded(seed);
        let mut ffn = Mlp2::zeros(d, h, d);
        for (_, t) in ffn.named_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        ffn
    }

    #[test]
    fn zero_ffn_gives_zero_task_vector() {
        let p = EmbeddingProvider::hash(8);
        let ffn = Mlp2::zeros(8, 4, 8);
        assert_eq!(encode_task(&ffn, &p, "query").unwrap().embedding.z_q, vec![0.0; 8]);
    }

    #[test]
    fn output_bias_passes_through() {
        let p = EmbeddingProvider::hash(8);
        let mut ffn = random_ffn(8, 4, 1);
        ffn.l2.w.fill(0.0);
        ffn.l2.b = vec![0.75; 8];
        for q in ["one query", "another"] {
            assert_eq!(encode_task(&ffn, &p, q).unwrap().embedding.z_q, vec![0.75; 8]);
        }
    }

    #[test]
    fn dimension_mismatch_is_configuration_error() {
        let p = EmbeddingProvider::hash(8);
        let ffn = Mlp2::zeros(6, 4, 6);
        assert!(matches!(encode_task(&ffn, &p, "q"), Err(EmbeddingError::Shape(_))));
    }

    #[test]
    fn task_encoder_gradient_matches_finite_differences() {
        let d = 12;
        let p = EmbeddingProvider::hash(d);
        let ffn = random_ffn(d, 6, 9);
        let loss = |f: &Mlp2| -> f64 {
            let z = encode_task(f, &p, "find the prime factors of 391").unwrap().embedding.z_q;
            z.iter().map(|v| v * v).sum()
        };
        let enc = encode_task(&ffn, &p, "find the prime factors of 391").unwrap();
        let grad_y: Vec<f64> = enc.embedding.z_q.iter().map(|v| 2.0 * v).collect();
        let mut grads = ffn.zeros_like();
        ffn.backward(&enc.cache, &grad_y, &mut grads);
        let report = finite_diff_check(loss, &ffn, &grads, FdOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn candidate_matrix_shapes() {
        let pool16 = GroupPool::new(
            (0..16)
                .map(|i| group(i, &format!("g{i}"), &["r"], IntraTopology::Single))
                .collect(),
        )
        .unwrap();
        let params = ModelParams::zeros(&ModelConfig::new(384, 8, 16));
        let m = build_candidate_matrix(&params, &EmbeddingProvider::hash(384), &pool16).unwrap();
        assert_eq!(m.matrix().shape(), (17, 384));
        assert_eq!(m.end_index(), 16);

        let params = ModelParams::zeros(&ModelConfig::new(8, 4, 1));
        let m = build_candidate_matrix(&params, &EmbeddingProvider::hash(8), &simple_pool(1)).unwrap();
        assert_eq!(m.matrix().shape(), (2, 8));
    }

    #[test]
    fn identical_descriptions_give_identical_rows_and_end_row_tracks_params() {
        let mut a = group(0, "same", &["r"], IntraTopology::Single);
        let mut b = a.clone();
        b.id = 1;
        a.id = 0;
        let pool = GroupPool::new(vec![a, b]).unwrap();
        let provider = EmbeddingProvider::hash(8);
        let mut params = ModelParams::zeros(&ModelConfig::new(8, 4, 2));
        let m1 = build_candidate_matrix(&params, &provider, &pool).unwrap();
        assert_eq!(m1.row(0), m1.row(1));
        params.end_row = vec![0.5; 8];
        let m2 = build_candidate_matrix(&params, &provider, &pool).unwrap();
        assert_eq!(m1.row(0), m2.row(0));
        assert_ne!(m1.end_row(), m2.end_row());
        assert_eq!(m2.end_row(), &[0.5; 8][..]);
    }
}
