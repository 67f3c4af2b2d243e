//! Semantic text encoders, cosine similarity and a persistent embedding cache.
//!
//! [`HashedNgramEncoder`] is the offline reference encoder. [`RemoteEncoder`]
//! talks to an embedding service over HTTP with the JSON protocol
//! `{"texts": [..]}` → `{"vectors": [[..], ..]}`. [`CachedEncoder`] puts an
//! [`EmbeddingCache`] in front of either.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hashing;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding dimension must be at least {min}, got {got}")]
    DimensionTooSmall { min: usize, got: usize },
    #[error("embedding provider request failed after {attempts} attempts: {message}")]
    Provider { attempts: usize, message: String },
    #[error("embedding provider returned {got} vectors for {expected} texts")]
    ResponseLength { expected: usize, got: usize },
    #[error("embedding cache: {0}")]
    Cache(#[from] CacheError),
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} is not an embedding cache (bad magic)")]
    BadMagic(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EncodeError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncodeError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EncodeError> {
    if u.dim() != v.dim() {
        return Err(EncodeError::DimensionMismatch(u.dim(), v.dim()));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.values.iter().zip(&v.values) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// A deterministic text → vector map with constant output dimension.
pub trait SemanticEncoder: Send + Sync {
    /// Identifies the encoder (and its configuration) in cache keys.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError>;

    /// Order-stable batch encoding.
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EncodeError> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

impl<E: SemanticEncoder + ?Sized> SemanticEncoder for Arc<E> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        (**self).encode(text)
    }
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EncodeError> {
        (**self).encode_batch(texts)
    }
}

impl<E: SemanticEncoder + ?Sized> SemanticEncoder for &E {
    fn id(&self) -> String {
        (**self).id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        (**self).encode(text)
    }
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EncodeError> {
        (**self).encode_batch(texts)
    }
}

/// Cosine of the two encodings.
pub fn semantic_similarity<E: SemanticEncoder + ?Sized>(encoder: &E, a: &str, b: &str) -> Result<f64, EncodeError> {
    cosine(&encoder.encode(a)?, &encoder.encode(b)?)
}

/// Bag of lowercased character 3-5-grams hashed into `dim` buckets, L2-normalized.
///
/// The text is padded with one space on each side so that every non-empty
/// string yields at least one n-gram.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedNgramEncoder {
    dim: usize,
}

impl HashedNgramEncoder {
    pub const MIN_DIM: usize = 16;

    pub fn new(dim: usize) -> Result<Self, EncodeError> {
        if dim < Self::MIN_DIM {
            return Err(EncodeError::DimensionTooSmall { min: Self::MIN_DIM, got: dim });
        }
        Ok(Self { dim })
    }

    /// Unnormalized bucket counts.
    fn counts(&self, text: &str) -> Vec<f64> {
        let mut counts = vec![0.0f64; self.dim];
        if text.is_empty() {
            return counts;
        }
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(' '))
            .collect();
        let mut buf = String::new();
        for n in 3..=5 {
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window);
                counts[hashing::bucket(hashing::fnv1a(buf.as_bytes()), self.dim)] += 1.0;
            }
        }
        counts
    }
}

impl SemanticEncoder for HashedNgramEncoder {
    fn id(&self) -> String {
        format!("hashed-ngram-3-5/{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        let counts = self.counts(text);
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(EmbeddingVector::zeros(self.dim));
        }
        EmbeddingVector::new(counts.iter().map(|c| (c / norm) as f32).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Client for an HTTP embedding service.
///
/// One POST per batch; transport failures and 5xx responses are retried with
/// exponential backoff.
pub struct RemoteEncoder {
    url: String,
    dim: usize,
    attempts: usize,
    backoff: Duration,
    agent: ureq::Agent,
}

impl RemoteEncoder {
    pub fn new(url: impl Into<String>, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: url.into(), dim, attempts: 3, backoff: Duration::from_millis(250), agent }
    }

    pub fn with_retry(mut self, attempts: usize, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    fn request(&self, texts: &[&str]) -> Result<EmbedResponse, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&EmbedRequest { texts })
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut().read_json::<EmbedResponse>().map_err(|e| e.to_string())
    }
}

impl SemanticEncoder for RemoteEncoder {
    fn id(&self) -> String {
        format!("remote:{}/{}", self.url, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        Ok(self.encode_batch(&[text])?.remove(0))
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EncodeError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut last_error = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * (1 << (attempt - 1)));
            }
            match self.request(texts) {
                Ok(resp) => {
                    if resp.vectors.len() != texts.len() {
                        return Err(EncodeError::ResponseLength { expected: texts.len(), got: resp.vectors.len() });
                    }
                    return resp
                        .vectors
                        .into_iter()
                        .map(|v| {
                            if v.len() != self.dim {
                                return Err(EncodeError::DimensionMismatch(self.dim, v.len()));
                            }
                            EmbeddingVector::new(v)
                        })
                        .collect();
                }
                Err(e) => {
                    log::warn!("embedding request to {} failed (attempt {}): {e}", self.url, attempt + 1);
                    last_error = e;
                }
            }
        }
        Err(EncodeError::Provider { attempts: self.attempts, message: last_error })
    }
}

const CACHE_MAGIC: &[u8; 5] = b"DNEC1";

pub type CacheKey = [u8; 32];

/// Append-only embedding store.
///
/// File layout: `DNEC1`, then records of (32-byte digest, u32 LE dim,
/// dim × f32 LE). The digest is SHA-256 over the encoder id, a NUL byte and
/// the text. A truncated trailing record is dropped on open.
pub struct EmbeddingCache {
    path: PathBuf,
    index: RwLock<HashMap<CacheKey, EmbeddingVector>>,
    writer: Mutex<File>,
}

impl EmbeddingCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CacheError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| CacheError::Io { path: path.clone(), source };
        let mut index = HashMap::new();
        if path.exists() {
            let mut bytes = Vec::new();
            File::open(&path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io)?;
            if bytes.len() < CACHE_MAGIC.len() || &bytes[..CACHE_MAGIC.len()] != CACHE_MAGIC {
                return Err(CacheError::BadMagic(path));
            }
            let mut pos = CACHE_MAGIC.len();
            while let Some((key, vector, next)) = read_record(&bytes, pos) {
                index.insert(key, vector);
                pos = next;
            }
            if pos < bytes.len() {
                log::warn!("{}: dropping {} trailing bytes of a truncated record", path.display(), bytes.len() - pos);
                OpenOptions::new().write(true).open(&path).and_then(|f| f.set_len(pos as u64)).map_err(io)?;
            }
        } else {
            let mut f = File::create(&path).map_err(io)?;
            f.write_all(CACHE_MAGIC).map_err(io)?;
        }
        let writer = OpenOptions::new().append(true).open(&path).map_err(io)?;
        Ok(Self { path, index: RwLock::new(index), writer: Mutex::new(writer) })
    }

    pub fn key(encoder_id: &str, text: &str) -> CacheKey {
        let mut hasher = Sha256::new();
        hasher.update(encoder_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        hasher.finalize().into()
    }

    pub fn get(&self, key: &CacheKey) -> Option<EmbeddingVector> {
        self.index.read().expect("cache index poisoned").get(key).cloned()
    }

    pub fn insert(&self, key: CacheKey, vector: &EmbeddingVector) -> Result<(), CacheError> {
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        if self.index.read().expect("cache index poisoned").contains_key(&key) {
            return Ok(());
        }
        let mut record = Vec::with_capacity(36 + 4 * vector.dim());
        record.extend_from_slice(&key);
        record.extend_from_slice(&(vector.dim() as u32).to_le_bytes());
        for v in vector.values() {
            record.extend_from_slice(&v.to_le_bytes());
        }
        writer
            .write_all(&record)
            .and_then(|_| writer.flush())
            .map_err(|source| CacheError::Io { path: self.path.clone(), source })?;
        self.index.write().expect("cache index poisoned").insert(key, vector.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn read_record(bytes: &[u8], pos: usize) -> Option<(CacheKey, EmbeddingVector, usize)> {
    let header_end = pos.checked_add(36)?;
    if header_end > bytes.len() {
        return None;
    }
    let key: CacheKey = bytes[pos..pos + 32].try_into().ok()?;
    let dim = u32::from_le_bytes(bytes[pos + 32..header_end].try_into().ok()?) as usize;
    let end = header_end.checked_add(dim.checked_mul(4)?)?;
    if end > bytes.len() {
        return None;
    }
    let values = bytes[header_end..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Some((key, EmbeddingVector { values }, end))
}

/// An encoder backed by an [`EmbeddingCache`].
pub struct CachedEncoder<E> {
    inner: E,
    cache: Arc<EmbeddingCache>,
}

impl<E: SemanticEncoder> CachedEncoder<E> {
    pub fn new(inner: E, cache: Arc<EmbeddingCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }
}

impl<E: SemanticEncoder> SemanticEncoder for CachedEncoder<E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        let key = EmbeddingCache::key(&self.inner.id(), text);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let vector = self.inner.encode(text)?;
        self.cache.insert(key, &vector)?;
        Ok(vector)
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EncodeError> {
        let id = self.inner.id();
        let keys: Vec<CacheKey> = texts.iter().map(|t| EmbeddingCache::key(&id, t)).collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys.iter().map(|k| self.cache.get(k)).collect();
        let misses: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let miss_texts: Vec<&str> = misses.iter().map(|&i| texts[i]).collect();
            let fresh = self.inner.encode_batch(&miss_texts)?;
            for (&i, vector) in misses.iter().zip(fresh) {
                self.cache.insert(keys[i], &vector)?;
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hashed_encoder_examples() {
        let enc = HashedNgramEncoder::new(64).unwrap();
        assert_eq!(enc.encode("abc").unwrap(), enc.encode("abc").unwrap());
        assert_eq!(enc.encode("").unwrap().norm(), 0.0);
        let s = enc.encode("Mary traveled to New York").unwrap();
        assert!((cosine(&s, &s).unwrap() - 1.0).abs() < 1e-9);
        assert!((enc.encode("a").unwrap().norm() - 1.0).abs() < 1e-6);
        assert!(HashedNgramEncoder::new(8).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&ev(&[1.0, 1.0]), &ev(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(cosine(&ev(&[1.0]), &ev(&[1.0, 0.0])), Err(EncodeError::DimensionMismatch(1, 2))));
        assert!(EmbeddingVector::new(vec![f32::NAN]).is_err());
    }

    #[test]
    fn semantic_similarity_examples() {
        let enc = HashedNgramEncoder::new(128).unwrap();
        assert!((semantic_similarity(&enc, "the cat sat", "the cat sat").unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(semantic_similarity(&enc, "", "the cat sat").unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn semantic_similarity_is_symmetric_and_bounded(a in ".{0,40}", b in ".{0,40}") {
            let enc = HashedNgramEncoder::new(64).unwrap();
            let ab = semantic_similarity(&enc, &a, &b).unwrap();
            let ba = semantic_similarity(&enc, &b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
        }

        #[test]
        fn cosine_bounded(u in proptest::collection::vec(-10.0f32..10.0, 8), v in proptest::collection::vec(-10.0f32..10.0, 8)) {
            let c = cosine(&ev(&u), &ev(&v)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn cache_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let enc = HashedNgramEncoder::new(32).unwrap();
        let original = enc.encode("New York").unwrap();
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert(EmbeddingCache::key(&enc.id(), "New York"), &original).unwrap();
            cache.insert(EmbeddingCache::key(&enc.id(), "New York"), &original).unwrap();
            assert_eq!(cache.len(), 1);
        }
        let len_one = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len_one, 5 + 32 + 4 + 32 * 4);
        // simulate a crash mid-append
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[1, 2, 3]).unwrap();
        drop(f);

        let cache = EmbeddingCache::open(&path).unwrap();
        let hit = cache.get(&EmbeddingCache::key(&enc.id(), "New York")).unwrap();
        assert_eq!(hit.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   original.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(std::fs::metadata(&path).unwrap().len(), len_one);
    }

    #[test]
    fn cache_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"hello").unwrap();
        assert!(matches!(EmbeddingCache::open(&path), Err(CacheError::BadMagic(_))));
    }

    #[test]
    fn cached_encoder_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(EmbeddingCache::open(dir.path().join("c")).unwrap());
        let enc = HashedNgramEncoder::new(64).unwrap();
        let cached = CachedEncoder::new(enc.clone(), cache.clone());
        let texts = ["alpha beta", "gamma", "alpha beta", ""];
        let first = cached.encode_batch(&texts).unwrap();
        let second = cached.encode_batch(&texts).unwrap();
        let direct = enc.encode_batch(&texts).unwrap();
        assert_eq!(first, direct);
        assert_eq!(second, direct);
        assert_eq!(cache.len(), 3);
        assert_eq!(cached.encode("gamma").unwrap(), direct[1]);
    }
}
