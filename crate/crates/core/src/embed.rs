//! Embeddings, prompt similarity and clarity scoring.
//!
//! Providers turn images and prompt strings into unit-norm vectors. Three are
//! available: a seeded hashing provider for tests and offline runs, an HTTP
//! client for the embedding sidecar, and a lookup over a precomputed EBAE file.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default embedding width (ViT-B/32 class models).
pub const DEFAULT_DIM: usize = 512;
/// Logit scale applied to cosine similarities before the softmax.
pub const LOGIT_SCALE: f64 = 100.0;
/// Default prompt prefix.
pub const DEFAULT_PROMPT_PREFIX: &str = "a photo of ";
/// Key prefix under which prompt embeddings are stored in EBAE files.
pub const PROMPT_KEY_PREFIX: &str = "prompt:";

const EBAE_MAGIC: [u8; 4] = *b"EBAE";
const EBAE_VERSION: u32 = 1;
const UNIT_TOLERANCE: f64 = 1e-3;
// Components are stored as f32; vectors already this close to unit norm are
// kept bit-for-bit on load.
const RENORM_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding has zero norm")]
    ZeroNormEmbedding,
    #[error("embedding has non-finite components")]
    NonFinite,
    #[error("embedding is not unit norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("bad magic, not an EBAE file")]
    BadMagic,
    #[error("unsupported EBAE version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated EBAE record")]
    TruncatedRecord,
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("id too long for EBAE record ({0} bytes)")]
    IdTooLong(usize),
    #[error("no embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid provider response: {0}")]
    InvalidResponse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalises `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = l2(&values)?;
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    /// Accepts a vector that is already unit norm within `1e-3`.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = l2(&values)?;
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(EmbedError::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn l2(values: &[f64]) -> Result<f64, EmbedError> {
    if values.is_empty() {
        return Err(EmbedError::ZeroNormEmbedding);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroNormEmbedding);
    }
    Ok(norm)
}

/// Cosine similarity of two unit embeddings, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Water conditions scored against every image, in table order.
pub const CONDITIONS: [&str; 5] = [
    "clear water",
    "murky water",
    "high turbidity",
    "deep-sea environment",
    "artificial lighting",
];

/// Column headings used when rendering condition tables.
pub const CONDITION_HEADINGS: [&str; 5] = [
    "Clear Water",
    "Murky Water",
    "High Turbidity",
    "Deep Sea",
    "Artificial Lighting",
];

/// The five condition prompts and their embeddings.
#[derive(Debug, Clone)]
pub struct PromptSet {
    prompts: [String; 5],
    embeddings: [Embedding; 5],
}

impl PromptSet {
    /// Prompt strings for a prefix, in condition order.
    pub fn prompt_texts(prefix: &str) -> [String; 5] {
        CONDITIONS.map(|c| format!("{prefix}{c}"))
    }

    pub fn new(prompts: [String; 5], embeddings: [Embedding; 5]) -> Result<Self, EmbedError> {
        let dim = embeddings[0].dim();
        if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
            return Err(EmbedError::DimMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        Ok(Self { prompts, embeddings })
    }

    pub fn from_provider(provider: &dyn EmbeddingProvider, prefix: &str) -> Result<Self, EmbedError> {
        let prompts = Self::prompt_texts(prefix);
        let mut embs = Vec::with_capacity(5);
        for p in &prompts {
            embs.push(provider.embed_text(p)?);
        }
        let embeddings: [Embedding; 5] = embs.try_into().expect("five prompts");
        Self::new(prompts, embeddings)
    }

    pub fn prompts(&self) -> &[String; 5] {
        &self.prompts
    }

    pub fn embeddings(&self) -> &[Embedding; 5] {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].dim()
    }
}

/// Cosine similarities to the five condition prompts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityProfile {
    pub scores: [f64; 5],
}

impl SimilarityProfile {
    pub fn clear_water(&self) -> f64 {
        self.scores[0]
    }
}

pub fn similarity_profile(img: &Embedding, prompts: &PromptSet) -> Result<SimilarityProfile, EmbedError> {
    let mut scores = [0.0; 5];
    for (s, p) in scores.iter_mut().zip(prompts.embeddings()) {
        *s = cosine(img, p)?;
    }
    Ok(SimilarityProfile { scores })
}

/// Clear-water probability of a softmax over the scaled similarities.
pub fn clarity_score(profile: &SimilarityProfile) -> f64 {
    let logits = profile.scores.map(|s| LOGIT_SCALE * s);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|l| (l - max).exp());
    let total: f64 = exps.iter().sum();
    exps[0] / total
}

/// Source of image and text embeddings.
///
/// Implementations must be deterministic per instance and safe to call from
/// several threads.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_image(&self, id: &str, path: &Path) -> Result<Embedding, EmbedError>;
    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError>;
    /// Short description recorded in reports.
    fn describe(&self) -> String;
}

/// Seeded provider that hashes `(seed, id)` to a direction on the unit sphere.
#[derive(Debug, Clone)]
pub struct TestProvider {
    seed: u64,
    dim: usize,
}

pub fn test_provider(seed: u64) -> TestProvider {
    TestProvider {
        seed,
        dim: DEFAULT_DIM,
    }
}

impl TestProvider {
    pub fn with_dim(seed: u64, dim: usize) -> Self {
        Self { seed, dim: dim.max(1) }
    }

    fn direction(&self, kind: u8, key: &str) -> Embedding {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([kind]);
        h.update(key.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(e) = Embedding::normalized(v) {
                return e;
            }
        }
    }
}

impl EmbeddingProvider for TestProvider {
    fn embed_image(&self, id: &str, _path: &Path) -> Result<Embedding, EmbedError> {
        Ok(self.direction(b'i', id))
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        Ok(self.direction(b't', text))
    }

    fn describe(&self) -> String {
        format!("test(seed={}, dim={})", self.seed, self.dim)
    }
}

/// Embeddings loaded from an EBAE file, in file order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub embeddings: IndexMap<String, Embedding>,
    /// Norm of each record as stored, before re-normalisation.
    pub source_norms: IndexMap<String, f64>,
}

impl EmbeddingTable {
    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.embeddings.get(id)
    }

    pub fn prompt_key(text: &str) -> String {
        format!("{PROMPT_KEY_PREFIX}{text}")
    }
}

/// Serves embeddings from a loaded table, optionally falling back to another provider.
pub struct PrecomputedProvider {
    table: EmbeddingTable,
    fallback: Option<Box<dyn EmbeddingProvider>>,
}

impl PrecomputedProvider {
    pub fn new(table: EmbeddingTable, fallback: Option<Box<dyn EmbeddingProvider>>) -> Self {
        Self { table, fallback }
    }
}

impl EmbeddingProvider for PrecomputedProvider {
    fn embed_image(&self, id: &str, path: &Path) -> Result<Embedding, EmbedError> {
        match (self.table.get(id), &self.fallback) {
            (Some(e), _) => Ok(e.clone()),
            (None, Some(f)) => f.embed_image(id, path),
            (None, None) => Err(EmbedError::MissingEmbedding(id.to_string())),
        }
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        match (self.table.get(&EmbeddingTable::prompt_key(text)), &self.fallback) {
            (Some(e), _) => Ok(e.clone()),
            (None, Some(f)) => f.embed_text(text),
            (None, None) => Err(EmbedError::MissingEmbedding(EmbeddingTable::prompt_key(text))),
        }
    }

    fn describe(&self) -> String {
        match &self.fallback {
            Some(f) => format!("precomputed(dim={}) + {}", self.table.dim, f.describe()),
            None => format!("precomputed(dim={})", self.table.dim),
        }
    }
}

/// Counting semaphore bounding in-flight sidecar requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Deserialize)]
struct WireEmbedding {
    dim: usize,
    embedding: Vec<f64>,
    #[serde(default)]
    model: String,
}

/// HTTP client for the embedding sidecar.
pub struct RemoteProvider {
    base: String,
    agent: ureq::Agent,
    gate: Gate,
    max_in_flight: usize,
}

impl RemoteProvider {
    pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

    pub fn new(base_url: &str, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        let max_in_flight = max_in_flight.max(1);
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            gate: Gate {
                free: Mutex::new(max_in_flight),
                cv: Condvar::new(),
            },
            max_in_flight,
        }
    }

    /// `GET /health`; returns the reported embedding dimension.
    pub fn health(&self) -> Result<usize, EmbedError> {
        let _g = self.gate.acquire();
        let mut resp = self
            .agent
            .get(format!("{}/health", self.base))
            .call()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| EmbedError::InvalidResponse(e.to_string()))?;
        if v.get("status").and_then(|s| s.as_str()) != Some("ok") {
            return Err(EmbedError::ProviderUnavailable(format!("health: {text}")));
        }
        v.get("dim")
            .and_then(|d| d.as_u64())
            .map(|d| d as usize)
            .ok_or_else(|| EmbedError::InvalidResponse("health response without dim".into()))
    }

    fn decode(text: &str) -> Result<Embedding, EmbedError> {
        let wire: WireEmbedding =
            serde_json::from_str(text).map_err(|e| EmbedError::InvalidResponse(e.to_string()))?;
        if wire.embedding.len() != wire.dim {
            return Err(EmbedError::DimMismatch {
                expected: wire.dim,
                got: wire.embedding.len(),
            });
        }
        let _ = wire.model;
        Embedding::normalized(wire.embedding)
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn embed_image(&self, _id: &str, path: &Path) -> Result<Embedding, EmbedError> {
        let bytes = fs::read(path).map_err(|source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let _g = self.gate.acquire();
        let mut resp = self
            .agent
            .post(format!("{}/embed_image", self.base))
            .header("Content-Type", "application/octet-stream")
            .send(&bytes[..])
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        Self::decode(&text)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        let body = serde_json::json!({ "text": text }).to_string();
        let _g = self.gate.acquire();
        let mut resp = self
            .agent
            .post(format!("{}/embed_text", self.base))
            .header("Content-Type", "application/json")
            .send(body.as_bytes())
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        Self::decode(&text)
    }

    fn describe(&self) -> String {
        format!("remote({}, max_in_flight={})", self.base, self.max_in_flight)
    }
}

/// Encodes embeddings in EBAE layout.
pub fn encode_embeddings(map: &IndexMap<String, Embedding>) -> Result<Vec<u8>, EmbedError> {
    let dim = map.values().next().map_or(DEFAULT_DIM, Embedding::dim);
    let mut out = Vec::with_capacity(12 + map.len() * (dim * 4 + 16));
    out.extend_from_slice(&EBAE_MAGIC);
    out.extend_from_slice(&EBAE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, e) in map {
        if e.dim() != dim {
            return Err(EmbedError::DimMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        let idb = id.as_bytes();
        let len = u16::try_from(idb.len()).map_err(|_| EmbedError::IdTooLong(idb.len()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(idb);
        for v in e.values() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes an EBAE byte stream, re-normalising records that drifted from unit norm.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingTable, EmbedError> {
    if bytes.len() < 4 || bytes[..4] != EBAE_MAGIC {
        return Err(EmbedError::BadMagic);
    }
    let mut cur = &bytes[4..];
    let version = read_u32(&mut cur)?;
    if version != EBAE_VERSION {
        return Err(EmbedError::UnsupportedVersion(version));
    }
    let dim = read_u32(&mut cur)? as usize;
    let mut table = EmbeddingTable {
        dim,
        ..Default::default()
    };
    while !cur.is_empty() {
        let mut lenb = [0u8; 2];
        cur.read_exact(&mut lenb).map_err(|_| EmbedError::TruncatedRecord)?;
        let len = u16::from_le_bytes(lenb) as usize;
        if cur.len() < len + dim * 4 {
            return Err(EmbedError::TruncatedRecord);
        }
        let id = std::str::from_utf8(&cur[..len])
            .map_err(|_| EmbedError::InvalidResponse("record id is not UTF-8".into()))?
            .to_string();
        cur = &cur[len..];
        let values: Vec<f64> = cur[..dim * 4]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        cur = &cur[dim * 4..];
        let norm = l2(&values)?;
        let emb = if (norm - 1.0).abs() <= RENORM_SLACK {
            Embedding { values }
        } else {
            Embedding::normalized(values)?
        };
        if table.embeddings.insert(id.clone(), emb).is_some() {
            return Err(EmbedError::DuplicateId(id));
        }
        table.source_norms.insert(id, norm);
    }
    Ok(table)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32, EmbedError> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| EmbedError::TruncatedRecord)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_embeddings_file(path: &Path) -> Result<EmbeddingTable, EmbedError> {
    let bytes = fs::read(path).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_embeddings(&bytes)
}

/// Writes an EBAE file atomically (temp file + rename).
pub fn write_embeddings_file(map: &IndexMap<String, Embedding>, path: &Path) -> Result<(), EmbedError> {
    let bytes = encode_embeddings(map)?;
    write_atomic(path, &bytes).map_err(|source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = unit(&[1.0, 0.0, 0.0]);
        let b = unit(&[0.0, 1.0, 0.0]);
        let na = unit(&[-1.0, 0.0, 0.0]);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine(&a, &na).unwrap(), -1.0);
        assert!(matches!(
            cosine(&a, &unit(&[1.0, 0.0])),
            Err(EmbedError::DimMismatch { .. })
        ));
    }

    #[test]
    fn clarity_examples() {
        let eq = SimilarityProfile { scores: [0.3; 5] };
        assert!((clarity_score(&eq) - 0.2).abs() < 1e-15);

        let dom = SimilarityProfile {
            scores: [1.0, 0.0, 0.0, 0.0, 0.0],
        };
        let expect = 1.0 / (1.0 + 4.0 * (-100.0f64).exp());
        assert!((clarity_score(&dom) - expect).abs() < 1e-12);

        // LSUI400 row of the condition table; softmax evaluated by hand:
        // logits 25.6, 24.2, 23.6, 25.6, 20.3 -> shift by 25.6:
        // 1 / (1 + e^-1.4 + e^-2.0 + 1 + e^-5.3)
        let row = SimilarityProfile {
            scores: [0.256, 0.242, 0.236, 0.256, 0.203],
        };
        let hand = 1.0 / (2.0 + (-1.4f64).exp() + (-2.0f64).exp() + (-5.3f64).exp());
        assert!((hand - 0.418_949_269_678_158_76).abs() < 1e-12);
        assert!((clarity_score(&row) - hand).abs() < 1e-12);
    }

    #[test]
    fn profile_of_prompt_itself() {
        let p = test_provider(3);
        let prompts = PromptSet::from_provider(&p, DEFAULT_PROMPT_PREFIX).unwrap();
        let prof = similarity_profile(&prompts.embeddings()[0], &prompts).unwrap();
        assert!((prof.scores[0] - 1.0).abs() < 1e-12);
        assert_eq!(prompts.prompts()[3], "a photo of deep-sea environment");
    }

    #[test]
    fn test_provider_contract() {
        let p = test_provider(42);
        let a = p.embed_image("2330", Path::new("unused")).unwrap();
        let b = p.embed_image("2330", Path::new("other")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 512);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        let mut close = 0;
        for i in 0..1000 {
            let x = p.embed_image(&format!("a{i}"), Path::new("")).unwrap();
            let y = p.embed_image(&format!("b{i}"), Path::new("")).unwrap();
            if cosine(&x, &y).unwrap() >= 0.999 {
                close += 1;
            }
        }
        assert_eq!(close, 0);
        // Text and image namespaces differ.
        assert_ne!(p.embed_text("2330").unwrap(), a);
    }

    #[test]
    fn ebae_round_trip_is_bit_exact() {
        let p = test_provider(1);
        let mut map = IndexMap::new();
        for id in ["x", "yy", "zzz"] {
            map.insert(id.to_string(), p.embed_image(id, Path::new("")).unwrap());
        }
        let bytes = encode_embeddings(&map).unwrap();
        let table = decode_embeddings(&bytes).unwrap();
        assert_eq!(table.dim, 512);
        assert_eq!(table.embeddings.keys().collect::<Vec<_>>(), vec!["x", "yy", "zzz"]);
        for (id, e) in &map {
            let back = &table.embeddings[id];
            for (a, b) in e.values().iter().zip(back.values()) {
                assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
                assert_eq!(f64::from(*a as f32), *b);
            }
        }
        assert_eq!(encode_embeddings(&table.embeddings).unwrap(), bytes);
    }

    #[test]
    fn ebae_errors() {
        assert!(matches!(decode_embeddings(b"EBAX\x01\0\0\0"), Err(EmbedError::BadMagic)));
        let mut hdr = b"EBAE".to_vec();
        hdr.extend(1u32.to_le_bytes());
        hdr.extend(2u32.to_le_bytes());
        let mut zero = hdr.clone();
        zero.extend(1u16.to_le_bytes());
        zero.push(b'a');
        zero.extend(0f32.to_le_bytes());
        zero.extend(0f32.to_le_bytes());
        assert!(matches!(decode_embeddings(&zero), Err(EmbedError::ZeroNormEmbedding)));
        let mut trunc = hdr.clone();
        trunc.extend(1u16.to_le_bytes());
        trunc.push(b'a');
        trunc.extend(1f32.to_le_bytes());
        assert!(matches!(decode_embeddings(&trunc), Err(EmbedError::TruncatedRecord)));
        let mut v2 = b"EBAE".to_vec();
        v2.extend(2u32.to_le_bytes());
        v2.extend(2u32.to_le_bytes());
        assert!(matches!(decode_embeddings(&v2), Err(EmbedError::UnsupportedVersion(2))));
    }

    #[test]
    fn loader_renormalises_and_records_norm() {
        let mut b = b"EBAE".to_vec();
        b.extend(1u32.to_le_bytes());
        b.extend(2u32.to_le_bytes());
        b.extend(1u16.to_le_bytes());
        b.push(b'q');
        b.extend(3f32.to_le_bytes());
        b.extend(4f32.to_le_bytes());
        let t = decode_embeddings(&b).unwrap();
        assert_eq!(t.source_norms["q"], 5.0);
        assert_eq!(t.embeddings["q"].values(), &[0.6, 0.8]);
    }

    #[test]
    fn writer_rejects_mixed_dims() {
        let mut map = IndexMap::new();
        map.insert("a".to_string(), unit(&[1.0, 0.0]));
        map.insert("b".to_string(), unit(&[1.0, 0.0, 0.0]));
        assert!(matches!(encode_embeddings(&map), Err(EmbedError::DimMismatch { .. })));
    }

    #[test]
    fn precomputed_provider_lookup() {
        let p = test_provider(9);
        let mut map = IndexMap::new();
        map.insert("img".to_string(), p.embed_image("img", Path::new("")).unwrap());
        let key = EmbeddingTable::prompt_key("a photo of clear water");
        map.insert(key, p.embed_text("a photo of clear water").unwrap());
        let table = decode_embeddings(&encode_embeddings(&map).unwrap()).unwrap();
        let pre = PrecomputedProvider::new(table, None);
        assert!(pre.embed_image("img", Path::new("")).is_ok());
        assert!(pre.embed_text("a photo of clear water").is_ok());
        assert!(matches!(
            pre.embed_image("nope", Path::new("")),
            Err(EmbedError::MissingEmbedding(_))
        ));
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 8), b in proptest::collection::vec(-1.0f64..1.0, 8)) {
            prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
            let (a, b) = (unit(&a), unit(&b));
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn clarity_shift_invariant(s in proptest::array::uniform5(-1.0f64..1.0), c in -0.5f64..0.5) {
            let base = clarity_score(&SimilarityProfile { scores: s });
            let shifted = clarity_score(&SimilarityProfile { scores: s.map(|v| v + c) });
            prop_assert!((base - shifted).abs() < 1e-9);
            // strictly inside (0,1) mathematically; f64 saturates at 1 for large gaps
            prop_assert!(base > 0.0 && base <= 1.0);
        }

        #[test]
        fn clarity_increases_with_clear_water(s in proptest::array::uniform5(-0.3f64..0.3), d in 0.001f64..0.2) {
            let lo = clarity_score(&SimilarityProfile { scores: s });
            let mut up = s;
            up[0] += d;
            let hi = clarity_score(&SimilarityProfile { scores: up });
            // once the softmax has rounded to 1 it cannot grow further
            prop_assert!(hi > lo || (lo == 1.0 && hi == 1.0));
        }
    }
}
