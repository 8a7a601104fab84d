//! Artifact persistence: the workspace directory layout, a content-addressed
//! cache with integrity checks, binary activation containers, vector files,
//! CSV tables, and append-only run manifests.
//!
//! Layout under the workspace root:
//! `datasets/  activations/  vectors/  reports/  manifests/  cache/`
//!
//! All floating-point payloads are stored as little-endian float32 so files
//! are byte-stable across platforms. Timestamps never enter data artifacts;
//! they live in sidecars and manifests.

use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activations::ActivationSet;
use crate::critique::CritiqueVector;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("I/O failure at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {kind} file {path}: {reason}")]
    Malformed {
        kind: &'static str,
        path: String,
        reason: String,
    },
    #[error("cache integrity violation for key {key}: stored hash {stored}, payload hash {actual}")]
    Integrity {
        key: String,
        stored: String,
        actual: String,
    },
    #[error("cache key {0} written twice with different content")]
    ConflictingStore(String),
    #[error("no manifest at {0}")]
    NoManifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension()
            .map(|e| e.to_string_lossy().to_string())
            .unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// The experiment workspace.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PersistError> {
        let root = root.into();
        for sub in [
            "datasets",
            "activations",
            "vectors",
            "reports",
            "manifests",
            "cache",
        ] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn activations(&self) -> PathBuf {
        self.root.join("activations")
    }

    pub fn vectors(&self) -> PathBuf {
        self.root.join("vectors")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    fn cache_paths(&self, key: &CacheKey) -> (PathBuf, PathBuf) {
        let dir = self.root.join("cache").join(&key.0[..2]);
        (
            dir.join(format!("{}.bin", key.0)),
            dir.join(format!("{}.json", key.0)),
        )
    }

    /// Store an artifact under a content-derived key. Idempotent for equal
    /// content; a second store with different content is an error.
    pub fn cache_store(&self, key: &CacheKey, payload: &[u8]) -> Result<PathBuf, PersistError> {
        let (bin, meta) = self.cache_paths(key);
        let payload_hash = sha256_hex(payload);
        if bin.exists() {
            let existing = std::fs::read(&bin).map_err(io_err(&bin))?;
            if sha256_hex(&existing) == payload_hash {
                return Ok(bin);
            }
            return Err(PersistError::ConflictingStore(key.0.clone()));
        }
        write_atomic(&bin, payload)?;
        let meta_body = serde_json::to_vec_pretty(&CacheMeta {
            payload_sha256: payload_hash,
        })
        .expect("meta serializes");
        write_atomic(&meta, &meta_body)?;
        Ok(bin)
    }

    /// Load an artifact; `Ok(None)` is an explicit miss, a hash mismatch is
    /// an integrity error, never silent reuse.
    pub fn cache_load(&self, key: &CacheKey) -> Result<Option<Vec<u8>>, PersistError> {
        let (bin, meta) = self.cache_paths(key);
        if !bin.exists() || !meta.exists() {
            return Ok(None);
        }
        let payload = std::fs::read(&bin).map_err(io_err(&bin))?;
        let meta_body = std::fs::read_to_string(&meta).map_err(io_err(&meta))?;
        let meta: CacheMeta =
            serde_json::from_str(&meta_body).map_err(|e| PersistError::Malformed {
                kind: "cache-meta",
                path: meta_body.clone(),
                reason: e.to_string(),
            })?;
        let actual = sha256_hex(&payload);
        if actual != meta.payload_sha256 {
            return Err(PersistError::Integrity {
                key: key.0.clone(),
                stored: meta.payload_sha256,
                actual,
            });
        }
        Ok(Some(payload))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    payload_sha256: String,
}

/// Content-derived cache key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey(String);

impl CacheKey {
    /// Hash the ordered parts (dataset hash, backend id, config slice, ...).
    pub fn from_parts(parts: &[&str]) -> Self {
        let mut hasher = Sha256::new();
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        Self(hex::encode(hasher.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

// ── Activation container ────────────────────────────────────────────────────

const ACTS_MAGIC: &[u8; 4] = b"ACTS";

#[derive(Serialize, Deserialize)]
struct ActsHeader {
    layer: usize,
    n: usize,
    d: usize,
    labels: Vec<bool>,
    question_ids: Vec<String>,
    dtype: String,
    endianness: String,
}

/// Serialize an activation set: magic, little-endian u32 header length, JSON
/// header, then the row-major float32 payload.
pub fn encode_activation_set(set: &ActivationSet) -> Vec<u8> {
    let header = ActsHeader {
        layer: set.layer,
        n: set.len(),
        d: set.dim(),
        labels: set.labels.clone(),
        question_ids: set.question_ids.clone(),
        dtype: "float32".to_string(),
        endianness: "little".to_string(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header_json.len() + set.len() * set.dim() * 4);
    out.extend_from_slice(ACTS_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for row in &set.vectors {
        for &x in row {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_activation_set(bytes: &[u8], origin: &str) -> Result<ActivationSet, PersistError> {
    let malformed = |reason: String| PersistError::Malformed {
        kind: "activation-set",
        path: origin.to_string(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != ACTS_MAGIC {
        return Err(malformed("missing ACTS magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(malformed("truncated header".into()));
    }
    let header: ActsHeader = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| malformed(format!("header: {e}")))?;
    if header.dtype != "float32" || header.endianness != "little" {
        return Err(malformed(format!(
            "unsupported dtype {} / endianness {}",
            header.dtype, header.endianness
        )));
    }
    let expected = header.n * header.d * 4;
    let payload = &bytes[header_end..];
    if payload.len() != expected {
        return Err(malformed(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let mut set = ActivationSet::new(header.layer);
    for i in 0..header.n {
        let mut row = Vec::with_capacity(header.d);
        for j in 0..header.d {
            let at = (i * header.d + j) * 4;
            let x = f32::from_le_bytes(payload[at..at + 4].try_into().expect("4 bytes"));
            row.push(x as f64);
        }
        set.push(header.question_ids[i].clone(), header.labels[i], row);
    }
    set.validate().map_err(|e| malformed(e.to_string()))?;
    Ok(set)
}

pub fn write_activation_set(path: &Path, set: &ActivationSet) -> Result<(), PersistError> {
    write_atomic(path, &encode_activation_set(set))
}

pub fn read_activation_set(path: &Path) -> Result<ActivationSet, PersistError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_activation_set(&bytes, &path.display().to_string())
}

// ── Critique vector file ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct VectorFile {
    layer: usize,
    d: usize,
    /// base64 of the little-endian float32 payload
    vector: String,
    pair_count: usize,
    source: String,
    norm: f64,
}

pub fn encode_vector(vector: &CritiqueVector) -> Vec<u8> {
    let mut payload = Vec::with_capacity(vector.vector.len() * 4);
    for &x in &vector.vector {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let file = VectorFile {
        layer: vector.layer,
        d: vector.vector.len(),
        vector: base64::engine::general_purpose::STANDARD.encode(&payload),
        pair_count: vector.pair_count,
        source: vector.source.clone(),
        norm: vector.norm,
    };
    let mut body = serde_json::to_vec_pretty(&file).expect("vector serializes");
    body.push(b'\n');
    body
}

pub fn decode_vector(bytes: &[u8], origin: &str) -> Result<CritiqueVector, PersistError> {
    let malformed = |reason: String| PersistError::Malformed {
        kind: "critique-vector",
        path: origin.to_string(),
        reason,
    };
    let file: VectorFile =
        serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    let payload = base64::engine::general_purpose::STANDARD
        .decode(&file.vector)
        .map_err(|e| malformed(format!("base64: {e}")))?;
    if payload.len() != file.d * 4 {
        return Err(malformed(format!(
            "payload is {} bytes for d = {}",
            payload.len(),
            file.d
        )));
    }
    let vector: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(CritiqueVector {
        layer: file.layer,
        vector,
        pair_count: file.pair_count,
        source: file.source,
        norm: file.norm,
    })
}

pub fn write_vector(path: &Path, vector: &CritiqueVector) -> Result<(), PersistError> {
    write_atomic(path, &encode_vector(vector))
}

pub fn read_vector(path: &Path) -> Result<CritiqueVector, PersistError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_vector(&bytes, &path.display().to_string())
}

// ── CSV tables ──────────────────────────────────────────────────────────────

/// Write rows with a fixed header through the csv writer (proper quoting for
/// token text that may contain commas or newlines).
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), PersistError> {
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    writer.write_record(header).expect("in-memory write");
    for row in rows {
        writer.write_record(row).expect("in-memory write");
    }
    let bytes = writer.into_inner().expect("in-memory flush");
    write_atomic(path, &bytes)
}

/// Deterministic float formatting for CSV cells.
pub fn fmt_float(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

// ── Manifests ───────────────────────────────────────────────────────────────

/// A file an experiment stage consumed or produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Path relative to the workspace root.
    pub path: String,
    pub sha256: String,
}

/// Append-only record of one pipeline stage run. The id is derived from the
/// stage, parameters, config, and input hashes, so replaying the stage maps
/// onto the same manifest and every artifact stays reachable from exactly
/// one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub id: String,
    pub stage: String,
    pub created_at: String,
    pub backend_id: String,
    pub config_toml: String,
    /// Stage arguments needed to replay (file paths, layer choices, names).
    #[serde(default)]
    pub params: std::collections::BTreeMap<String, String>,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
}

impl RunManifest {
    pub fn derive_id(
        stage: &str,
        config_toml: &str,
        params: &std::collections::BTreeMap<String, String>,
        inputs: &[ArtifactRef],
    ) -> String {
        let mut parts: Vec<String> = vec![stage.to_string(), config_toml.to_string()];
        for (k, v) in params {
            parts.push(format!("{k}={v}"));
        }
        for input in inputs {
            parts.push(format!("{}={}", input.path, input.sha256));
        }
        let joined = parts.join("\u{1f}");
        format!("{stage}-{}", &sha256_hex(joined.as_bytes())[..16])
    }
}

/// Hash a workspace file into an artifact reference.
pub fn artifact_ref(workspace: &Workspace, path: &Path) -> Result<ArtifactRef, PersistError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let rel = path
        .strip_prefix(workspace.root())
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(ArtifactRef {
        path: rel,
        sha256: sha256_hex(&bytes),
    })
}

pub fn write_manifest(workspace: &Workspace, manifest: &RunManifest) -> Result<PathBuf, PersistError> {
    let path = workspace.manifests().join(format!("{}.json", manifest.id));
    let mut body = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    body.push(b'\n');
    write_atomic(&path, &body)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, PersistError> {
    if !path.exists() {
        return Err(PersistError::NoManifest(path.display().to_string()));
    }
    let body = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&body).map_err(|e| PersistError::Malformed {
        kind: "manifest",
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ActivationSet {
        let mut set = ActivationSet::new(3);
        set.push("q1".into(), false, vec![1.0, -2.5, 0.125]);
        set.push("q1".into(), true, vec![0.25, 7.0, -0.0625]);
        set.push("q2".into(), false, vec![3.5, 0.5, 2.0]);
        set.push("q2".into(), true, vec![1.5, -1.5, 4.0]);
        set
    }

    #[test]
    fn activation_container_round_trips() {
        let set = sample_set();
        let bytes = encode_activation_set(&set);
        let decoded = decode_activation_set(&bytes, "test").unwrap();
        assert_eq!(set, decoded);
        // re-encoding is byte-identical
        assert_eq!(bytes, encode_activation_set(&decoded));
    }

    #[test]
    fn truncated_container_is_malformed() {
        let set = sample_set();
        let mut bytes = encode_activation_set(&set);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode_activation_set(&bytes, "test"),
            Err(PersistError::Malformed { .. })
        ));
    }

    #[test]
    fn vector_file_round_trips() {
        let vector = CritiqueVector {
            layer: 2,
            vector: vec![0.5, -1.25, 3.0, 0.0],
            pair_count: 42,
            source: "gsm8k-sample".into(),
            norm: 3.2,
        };
        let bytes = encode_vector(&vector);
        let decoded = decode_vector(&bytes, "test").unwrap();
        assert_eq!(vector, decoded);
        assert_eq!(bytes, encode_vector(&decoded));
    }

    #[test]
    fn cache_store_load_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let key = CacheKey::from_parts(&["dataset-hash", "backend-id", "stage"]);

        assert!(ws.cache_load(&key).unwrap().is_none(), "explicit miss");
        let path = ws.cache_store(&key, b"payload bytes").unwrap();
        assert_eq!(ws.cache_load(&key).unwrap().unwrap(), b"payload bytes");

        // idempotent second store
        ws.cache_store(&key, b"payload bytes").unwrap();
        // conflicting store rejected
        assert!(matches!(
            ws.cache_store(&key, b"different"),
            Err(PersistError::ConflictingStore(_))
        ));

        // corruption detected, never silently reused
        std::fs::write(&path, b"tampered").unwrap();
        assert!(matches!(
            ws.cache_load(&key),
            Err(PersistError::Integrity { .. })
        ));
    }

    #[test]
    fn manifest_id_is_deterministic_and_input_sensitive() {
        let inputs = vec![ArtifactRef {
            path: "datasets/x.jsonl".into(),
            sha256: "abc".into(),
        }];
        let params = std::collections::BTreeMap::new();
        let a = RunManifest::derive_id("classify", "[backend]\n", &params, &inputs);
        let b = RunManifest::derive_id("classify", "[backend]\n", &params, &inputs);
        assert_eq!(a, b);
        let c = RunManifest::derive_id("classify", "[backend]\nx = 1\n", &params, &inputs);
        assert_ne!(a, c);
        assert!(a.starts_with("classify-"));
    }

    #[test]
    fn csv_quotes_awkward_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lens.csv");
        write_csv(
            &path,
            &["rank", "token", "logit"],
            &[vec!["1".into(), "?)\n\n".into(), "1.57".into()]],
        )
        .unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("rank,token,logit\n"));
        assert!(body.contains("\"?)\n\n\""));
    }
}
