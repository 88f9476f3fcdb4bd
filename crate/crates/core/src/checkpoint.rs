//! Versioned named-tensor checkpoints with an upstream hash chain.
//!
//! Layout: `b"MLCM" | version: u32 LE | manifest length: u64 LE |
//! manifest JSON | f32 LE blob`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MLCM";
pub const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Upstream {
    pub stage: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub version: u32,
    pub stage: String,
    pub upstream: Vec<Upstream>,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    /// Stage-specific configuration and side data.
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub upstream: Vec<Upstream>,
    pub meta: serde_json::Value,
    pub tensors: ParamStore<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a checkpoint file, referenced by downstream stages.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = read(path)?;
    Ok(sha256_hex(&bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!("{}", path.display())),
        _ => Error::io(path, e),
    })
}

/// Write to a sibling temp file, fsync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, tensors: ParamStore<f32>) -> Self {
        Self {
            stage: stage.into(),
            upstream: Vec::new(),
            meta: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in self.tensors.iter() {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: blob.len() - offset,
            });
        }
        let manifest = CheckpointManifest {
            magic: "MLCM".into(),
            version: VERSION,
            stage: self.stage.clone(),
            upstream: self.upstream.clone(),
            tensors: entries,
            blob_sha256: sha256_hex(&blob),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Corrupt(format!(
                "file is {} bytes, shorter than the {HEADER}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("bad magic, not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER..];
        if mlen > body.len() {
            return Err(Error::Corrupt(format!(
                "manifest length {mlen} exceeds remaining {} bytes",
                body.len()
            )));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
        if manifest.magic != "MLCM" || manifest.version != VERSION {
            return Err(Error::Corrupt(
                "manifest magic/version disagree with header".into(),
            ));
        }
        let blob = &body[mlen..];
        let mut expected = 0usize;
        for e in &manifest.tensors {
            if e.offset != expected || e.length != 4 * e.shape.iter().product::<usize>() {
                return Err(Error::Corrupt(format!(
                    "tensor table entry `{}` is not contiguous or disagrees with its shape",
                    e.name
                )));
            }
            expected += e.length;
        }
        if blob.len() != expected {
            return Err(Error::Corrupt(format!(
                "truncated or oversized blob: expected {expected} bytes, found {}",
                blob.len()
            )));
        }
        if sha256_hex(blob) != manifest.blob_sha256 {
            return Err(Error::Corrupt(
                "tensor blob fails its integrity hash".into(),
            ));
        }
        let mut tensors = ParamStore::new();
        for e in &manifest.tensors {
            let data = blob[e.offset..e.offset + e.length]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
                .map_err(|_| Error::Corrupt(format!("duplicate tensor `{}`", e.name)))?;
        }
        Ok(Self {
            stage: manifest.stage,
            upstream: manifest.upstream,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Atomically writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Loads and checks the stage name; returns the checkpoint and its hash.
    pub fn load(path: &Path, stage: &str) -> Result<(Self, String)> {
        let bytes = read(path).map_err(|e| match e {
            Error::Missing(p) => Error::Missing(format!("{stage} checkpoint {p}")),
            e => e,
        })?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.stage != stage {
            return Err(Error::Corrupt(format!(
                "{} holds stage `{}`, expected `{stage}`",
                path.display(),
                ck.stage
            )));
        }
        Ok((ck, sha256_hex(&bytes)))
    }

    pub fn upstream_hash(&self, stage: &str) -> Option<&str> {
        self.upstream
            .iter()
            .find(|u| u.stage == stage)
            .map(|u| u.hash.as_str())
    }

    /// Fails with a hash mismatch naming `stage` unless the recorded
    /// upstream hash equals `found`.
    pub fn verify_upstream(&self, stage: &str, found: &str) -> Result<()> {
        match self.upstream_hash(stage) {
            Some(h) if h == found => Ok(()),
            Some(h) => Err(Error::HashMismatch {
                stage: stage.into(),
                expected: h.into(),
                found: found.into(),
            }),
            None => Err(Error::Corrupt(format!(
                "`{}` checkpoint does not record an upstream `{stage}`",
                self.stage
            ))),
        }
    }
}
