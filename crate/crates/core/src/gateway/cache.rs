use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{CompletionRequest, CompletionResult};
use crate::error::Result;
use crate::io::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CacheKey {
    pub backend: String,
    pub model: String,
    pub hash: String,
}

impl CacheKey {
    pub fn new(backend: &str, model: &str, request: &CompletionRequest, salt: Option<&str>) -> Self {
        let mut hasher = Sha256::new();
        for part in [backend.as_bytes(), model.as_bytes()] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        hasher.update(request.canonical_bytes());
        if let Some(salt) = salt {
            hasher.update(b"\0salt\0");
            hasher.update(salt.as_bytes());
        }
        CacheKey {
            backend: backend.to_string(),
            model: model.to_string(),
            hash: hex::encode(hasher.finalize()),
        }
    }
}

/// Content-addressed response store laid out as
/// `<root>/<backend>/<model>/<key[0..2]>/<key>.json`.
///
/// Entries are written to a temp file and renamed into place, so concurrent
/// writers of one key never leave a torn file and readers need no locks.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(path_component(&key.backend))
            .join(path_component(&key.model))
            .join(&key.hash[..2])
            .join(format!("{}.json", key.hash))
    }

    pub fn get(&self, key: &CacheKey) -> Option<CompletionResult> {
        let path = self.path_for(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(result) => Some(result),
            Err(e) => {
                tracing::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, result: &CompletionResult) -> Result<()> {
        let bytes = serde_json::to_vec(result)?;
        write_atomic(&self.path_for(key), &bytes)
    }
}

fn path_component(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    match cleaned.as_str() {
        "" | "." | ".." => format!("_{cleaned}"),
        _ => cleaned,
    }
}
