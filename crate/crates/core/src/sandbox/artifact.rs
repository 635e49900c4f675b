use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub adapter_id: String,
    pub seed: u64,
    pub created_at: Timestamp,
    /// Hex SHA-256 of the model bytes; also the artifact's store key.
    pub content_hash: String,
    pub size_bytes: u64,
}

/// An opaque trained model with its manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArtifact {
    pub manifest: ModelManifest,
    pub bytes: Vec<u8>,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ModelArtifact {
    pub fn new(
        adapter_id: impl Into<String>,
        seed: u64,
        created_at: Timestamp,
        bytes: Vec<u8>,
    ) -> Self {
        Self {
            manifest: ModelManifest {
                adapter_id: adapter_id.into(),
                seed,
                created_at,
                content_hash: content_hash(&bytes),
                size_bytes: bytes.len() as u64,
            },
            bytes,
        }
    }

    pub fn model_ref(&self) -> &str {
        &self.manifest.content_hash
    }

    /// True when the bytes still match the manifest.
    pub fn verify(&self) -> bool {
        self.manifest.size_bytes == self.bytes.len() as u64
            && self.manifest.content_hash == content_hash(&self.bytes)
    }
}
