//! Stable content hashes used for sequence ids and artifact fingerprints.

use sha2::{Digest, Sha256};

const HEX_LEN: usize = 16;

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(HEX_LEN);
    for b in digest.iter().take(HEX_LEN / 2) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Fingerprint of any serializable value via its canonical JSON encoding.
pub fn hash_json<T: serde::Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprinted values serialize");
    hash_bytes(&bytes)
}

pub fn hash_tokens(tokens: &[u32]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    hash_bytes(&bytes)
}
