//! Stable content hashes used for provenance and cache keys.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 of the compact JSON encoding of `value`.
///
/// Struct fields serialize in declaration order and maps used in hashed
/// types are `BTreeMap`, so the encoding is canonical.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(&bytes)
}

/// First 16 hex digits of [`hash_json`], for display in tables.
pub fn short_hash<T: Serialize + ?Sized>(value: &T) -> String {
    hash_json(value)[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn json_hash_is_stable() {
        let a = hash_json(&(1u32, vec![0.5f64, -2.0]));
        let b = hash_json(&(1u32, vec![0.5f64, -2.0]));
        assert_eq!(a, b);
        assert_ne!(a, hash_json(&(1u32, vec![0.5f64, 2.0])));
    }
}
