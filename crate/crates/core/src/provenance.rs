//! Content hashes that tie artifacts to the configuration that made them.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the compact JSON serialization of `value`. Struct fields
/// serialize in declaration order, so equal configs hash equally.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_follows_content() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        let b = config_hash(&serde_json::json!({"x": 2})).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
    }
}
