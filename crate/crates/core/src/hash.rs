use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the canonical JSON encoding of `value`, truncated to 16 characters.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        assert_eq!(config_hash(&[1, 2]), config_hash(&[1, 2]));
        assert_ne!(config_hash(&[1, 2]), config_hash(&[2, 1]));
        assert_eq!(config_hash(&0u8).len(), 16);
    }
}
