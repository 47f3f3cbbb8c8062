//! Content hashes used for provenance, cache validation, and job addressing.

use sha2::{Digest, Sha256};

pub fn digest_str(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Incremental hash over length-prefixed parts, so `["ab","c"]` and
/// `["a","bc"]` never collide.
#[derive(Default, Clone)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part(mut self, bytes: impl AsRef<[u8]>) -> Self {
        let bytes = bytes.as_ref();
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_are_length_prefixed() {
        let a = Fingerprint::new().part("ab").part("c").finish();
        let b = Fingerprint::new().part("a").part("bc").finish();
        assert_ne!(a, b);
        assert_eq!(a, Fingerprint::new().part("ab").part("c").finish());
        assert_eq!(a.len(), 64);
    }
}
