//! FNV-1a 64-bit hashing.
//!
//! Used everywhere a platform-independent digest is needed: categorical
//! hashing, schema fingerprints, config digests, and dataset manifests.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a 64-bit hasher.
#[derive(Debug, Clone)]
pub struct Fnv1a {
    state: u64,
}

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a { state: FNV_OFFSET }
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// FNV-1a over a byte slice in one call.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.write(bytes);
    h.finish()
}

/// Hash a 64-bit key (big-endian byte order) into `[0, vocab_size)`.
///
/// This is the categorical hashing trick: the modulus is the vocabulary
/// size, so vocabulary scaling is just a different divisor.
pub fn hash_index(key: u64, vocab_size: u64) -> u64 {
    debug_assert!(vocab_size >= 1);
    fnv1a(&key.to_be_bytes()) % vocab_size
}
