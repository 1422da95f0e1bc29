//! Stable hashing used for traffic bucketing and content digests.
//!
//! Everything here is FNV-1a 64 (offset basis `0xcbf29ce484222325`, prime
//! `0x100000001b3`). It is fixed across platforms and releases, so bucket
//! assignments and golden digests never move.
//!
//! | input      | fnv1a64              | bucket |
//! |------------|----------------------|--------|
//! | `""`       | `0xcbf29ce484222325` | 37     |
//! | `"a"`      | `0xaf63dc4c8601ec8c` | 96     |
//! | `"foobar"` | `0x85944171f73967e8` | 68     |

use std::hash::Hasher;

use fnv::FnvHasher;

/// FNV-1a 64 over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hasher = FnvHasher::default();
    hasher.write(bytes);
    hasher.finish()
}

/// Traffic bucket of a routing key, in `0..100`.
pub fn bucket(key: &str) -> u8 {
    (fnv1a64(key.as_bytes()) % 100) as u8
}

/// Incremental digest over a sequence of length-prefixed fields.
///
/// Length prefixes keep `["ab", "c"]` and `["a", "bc"]` distinct.
#[derive(Default)]
pub struct DigestBuilder {
    hasher: FnvHasher,
}

impl DigestBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, value: impl AsRef<[u8]>) -> Self {
        self.push(value);
        self
    }

    pub fn push(&mut self, value: impl AsRef<[u8]>) {
        let bytes = value.as_ref();
        self.hasher.write(&(bytes.len() as u64).to_le_bytes());
        self.hasher.write(bytes);
    }

    pub fn finish_u64(&self) -> u64 {
        self.hasher.finish()
    }

    /// Lower-case, zero-padded 16 digit hex.
    pub fn finish_hex(&self) -> String {
        format!("{:016x}", self.hasher.finish())
    }
}
