//! Named, counter-based random substreams.
//!
//! A run owns one root seed. Every consumer of randomness derives its own
//! [`SeedStream`] by label (`"env"`, `"policy-init"`, `"rollout"`, ...) and by
//! index (iteration, type slot, trajectory number). A stream maps to a ChaCha
//! key/stream-id pair, so the numbers a rollout sees depend only on its path,
//! never on scheduling or on how many draws other workers made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; decorrelates consecutive path hashes.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    seed: u64,
    path: u64,
}

impl SeedStream {
    pub fn root(seed: u64) -> Self {
        Self {
            seed,
            path: FNV_OFFSET,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, label: &str) -> Self {
        let h = fnv1a(self.path, label.as_bytes());
        Self {
            seed: self.seed,
            path: mix(fnv1a(h, b"/")),
        }
    }

    pub fn index(&self, i: u64) -> Self {
        let h = fnv1a(self.path, &i.to_le_bytes());
        Self {
            seed: self.seed,
            path: mix(fnv1a(h, b"#")),
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path);
        rng
    }
}

/// Stable 64-bit digest of a float slice (bit patterns, FNV-1a).
pub fn digest_f64(values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        h = fnv1a(h, &v.to_bits().to_le_bytes());
    }
    h
}

/// Serde adapter for 64-bit seeds in formats whose integers are signed 64-bit
/// (TOML): seeds above `i64::MAX` are written as decimal strings, and either
/// form is accepted on input.
pub mod seed_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Str(s) => s
                .trim()
                .parse()
                .map_err(|_| de::Error::custom(format!("invalid seed {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_numbers() {
        let a = SeedStream::root(7).derive("rollout").index(3);
        let b = SeedStream::root(7).derive("rollout").index(3);
        let xa: Vec<u64> = a.rng().random_iter().take(5).collect();
        let xb: Vec<u64> = b.rng().random_iter().take(5).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn sibling_paths_differ() {
        let root = SeedStream::root(7);
        let x: u64 = root.derive("env").rng().random();
        let y: u64 = root.derive("policy-init").rng().random();
        let z: u64 = root.derive("env").index(0).rng().random();
        assert_ne!(x, y);
        assert_ne!(x, z);
        let s1: u64 = SeedStream::root(8).derive("env").rng().random();
        assert_ne!(x, s1);
    }

    #[test]
    fn digest_sees_sign_of_zero() {
        assert_ne!(digest_f64(&[0.0]), digest_f64(&[-0.0]));
        assert_eq!(digest_f64(&[1.0, 2.0]), digest_f64(&[1.0, 2.0]));
    }
}
