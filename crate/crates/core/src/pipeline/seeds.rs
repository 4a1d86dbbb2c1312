use sha2::{Digest, Sha256};

/// Named sub-stream of an experiment seed: every random consumer draws from
/// `sub_seed(seed, purpose, index)` so adding one consumer never shifts
/// another's stream.
pub fn sub_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
