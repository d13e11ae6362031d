//! Deterministic seed derivation.
//!
//! One root seed fans out to per-subsystem and per-item generators via
//! 64-bit FNV-1a over `root bytes || label || index bytes`. Labels keep the
//! streams independent (the data generator never shares a stream with
//! training), and per-item derivation makes results independent of batching
//! or iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(h: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(h, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Derive a subsystem seed from the root seed and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    fnv1a(fnv1a(FNV_OFFSET, &root.to_le_bytes()), label.as_bytes())
}

/// Derive a seed for the `index`-th item of a labelled stream.
pub fn derive_seed_indexed(root: u64, label: &str, index: u64) -> u64 {
    fnv1a(derive_seed(root, label), &index.to_le_bytes())
}

/// Generator for a whole subsystem (e.g. "teacher", "distill").
pub fn subsystem_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

/// Generator for one item of a labelled stream (e.g. scene i of a split).
pub fn indexed_rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(root, label, index))
}
