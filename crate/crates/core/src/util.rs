//! Small shared helpers: seed derivation and content hashing.

/// Derive an independent child seed from a base seed and a stream index.
///
/// Splitmix64 finalizer; distinct `stream` values give uncorrelated seeds so
/// replicate workers, per-image noise, and per-epoch shuffles never share a
/// stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte stream. Used for freeze-contract checks on parameter
/// bytes, not for anything adversarial.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01B3);
    }
    h
}
