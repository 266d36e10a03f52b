use sha2::{Digest, Sha256};

/// Hex SHA-256 over length-prefixed parts, so ("ab", "c") and ("a", "bc") differ.
pub(crate) fn digest_parts(parts: &[&[u8]]) -> String {
    hex::encode(digest_raw(parts))
}

pub(crate) fn digest_u64(parts: &[&[u8]]) -> u64 {
    let raw = digest_raw(parts);
    u64::from_le_bytes(raw[..8].try_into().expect("sha256 is 32 bytes"))
}

fn digest_raw(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
