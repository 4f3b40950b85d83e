use core::hash::Hasher;

/// 64-bit FNV-1a, used for stable configuration and manifest hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Lower-case 16-digit hex rendering of [`fnv1a64`].
pub fn hash_hex(bytes: &[u8]) -> alloc::string::String {
    alloc::format!("{:016x}", fnv1a64(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(hash_hex(b"foobar"), "85944171f73967e8");
    }
}
