//! Named sub-seeds: every random stream is derived from one root seed and a
//! label, so adding a new consumer never shifts an existing one.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the label, then mixed with the root.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(root ^ mix(h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_names_and_roots_differ() {
        assert_eq!(sub_seed(7, "weights"), sub_seed(7, "weights"));
        assert_ne!(sub_seed(7, "weights"), sub_seed(7, "dataset"));
        assert_ne!(sub_seed(7, "weights"), sub_seed(8, "weights"));
    }
}
