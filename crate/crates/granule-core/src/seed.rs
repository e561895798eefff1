//! Deterministic seed derivation.
//!
//! Every random choice in the toolkit flows from one root `u64` seed. Each
//! consumer derives its own stream with [`derive`] so that, say, the dataset
//! split and the dropout masks stay independently reproducible: changing the
//! number of epochs never perturbs the split, and vice versa.
//!
//! Purpose strings in use: `"split"` (per-class shuffles), `"init"` (weight
//! initialization), `"dropout"` (mask stream), `"shuffle"` (per-epoch batch
//! order), `"augment"` (per-image flip/rotation draws).

/// FNV-1a over the purpose string; stable across platforms, unlike
/// `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// SplitMix64 finalizer; decorrelates nearby inputs.
fn splitmix(mut state: u64) -> u64 {
    state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for `purpose`, mixing in any stream indices (epoch,
/// record index, class index, ...).
pub fn derive(root: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut state = splitmix(root ^ fnv1a(purpose.as_bytes()));
    for &index in indices {
        state = splitmix(state ^ index);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable() {
        // Frozen values: a change here breaks reproducibility of every
        // artifact produced by earlier builds.
        assert_eq!(derive(42, "split", &[]), 0x9dee_72c6_ab27_0651);
        assert_eq!(derive(42, "shuffle", &[3]), 0xde66_6037_77b9_0b7e);
    }

    #[test]
    fn purposes_and_indices_decorrelate() {
        let root = 7;
        assert_ne!(derive(root, "split", &[]), derive(root, "init", &[]));
        assert_ne!(derive(root, "shuffle", &[0]), derive(root, "shuffle", &[1]));
        assert_ne!(derive(root, "augment", &[1, 2]), derive(root, "augment", &[2, 1]));
    }

    #[test]
    fn same_inputs_same_seed() {
        assert_eq!(derive(123, "augment", &[4, 5]), derive(123, "augment", &[4, 5]));
    }
}
