//! Stable seed derivation.
//!
//! Child seeds are produced by chaining the SplitMix64 finalizer over the
//! parent seed and each path component, so the mapping depends only on the
//! integers involved and is identical across platforms and runs.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of integer components.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |h, &p| splitmix(h ^ splitmix(p)))
}

/// Role tags used as the last path component.
pub mod role {
    pub const EXCITATION: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CONFIGURATION: u64 = 3;
    pub const FIT: u64 = 4;
    pub const PERTURBATION: u64 = 5;
}
