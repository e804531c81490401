//! Root-seed fan-out.
//!
//! Components draw from named sub-seeds (`data`, `mask`, `model-init`,
//! `counterfactual`, ...) so each can be varied independently of the rest.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed named `name` under `root`.
pub fn derive(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3));
    mix(root ^ mix(h))
}

/// Seed for the `index`-th item of a stream.
pub fn nth(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5151_5151)))
}
