//! Deterministic seed derivation.
//!
//! Every random draw in a run flows from one master seed through
//! [`derive`], so experiments replay bit-for-bit regardless of thread
//! count or platform.

/// Derive an independent stream seed from a master seed.
pub fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
