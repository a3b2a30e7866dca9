//! Seed derivation and normal sampling helpers.
//!
//! Training derives every random stream (parameter init, per-epoch shuffle,
//! per-step masks, synthetic data) functionally from a root seed plus a domain
//! tag and an index. Checkpoints therefore only need to store the root seed
//! and the current step/epoch to resume bit-exactly: no RNG state is carried
//! across steps.

use rand::Rng;

/// Domain tags for derived seeds. Each independent random stream gets its own
/// tag so that, e.g., the epoch-7 shuffle never collides with the step-7 mask
/// draw.
#[derive(Debug, Clone, Copy)]
pub enum SeedDomain {
    ParamInit,
    EpochShuffle,
    StepMask,
    Synthetic,
    Eval,
}

impl SeedDomain {
    fn tag(self) -> u64 {
        match self {
            SeedDomain::ParamInit => 0x9e37_79b9_7f4a_7c15,
            SeedDomain::EpochShuffle => 0xbf58_476d_1ce4_e5b9,
            SeedDomain::StepMask => 0x94d0_49bb_1331_11eb,
            SeedDomain::Synthetic => 0xd6e8_feb8_6659_fd93,
            SeedDomain::Eval => 0xa076_1d64_78bd_642f,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a seed for `domain` stream number `index` from the root seed.
/// Pure function: identical inputs give identical seeds on every platform.
pub fn derive_seed(root: u64, domain: SeedDomain, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ domain.tag()) ^ index)
}

/// Standard normal sample via Box–Muller from two uniform draws.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Guard the log against a zero draw.
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Normal sample truncated to ±2σ by resampling, the usual ViT weight init.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let x = standard_normal(rng) * std;
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}
