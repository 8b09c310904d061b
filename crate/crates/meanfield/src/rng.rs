//! Deterministic random-number plumbing.
//!
//! Every stochastic routine in this crate draws from a [`ChaCha12Rng`]
//! reached through an explicit seed, so a run is reproducible from its
//! master seed alone, independent of thread count or platform.
//!
//! Layout:
//! - a *master seed* (u64) identifies the run;
//! - replication `r` of an experiment uses `mix(master, r)`;
//! - within one step of an `N`-particle system, particle `i` draws from the
//!   per-step generator's stream `i` (`set_stream`), so the noise seen by a
//!   particle does not depend on the order particles are processed in;
//! - field subsampling uses a dedicated stream far above any particle index.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream index reserved for field subsampling inside one step.
pub const FIELD_STREAM: u64 = u64::MAX - 1;

/// SplitMix64 finalizer; mixes a seed with a label into a fresh seed.
///
/// Used to derive independent seeds for replications and named subsystems
/// from one master seed. Bijective in `x` for fixed label.
pub fn mix(seed: u64, label: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(label.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for a whole run (or replication).
pub fn master_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Generator seeded for one named subsystem of a run.
pub fn subsystem_rng(seed: u64, label: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(seed, label))
}

/// Per-particle generator: same keying as `base`, stream = particle index.
///
/// `base` should be a step-level generator (one per time step); the stream
/// mechanism gives each particle an independent, order-insensitive substream.
pub fn particle_rng(base: &ChaCha12Rng, particle: usize) -> ChaCha12Rng {
    let mut r = base.clone();
    r.set_stream(particle as u64);
    r
}

/// Dedicated stream for field subsampling within a step.
pub fn field_rng(base: &ChaCha12Rng) -> ChaCha12Rng {
    let mut r = base.clone();
    r.set_stream(FIELD_STREAM);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn mix_separates_labels() {
        let a = mix(42, 0);
        let b = mix(42, 1);
        let c = mix(43, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix(42, 0));
    }

    #[test]
    fn particle_streams_are_independent_and_stable() {
        let base = master_rng(7);
        let mut r0 = particle_rng(&base, 0);
        let mut r1 = particle_rng(&base, 1);
        let x0: Vec<u64> = (0..4).map(|_| r0.next_u64()).collect();
        let x1: Vec<u64> = (0..4).map(|_| r1.next_u64()).collect();
        assert_ne!(x0, x1);
        // Re-derivation reproduces the stream regardless of what other
        // streams were consumed in between.
        let mut r0b = particle_rng(&base, 0);
        let y0: Vec<u64> = (0..4).map(|_| r0b.next_u64()).collect();
        assert_eq!(x0, y0);
    }

    #[test]
    fn field_stream_disjoint_from_particles() {
        let base = master_rng(9);
        let mut f = field_rng(&base);
        let mut p = particle_rng(&base, 0);
        assert_ne!(f.next_u64(), p.next_u64());
    }
}
