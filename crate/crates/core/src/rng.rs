//! Counter-based random streams.
//!
//! Every random draw in the engine is addressed by an [`RngKey`]: the run seed,
//! the purpose of the draw, a particle index and a time-step index. The seed
//! keys a ChaCha8 cipher, kind and step select the stream nonce, and particle
//! `i` reads the 8 keystream words at offset `8 i`, which seed that particle's
//! own Xoshiro256++ generator. A draw therefore never depends on how many other
//! draws happened before it or on which thread made it, which is what lets the
//! full, RBM and rvRBM solvers consume identical Wiener increments. Consecutive
//! particles read consecutive keystream words, so a chunk of particles is
//! seeded from one cipher instance ([`ParticleSeeder`]).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Bits of the 64-bit stream nonce reserved for the step index.
const STEP_BITS: u32 = 56;
/// Keystream words consumed per particle (one 256-bit generator seed).
const SEED_WORDS: u128 = 8;

/// Particles per [`ParticleSeeder`] in parallel loops. Any value gives the
/// same draws; this one only sets the work granularity.
pub const SEED_CHUNK: usize = 256;

/// Generator owned by one (particle, purpose, step).
pub type ParticleRng = Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Init = 1,
    Wiener = 2,
    BatchShuffle = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub kind: StreamKind,
    pub particle: u64,
    pub step: u64,
}

impl RngKey {
    pub fn new(seed: u64, kind: StreamKind, particle: u64, step: u64) -> Self {
        Self {
            seed,
            kind,
            particle,
            step,
        }
    }

    pub fn init(seed: u64, particle: usize) -> Self {
        Self::new(seed, StreamKind::Init, particle as u64, 0)
    }

    pub fn wiener(seed: u64, particle: usize, step: u64) -> Self {
        Self::new(seed, StreamKind::Wiener, particle as u64, step)
    }

    pub fn batch(seed: u64, particle: usize, step: u64) -> Self {
        Self::new(seed, StreamKind::BatchShuffle, particle as u64, step)
    }

    pub fn with_particle(self, particle: usize) -> Self {
        Self {
            particle: particle as u64,
            ..self
        }
    }

    /// The generator of this key.
    pub fn rng(&self) -> ParticleRng {
        ParticleSeeder::new(*self).next_rng()
    }

    fn nonce(&self) -> u64 {
        debug_assert!(self.step < (1 << STEP_BITS));
        ((self.kind as u64) << STEP_BITS) | (self.step & ((1 << STEP_BITS) - 1))
    }
}

/// Generators of particles `key.particle, key.particle + 1, ...` in order,
/// identical to calling [`RngKey::rng`] on each key.
pub struct ParticleSeeder {
    stream: ChaCha8Rng,
}

impl ParticleSeeder {
    pub fn new(key: RngKey) -> Self {
        let mut stream = ChaCha8Rng::seed_from_u64(key.seed);
        stream.set_stream(key.nonce());
        stream.set_word_pos(u128::from(key.particle) * SEED_WORDS);
        Self { stream }
    }

    pub fn next_rng(&mut self) -> ParticleRng {
        let mut seed = [0u8; 32];
        self.stream.fill_bytes(&mut seed);
        Xoshiro256PlusPlus::from_seed(seed)
    }
}

/// Gaussian increment with mean zero and per-component variance `dt`.
pub fn wiener_increment(key: RngKey, dim: usize, dt: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dim];
    fill_wiener_increment(key, dt, &mut out)?;
    Ok(out)
}

/// In-place variant of [`wiener_increment`] used by the integrator.
pub fn fill_wiener_increment(key: RngKey, dt: f64, out: &mut [f64]) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
    }
    fill_wiener_from(&mut key.rng(), dt, out);
    Ok(())
}

/// Fills `out` with `sqrt(dt)` times standard normals drawn from `rng`.
pub fn fill_wiener_from(rng: &mut ParticleRng, dt: f64, out: &mut [f64]) {
    let scale = dt.sqrt();
    for w in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *w = scale * z;
    }
}
