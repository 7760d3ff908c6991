//! Counter-based random streams.
//!
//! Every Monte Carlo loop in the crate draws its randomness from a stream
//! keyed by `hash(master_seed, index)`. A trial never shares generator
//! state with another trial, so results do not depend on how trials are
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A 64-bit seed token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    /// Child seed for sub-stream `index`.
    pub fn derive(self, index: u64) -> Seed {
        let a = mix64(self.0.wrapping_add(GOLDEN_GAMMA));
        Seed(mix64(
            a ^ mix64(index.wrapping_mul(GOLDEN_GAMMA).wrapping_add(0x632B_E59B_D9B4_E019)),
        ))
    }

    /// Child seed keyed by a label, for separating the roles of a single
    /// experiment (design, noise, signs, ...).
    pub fn label(self, tag: &str) -> Seed {
        // FNV-1a
        let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        self.derive(h)
    }

    pub fn rng(self) -> StreamRng {
        StreamRng::seed_from_u64(self.0)
    }

    pub fn stream(self, index: u64) -> StreamRng {
        self.derive(index).rng()
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// Fills `out` with independent ±1 signs, 64 per generator word.
pub fn fill_signs<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for block in out.chunks_mut(64) {
        let bits: u64 = rng.random();
        for (i, o) in block.iter_mut().enumerate() {
            *o = if (bits >> i) & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
}

/// Runs `trials` independent trials in parallel, trial `i` receiving the
/// stream `seed.derive(i)`. Output order matches trial order.
pub fn par_trials<T, F>(seed: Seed, trials: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut StreamRng) -> T + Sync + Send,
{
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.stream(i as u64);
            f(i, &mut rng)
        })
        .collect()
}

/// Fallible variant of [`par_trials`]; the first error in trial order wins.
pub fn try_par_trials<T, E, F>(seed: Seed, trials: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize, &mut StreamRng) -> Result<T, E> + Sync + Send,
{
    par_trials(seed, trials, f).into_iter().collect()
}
