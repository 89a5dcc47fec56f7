//! Counter-based SplitMix64 generator.
//!
//! Draw `i` (0-based) of a stream with key `k` is
//! `mix(k + (i + 1) * 0x9E3779B97F4A7C15)` where `mix` is the SplitMix64
//! finalizer. Keys of substreams are `mix(parent_key ^ mix(id + GAMMA))`,
//! applied once per id. Everything is plain wrapping `u64` arithmetic, so
//! streams are identical on every platform and easy to reproduce elsewhere.
//!
//! Derived distributions:
//! - `next_f64`: top 53 bits scaled by 2^-53, in `[0, 1)`.
//! - `below(n)`: `(next_u64 as u128 * n) >> 64`.
//! - `normal`: Box-Muller on two draws, cosine branch only.
//! - `gumbel`: `-ln(-ln(u))` with `u = (top 53 bits + 0.5) * 2^-53`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed),
            counter: 0,
        }
    }

    /// Independent stream identified by `ids` under this stream's key.
    /// The parent's position does not matter.
    pub fn substream(&self, ids: &[u64]) -> Rng {
        let key = ids
            .iter()
            .fold(self.key, |k, &id| mix(k ^ mix(id.wrapping_add(GAMMA))));
        Rng { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard Gumbel(0, 1) draw.
    pub fn gumbel(&mut self) -> f64 {
        let u = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        -(-u.ln()).ln()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
