//! Named, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and a 64-bit
//! stream id. Deriving a child by name only mixes the name into the key, so a
//! parameter's samples depend on `(seed, name)` and not on how many other
//! parameters were drawn before it.

use rand::distr::{Distribution, Open01};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream identified by `name`. Independent of the parent's position.
    pub fn split(&self, name: &str) -> Rng {
        let key = splitmix(self.seed ^ splitmix(self.stream));
        Rng::with_stream(key, fnv1a(name.as_bytes()))
    }

    /// Child stream identified by an integer (epochs, grid cells, probes).
    pub fn split_index(&self, index: u64) -> Rng {
        self.split(&format!("#{index}"))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform sample on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        Open01.sample(&mut self.inner)
    }

    /// Uniform sample on the open interval (-bound, +bound).
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.open01() - 1.0) * bound
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.random_range(0..n)
    }

    pub fn sample<T, D: Distribution<T>>(&mut self, dist: &D) -> T {
        dist.sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_ignores_parent_position() {
        let parent = Rng::new(11);
        let mut advanced = parent.clone();
        for _ in 0..50 {
            advanced.next_u64();
        }
        let mut x = parent.split("enc.0.ffn.w1");
        let mut y = advanced.split("enc.0.ffn.w1");
        assert_eq!(x.next_u64(), y.next_u64());
        let mut z = parent.split("enc.0.ffn.w2");
        assert_ne!(parent.split("enc.0.ffn.w1").next_u64(), z.next_u64());
    }

    #[test]
    fn symmetric_stays_open() {
        let mut r = Rng::new(3);
        for _ in 0..10_000 {
            let v = r.symmetric(0.5);
            assert!(v > -0.5 && v < 0.5);
        }
    }
}
