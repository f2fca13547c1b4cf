//! Named, splittable random streams.
//!
//! Every random draw in the library comes from a [`Rng`] derived from a run
//! seed by a path of labels (`"backbone/init"`, `"expert/task-3/init"`, ...).
//! The underlying generator is ChaCha20, which is counter based, so a child
//! stream depends only on `(seed, label path)` and never on how many numbers
//! a sibling stream consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha20Rng,
    seed: u64,
    stream: u64,
    label: String,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0, String::new())
    }

    fn with_stream(seed: u64, stream: u64, label: String) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            seed,
            stream,
            label,
        }
    }

    /// Derives an independent child stream. Splitting is a pure function of
    /// the parent's identity and `label`.
    pub fn split(&self, label: &str) -> Rng {
        let stream = mix(self.stream ^ fnv1a(label.as_bytes()));
        let label = if self.label.is_empty() {
            label.to_string()
        } else {
            format!("{}/{}", self.label, label)
        };
        Self::with_stream(self.seed, stream, label)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Full label path of this stream, recorded in artifact metadata.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection keeps this unbiased.
        let n64 = n as u64;
        loop {
            let x = self.inner.next_u64();
            let m = (x as u128) * (n64 as u128);
            let low = m as u64;
            if low >= n64.wrapping_neg() % n64 {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
