//! Deterministic random streams.
//!
//! Every random quantity in a run is drawn from a stream keyed by
//! `(master_seed, purpose, a, b)`, so that the numbers a client sees in a
//! round do not depend on which thread runs it or in what order. The
//! algorithm is fixed and documented so other implementations can reproduce
//! the same sequences bit for bit:
//!
//! * `splitmix64(x)` is the standard SplitMix64 step: add the golden gamma
//!   `0x9E3779B97F4A7C15`, then apply the Stafford "mix13" finalizer.
//! * A stream key is `k0 = splitmix64(master)`, then
//!   `k_{i+1} = splitmix64(k_i ^ word_i)` for `word = [purpose, a, b]`.
//! * The `i`-th output (`i = 0, 1, ...`) of a stream is
//!   `mix(key + (i + 1) * gamma)`, i.e. SplitMix64 seeded with `key`.
//! * Uniforms on the open interval (0, 1) are `((x >> 11) + 0.5) / 2^53`.
//! * Standard normals come in Box–Muller pairs
//!   `sqrt(-2 ln u1) * (cos 2πu2, sin 2πu2)`, consumed cosine first.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// What a stream is used for. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sampling = 2,
    Noise = 3,
    Partition = 4,
    Data = 5,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn splitmix64(x: u64) -> u64 {
    mix(x.wrapping_add(GAMMA))
}

/// Derives the key of the stream `(purpose, a, b)` under `master`.
pub fn stream_key(master: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    [purpose as u64, a, b].iter().fold(splitmix64(master), |k, &w| splitmix64(k ^ w))
}

/// Counter-based SplitMix64 stream with a Box–Muller normal sampler.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Stream {
    pub fn from_key(key: u64) -> Self {
        Self { key, counter: 0, spare: None }
    }

    pub fn new(master: u64, purpose: Purpose, a: u64, b: u64) -> Self {
        Self::from_key(stream_key(master, purpose, a, b))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Integer in `[0, n)` by 128-bit multiply-shift.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }

    /// `k` distinct values from `0..n` by partial Fisher–Yates, sorted ascending.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} items from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
        pool
    }

    /// Full Fisher–Yates shuffle, drawing from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
