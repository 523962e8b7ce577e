//! Seeded random streams.
//!
//! Every run draws from xoshiro256** generators. The base generator is seeded
//! with `seed_from_u64(seed)` (SplitMix64 expansion); stream `k` is the base
//! state advanced by `k` calls to `jump()`, i.e. `k · 2^128` steps, so streams
//! never overlap and do not depend on how many draws another stream made.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

pub type StreamRng = Xoshiro256StarStar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 0,
    Pairs = 1,
    Negatives = 2,
    Constraints = 3,
    Data = 4,
    Objective = 5,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    for _ in 0..(which as u64) {
        rng.jump();
    }
    rng
}

/// The generators owned by one optimizer run. Serialized verbatim into
/// checkpoints so a resumed run continues the exact same sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStreams {
    pub pairs: StreamRng,
    pub negatives: StreamRng,
    pub constraints: StreamRng,
    pub objective: StreamRng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        RunStreams {
            pairs: stream(seed, Stream::Pairs),
            negatives: stream(seed, Stream::Negatives),
            constraints: stream(seed, Stream::Constraints),
            objective: stream(seed, Stream::Objective),
        }
    }
}

/// `k` distinct indices from `0..n`, uniformly without replacement, in
/// ascending order. `k == n` returns `0..n` without consuming randomness.
pub fn sample_without_replacement<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} of {n}");
    if k == n {
        return (0..n).collect();
    }
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let mut a = stream(7, Stream::Pairs);
        let mut b = stream(7, Stream::Pairs);
        let mut c = stream(7, Stream::Negatives);
        let xa: u64 = a.random();
        assert_eq!(xa, b.random::<u64>());
        assert_ne!(xa, c.random::<u64>());
    }

    #[test]
    fn full_sample_is_identity() {
        let mut r = stream(1, Stream::Init);
        let before = r.clone();
        assert_eq!(sample_without_replacement(&mut r, 5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(r, before);
    }

    #[test]
    fn partial_sample_distinct_sorted() {
        let mut r = stream(3, Stream::Init);
        let s = sample_without_replacement(&mut r, 100, 10);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&i| i < 100));
    }

    #[test]
    fn permutation_is_bijection() {
        let mut r = stream(3, Stream::Data);
        let mut p = permutation(&mut r, 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
