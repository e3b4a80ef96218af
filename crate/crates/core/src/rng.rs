//! Counter-based random streams.
//!
//! A stream is keyed by `(seed, purpose, index)`: the seed and purpose select a
//! ChaCha key and the index selects one of its 2^64 independent streams, so a
//! replicate draws the same numbers no matter which worker runs it.

use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream for replicate `index` of the task named `purpose`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> Stream {
    let mut key = [0u8; 32];
    let mut s = splitmix(seed ^ splitmix(fnv1a(purpose)));
    for chunk in key.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Uniform on `[0, 1)`.
#[inline]
pub fn uniform<T: Real>(rng: &mut Stream) -> T {
    T::lit(rng.random::<f64>())
}

/// Uniform on the open interval `(0, 1)`.
#[inline]
pub fn uniform_open<T: Real>(rng: &mut Stream) -> T {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return T::lit(u);
        }
    }
}

#[inline]
pub fn standard_normal<T: Real>(rng: &mut Stream) -> T {
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    T::lit(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, "x", 3), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, "x", 3), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, "x", 4), |r, _| Some(r.random())).collect();
        let d: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, "y", 3), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn open_uniform_is_positive() {
        let mut r = stream(1, "u", 0);
        for _ in 0..1000 {
            let u: f64 = uniform_open(&mut r);
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
