//! Seed derivation and portable samplers.
//!
//! All randomness in the crate flows through ChaCha8 streams seeded from a
//! master seed plus a purpose label. ChaCha output is platform-independent
//! and the samplers below use only IEEE arithmetic plus `libm`, so fixed
//! seeds reproduce byte-identical artifacts everywhere.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from a master seed and a label (splitmix64 over the
/// label hash). Distinct labels give independent streams.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

/// Uniform in [0, 1), 24 bits of mantissa, identical on every platform.
pub fn uniform_f32(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
}

pub fn uniform_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

pub fn uniform_range(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * uniform_f32(rng)
}

/// Uniform integer in [0, n).
pub fn uniform_usize(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0);
    // Rejection sampling over the top range to stay unbiased.
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

pub fn uniform_isize(rng: &mut ChaCha8Rng, lo: isize, hi_inclusive: isize) -> isize {
    debug_assert!(hi_inclusive >= lo);
    lo + uniform_usize(rng, (hi_inclusive - lo + 1) as usize) as isize
}

/// Standard normal via Box–Muller (libm transcendentals).
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = loop {
        let u = uniform_f64(rng);
        if u > 0.0 {
            break u;
        }
    };
    let u2 = uniform_f64(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

pub fn normal_f32(rng: &mut ChaCha8Rng) -> f32 {
    normal_f64(rng) as f32
}

/// Rayleigh with the scale chosen so the mean is 1.
pub fn rayleigh_unit_mean(rng: &mut ChaCha8Rng) -> f32 {
    let sigma = libm::sqrt(2.0 / std::f64::consts::PI);
    let u = loop {
        let u = uniform_f64(rng);
        if u > 0.0 {
            break u;
        }
    };
    (sigma * libm::sqrt(-2.0 * libm::log(u))) as f32
}

pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a1 = stream(7, "net1");
        let mut a2 = stream(7, "net1");
        let mut b = stream(7, "net2");
        let xs: Vec<u32> = (0..8).map(|_| a1.next_u32()).collect();
        let ys: Vec<u32> = (0..8).map(|_| a2.next_u32()).collect();
        let zs: Vec<u32> = (0..8).map(|_| b.next_u32()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = stream(3, "normal");
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = normal_f64(&mut rng);
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn rayleigh_mean_is_one() {
        let mut rng = stream(9, "ray");
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| rayleigh_unit_mean(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
