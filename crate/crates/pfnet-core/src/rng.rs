//! Deterministic random number generation and parameter initialization.
//!
//! The generator is hand-rolled (splitmix64-seeded xoshiro256++) so that a
//! fixed seed produces bit-identical streams on every platform and build,
//! independent of any external crate's implementation choices.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ with splitmix64 seeding.
#[derive(Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Derives an independent stream, e.g. one per named parameter.
    pub fn derive(&self, tag: u64) -> Rng {
        let mut sm = self.s[0] ^ self.s[2] ^ tag;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = (self.s[0].wrapping_add(self.s[3]))
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64) as f32
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        // u1 in (0, 1] to keep ln finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let u2 = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    pub fn uniform_usize(&mut self, bound: usize) -> usize {
        (self.next_u64() % bound as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Normal(0, sqrt(2/fan_out)) where fan_out = dims[0] * dims[2] * dims[3].
    KaimingFanOut,
    Uniform(f32, f32),
    Zeros,
    Ones,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaiming_fan_out" => Ok(InitScheme::KaimingFanOut),
            "zeros" => Ok(InitScheme::Zeros),
            "ones" => Ok(InitScheme::Ones),
            other => {
                if let Some(rest) = other
                    .strip_prefix("uniform(")
                    .and_then(|r| r.strip_suffix(')'))
                {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() == 2 {
                        let a = parts[0].trim().parse::<f32>();
                        let b = parts[1].trim().parse::<f32>();
                        if let (Ok(a), Ok(b)) = (a, b) {
                            return Ok(InitScheme::Uniform(a, b));
                        }
                    }
                }
                Err(Error::Config(format!("unknown init scheme '{other}'")))
            }
        }
    }
}

/// Fills a tensor of the given shape per the scheme; fixed seeds yield
/// bit-identical tensors.
pub fn rng_init(shape: Shape, scheme: InitScheme, seed: u64) -> Tensor {
    let n = shape.numel();
    let data = match scheme {
        InitScheme::Zeros => vec![0.0; n],
        InitScheme::Ones => vec![1.0; n],
        InitScheme::Uniform(lo, hi) => {
            let mut rng = Rng::new(seed);
            (0..n).map(|_| rng.uniform_in(lo, hi)).collect()
        }
        InitScheme::KaimingFanOut => {
            let dims = shape.dims();
            let fan_out = (dims[0] * dims[2] * dims[3]).max(1);
            let std = (2.0 / fan_out as f64).sqrt() as f32;
            let mut rng = Rng::new(seed);
            (0..n).map(|_| rng.normal() * std).collect()
        }
    };
    Tensor::new(shape, data).expect("length matches by construction")
}

/// FNV-1a hash of a byte string; used to derive per-name parameter seeds
/// and to fingerprint serialized specs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones_fill() {
        let z = rng_init(Shape::new(1, 1, 2, 2), InitScheme::Zeros, 7);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o = rng_init(Shape::new(1, 1, 2, 2), InitScheme::Ones, 7);
        assert!(o.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn kaiming_is_deterministic() {
        let a = rng_init(Shape::new(8, 3, 3, 3), InitScheme::KaimingFanOut, 42);
        let b = rng_init(Shape::new(8, 3, 3, 3), InitScheme::KaimingFanOut, 42);
        assert!(a.bit_eq(&b));
        let c = rng_init(Shape::new(8, 3, 3, 3), InitScheme::KaimingFanOut, 43);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn kaiming_std_tracks_fan_out() {
        // fan_out = 16 * 3 * 3 = 144, std = sqrt(2/144) ~ 0.1179
        let t = rng_init(Shape::new(16, 4, 3, 3), InitScheme::KaimingFanOut, 1);
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let var: f64 =
            t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t.numel() as f64;
        let expected = 2.0 / 144.0;
        assert!((var - expected).abs() < expected * 0.5, "var {var} vs {expected}");
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!(
            "kaiming_fan_out".parse::<InitScheme>().unwrap(),
            InitScheme::KaimingFanOut
        );
        assert_eq!(
            "uniform(-0.5, 0.5)".parse::<InitScheme>().unwrap(),
            InitScheme::Uniform(-0.5, 0.5)
        );
        assert!(matches!(
            "glorot".parse::<InitScheme>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let v = rng.uniform_in(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&v));
        }
    }
}
