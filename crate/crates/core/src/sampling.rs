//! Seeded sampling of the distribution families used throughout synthesis.
//!
//! Every random quantity in the engine is drawn from a [`DistSpec`] through a
//! [`SeededRng`]. The generator is ChaCha8 (`rand_chacha` 0.9), chosen because
//! its output stream is fully specified and identical on every platform.
//! Parallel work never shares a stream: callers [`SeededRng::fork`] independent
//! children keyed by a tag (patch index, pipeline stage, ...).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name and version of the PRNG backing [`SeededRng`], recorded in manifests.
pub const PRNG_NAME: &str = "ChaCha8 (rand_chacha 0.9)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("{family:?}: lower bound {a} exceeds upper bound {b}")]
    ReversedBounds { family: Family, a: f64, b: f64 },
    #[error("{family:?}: spread parameter must be non-negative and finite, got {b}")]
    NegativeSpread { family: Family, b: f64 },
    #[error("Gamma mean must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("{family:?}: parameters must be finite (a={a}, b={b})")]
    NonFinite { family: Family, a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `a` = mean, `b` = variance.
    Normal,
    /// `a`, `b` = mean and variance of the logarithm.
    #[serde(alias = "log_normal")]
    Lognormal,
    /// Continuous uniform on `[a, b]`.
    Uniform,
    /// Discrete uniform on the integers `a..=b`.
    UniformInt,
    /// `a` = mean, `b` = standard deviation.
    Gamma,
}

/// A distribution family with its two parameters.
///
/// Serializes as `{ family = "...", a = ..., b = ... }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSpec {
    pub family: Family,
    pub a: f64,
    pub b: f64,
}

impl DistSpec {
    pub const fn normal(mean: f64, variance: f64) -> Self {
        Self { family: Family::Normal, a: mean, b: variance }
    }

    pub const fn lognormal(log_mean: f64, log_variance: f64) -> Self {
        Self { family: Family::Lognormal, a: log_mean, b: log_variance }
    }

    pub const fn uniform(a: f64, b: f64) -> Self {
        Self { family: Family::Uniform, a, b }
    }

    pub const fn uniform_int(a: i64, b: i64) -> Self {
        Self { family: Family::UniformInt, a: a as f64, b: b as f64 }
    }

    pub const fn gamma(mean: f64, sd: f64) -> Self {
        Self { family: Family::Gamma, a: mean, b: sd }
    }

    /// A distribution that always yields `value`.
    pub const fn constant(value: f64) -> Self {
        Self::uniform(value, value)
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        let Self { family, a, b } = *self;
        if !a.is_finite() || !b.is_finite() {
            return Err(SamplingError::NonFinite { family, a, b });
        }
        match family {
            Family::Uniform | Family::UniformInt => {
                if a > b {
                    return Err(SamplingError::ReversedBounds { family, a, b });
                }
                if family == Family::UniformInt && a.ceil() > b.floor() {
                    return Err(SamplingError::ReversedBounds { family, a, b });
                }
            }
            Family::Normal | Family::Lognormal => {
                if b < 0.0 {
                    return Err(SamplingError::NegativeSpread { family, b });
                }
            }
            Family::Gamma => {
                if b < 0.0 {
                    return Err(SamplingError::NegativeSpread { family, b });
                }
                if a <= 0.0 {
                    return Err(SamplingError::NonPositiveMean(a));
                }
            }
        }
        Ok(())
    }

    /// Analytic mean of the distribution.
    pub fn mean(&self) -> f64 {
        match self.family {
            Family::Normal | Family::Gamma => self.a,
            Family::Lognormal => (self.a + self.b / 2.0).exp(),
            Family::Uniform => 0.5 * (self.a + self.b),
            Family::UniformInt => 0.5 * (self.a.ceil() + self.b.floor()),
        }
    }

    /// Analytic variance of the distribution.
    pub fn variance(&self) -> f64 {
        match self.family {
            Family::Normal => self.b,
            Family::Gamma => self.b * self.b,
            Family::Lognormal => (self.b.exp() - 1.0) * (2.0 * self.a + self.b).exp(),
            Family::Uniform => (self.b - self.a).powi(2) / 12.0,
            Family::UniformInt => {
                let n = self.b.floor() - self.a.ceil() + 1.0;
                (n * n - 1.0) / 12.0
            }
        }
    }

    /// Draw one value. Panics only if the spec is invalid; call
    /// [`DistSpec::validate`] first when the spec comes from user input.
    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        self.try_sample(rng).expect("invalid DistSpec")
    }

    pub fn try_sample(&self, rng: &mut SeededRng) -> Result<f64, SamplingError> {
        self.validate()?;
        let Self { a, b, .. } = *self;
        let value = match self.family {
            Family::Normal => {
                if b == 0.0 {
                    a
                } else {
                    Normal::new(a, b.sqrt()).expect("validated").sample(rng)
                }
            }
            Family::Lognormal => {
                if b == 0.0 {
                    a.exp()
                } else {
                    LogNormal::new(a, b.sqrt()).expect("validated").sample(rng)
                }
            }
            Family::Uniform => {
                if a == b {
                    a
                } else {
                    rng.random_range(a..=b)
                }
            }
            Family::UniformInt => {
                let (lo, hi) = (a.ceil() as i64, b.floor() as i64);
                rng.random_range(lo..=hi) as f64
            }
            Family::Gamma => {
                if b == 0.0 {
                    a
                } else {
                    let shape = a * a / (b * b);
                    let scale = b * b / a;
                    Gamma::new(shape, scale).expect("validated").sample(rng)
                }
            }
        };
        Ok(value)
    }

    /// Integer draw, for count-like parameters.
    pub fn sample_int(&self, rng: &mut SeededRng) -> i64 {
        self.sample(rng).round() as i64
    }
}

/// SplitMix64 finalizer; used to derive child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for child `tag` of `seed`.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Single-owner random stream identified by its seed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream. Depends only on this stream's seed and
    /// `tag`, never on how many values were already drawn.
    pub fn fork(&self, tag: u64) -> SeededRng {
        SeededRng::new(sub_seed(self.seed, tag))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for SeededRng {
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
