//! Weight synthesis for the untrained networks.
//!
//! Two generators share the [`WeightGenerator`] trait:
//!
//! * `hashed` never stores a matrix. The weight linking feature `f` to output
//!   neuron `j` in round `t` is derived from a seeded 32-bit xxHash of the
//!   feature id and round, whose bits are forced into an IEEE 754 binary32
//!   value in `[1, 2)` and mapped affinely onto `[-1, 1)`.
//! * `dense` draws an `m x K` matrix uniformly from `[-1, 1)` with a seeded
//!   ChaCha20 stream and zeroes a fixed fraction of its entries.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh32::xxh32;

use crate::error::{GbunError, Result};
use crate::registry::Registry;

/// Clears the sign bit and the top exponent bit.
pub const MASK1: u32 = 0b0011_1111_1111_1111_1111_1111_1111_1111;
/// Sets the exponent to the bias (2^0).
pub const MASK2: u32 = 0b0011_1111_1000_0000_0000_0000_0000_0000;

/// Name recorded in model files for the dense-mode generator.
pub const DENSE_PRNG: &str = "chacha20";

/// Reinterprets `(h & MASK1) | MASK2` as binary32; always in `[1, 2)`.
#[inline]
pub fn bits_to_unit_float(h: u32) -> f64 {
    f32::from_bits((h & MASK1) | MASK2) as f64
}

/// Affine map `[1, 2) -> [-1, 1)`.
#[inline]
pub fn unit_to_signed(u: f64) -> f64 {
    debug_assert!((1.0..2.0).contains(&u), "unit_to_signed({u}) out of [1, 2)");
    2.0 * u - 3.0
}

/// Hash message for a feature in a round: LE u64 feature id, LE u32 round.
#[inline]
fn hash_message(feature_id: u64, round: u32) -> [u8; 12] {
    let mut msg = [0u8; 12];
    msg[..8].copy_from_slice(&feature_id.to_le_bytes());
    msg[8..].copy_from_slice(&round.to_le_bytes());
    msg
}

/// Hashed-mode weight between `feature_id` and output neuron `neuron`.
#[inline]
pub fn feature_weight(feature_id: u64, round: u32, neuron: u32) -> f64 {
    unit_to_signed(bits_to_unit_float(xxh32(&hash_message(feature_id, round), neuron)))
}

/// Uniform draw from `[-1, 1)` using the top 53 bits of one 64-bit output.
#[inline]
fn next_signed_unit(rng: &mut ChaCha20Rng) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * u - 1.0
}

/// Unbiased integer in `[0, bound)` by multiply-and-reject.
fn next_below(rng: &mut ChaCha20Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let wide = rng.next_u64() as u128 * bound as u128;
        if (wide as u64) >= threshold {
            return (wide >> 64) as u64;
        }
    }
}

/// Dense `m x K` row-major matrix with entries uniform on `[-1, 1)`, of which
/// exactly `round(sparsify_fraction * m * K)` are then zeroed.
///
/// Fill order is row-major; the zeroed positions are the first entries of a
/// partial Fisher-Yates shuffle of the flat positions, drawn from the same
/// stream after the fill.
pub fn gen_dense_weights(seed: u64, m: usize, k: usize, sparsify_fraction: f64) -> Result<Vec<f64>> {
    if m == 0 || k == 0 {
        return Err(GbunError::config("dense weights need m >= 1 and K >= 1"));
    }
    if !(0.0..1.0).contains(&sparsify_fraction) {
        return Err(GbunError::config(format!(
            "sparsify fraction {sparsify_fraction} outside [0, 1)"
        )));
    }
    let len = m * k;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut weights: Vec<f64> = (0..len).map(|_| next_signed_unit(&mut rng)).collect();
    let zeros = (sparsify_fraction * len as f64).round() as usize;
    if zeros > 0 {
        let mut positions: Vec<usize> = (0..len).collect();
        for i in 0..zeros {
            let j = i + next_below(&mut rng, (len - i) as u64) as usize;
            positions.swap(i, j);
            weights[positions[i]] = 0.0;
        }
    }
    Ok(weights)
}

/// How a model's untrained networks are generated. Stored in the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightMode {
    Dense {
        base_seed: u64,
        sparsify_fraction: f64,
        prng: String,
    },
    Hashed {
        hash: String,
    },
}

impl WeightMode {
    pub fn dense(base_seed: u64, sparsify_fraction: f64) -> Self {
        WeightMode::Dense {
            base_seed,
            sparsify_fraction,
            prng: DENSE_PRNG.to_string(),
        }
    }

    pub fn hashed() -> Self {
        WeightMode::Hashed {
            hash: "xxh32".to_string(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightMode::Dense { .. } => "dense",
            WeightMode::Hashed { .. } => "hashed",
        }
    }
}

/// Produces the input-to-output weights of round `round`'s network.
pub trait WeightGenerator: Send + Sync {
    fn name(&self) -> &'static str;

    fn mode(&self) -> WeightMode;

    /// Weights for each listed feature id, `features.len() x k` row-major.
    fn weights_for(&self, round: u32, features: &[u32], k: usize) -> Result<Vec<f64>>;
}

/// Weights regenerated from `xxh32(LE64(feature) ++ LE32(round), seed = neuron)`.
#[derive(Debug, Default)]
pub struct HashedWeights {
    hash_calls: AtomicU64,
}

impl HashedWeights {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total hash evaluations so far.
    pub fn hash_calls(&self) -> u64 {
        self.hash_calls.load(Ordering::Relaxed)
    }
}

impl WeightGenerator for HashedWeights {
    fn name(&self) -> &'static str {
        "hashed"
    }

    fn mode(&self) -> WeightMode {
        WeightMode::hashed()
    }

    fn weights_for(&self, round: u32, features: &[u32], k: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(features.len() * k);
        for &f in features {
            let msg = hash_message(f as u64, round);
            out.extend((0..k as u32).map(|j| unit_to_signed(bits_to_unit_float(xxh32(&msg, j)))));
        }
        self.hash_calls
            .fetch_add((features.len() * k) as u64, Ordering::Relaxed);
        Ok(out)
    }
}

/// Materialized uniform matrix seeded with `base_seed + round`.
#[derive(Debug, Clone)]
pub struct DenseWeights {
    base_seed: u64,
    sparsify_fraction: f64,
    num_features: usize,
}

impl DenseWeights {
    pub fn new(base_seed: u64, sparsify_fraction: f64, num_features: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsify_fraction) {
            return Err(GbunError::config(format!(
                "sparsify fraction {sparsify_fraction} outside [0, 1)"
            )));
        }
        Ok(Self {
            base_seed,
            sparsify_fraction,
            num_features,
        })
    }

    pub fn round_seed(&self, round: u32) -> u64 {
        self.base_seed.wrapping_add(round as u64)
    }
}

impl WeightGenerator for DenseWeights {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn mode(&self) -> WeightMode {
        WeightMode::dense(self.base_seed, self.sparsify_fraction)
    }

    fn weights_for(&self, round: u32, features: &[u32], k: usize) -> Result<Vec<f64>> {
        if let Some(&bad) = features.iter().find(|&&f| f as usize >= self.num_features) {
            return Err(GbunError::data(format!(
                "feature id {} outside the dense network's {} inputs",
                bad as u64 + 1,
                self.num_features
            )));
        }
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let full = gen_dense_weights(
            self.round_seed(round),
            self.num_features,
            k,
            self.sparsify_fraction,
        )?;
        let mut out = Vec::with_capacity(features.len() * k);
        for &f in features {
            let f = f as usize;
            out.extend_from_slice(&full[f * k..(f + 1) * k]);
        }
        Ok(out)
    }
}

/// Builds a generator from a stored mode and the model's input width.
pub type GeneratorFactory = fn(&WeightMode, usize) -> Result<Box<dyn WeightGenerator>>;

pub fn generator_registry() -> Registry<GeneratorFactory> {
    let mut reg: Registry<GeneratorFactory> = Registry::new("weight mode");
    reg.register("hashed", |mode, _m| match mode {
        WeightMode::Hashed { hash } if hash == "xxh32" => Ok(Box::new(HashedWeights::new())),
        WeightMode::Hashed { hash } => Err(GbunError::config(format!("unsupported hash `{hash}`"))),
        _ => Err(GbunError::config("hashed factory given a dense mode")),
    });
    reg.register("dense", |mode, m| match mode {
        WeightMode::Dense {
            base_seed,
            sparsify_fraction,
            prng,
        } if prng == DENSE_PRNG => Ok(Box::new(DenseWeights::new(*base_seed, *sparsify_fraction, m)?)),
        WeightMode::Dense { prng, .. } => Err(GbunError::config(format!("unsupported PRNG `{prng}`"))),
        _ => Err(GbunError::config("dense factory given a hashed mode")),
    });
    reg
}

/// Looks up and instantiates the generator for `mode`.
pub fn build_generator(mode: &WeightMode, num_features: usize) -> Result<Box<dyn WeightGenerator>> {
    let reg = generator_registry();
    let factory = reg.get(mode.name())?;
    factory(mode, num_features)
}
