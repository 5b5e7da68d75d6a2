//! Named parameter storage.
//!
//! Parameters live outside any tape as plain buffers; a forward pass leafs
//! them onto its tape on first use. Initialization is keyed by parameter
//! name, so two models built with the same seed get bitwise-identical values
//! for every parameter they share, regardless of construction order.

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)).
    GlorotUniform { fan_in: usize, fan_out: usize },
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable sub-seed for a (base seed, stream tag, index) triple. Stable across
/// platforms and process runs; used wherever independent deterministic RNG
/// streams are needed (corpus splits, per-epoch shuffles, dropout tapes).
pub fn derive_seed(base: u64, tag: &str, idx: u64) -> u64 {
    let mut h = fnv1a64(tag.as_bytes()) ^ base.wrapping_mul(0x9E3779B97F4A7C15);
    h ^= idx.wrapping_mul(0xD6E8FEB86659FD93);
    h ^= h >> 32;
    h = h.wrapping_mul(0xD6E8FEB86659FD93);
    h ^= h >> 32;
    h
}

/// Ordered (name -> buffer) map. Iteration order is the sorted name order,
/// which fixes the gradient-reduction and update order everywhere.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    map: BTreeMap<String, Param<F>>,
    seed: u64,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            map: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create and initialize a parameter. Values are drawn in f64 from an
    /// RNG seeded by (store seed, name), then converted to `F`.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::GlorotUniform { fan_in, fan_out } => {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed.wrapping_mul(0x9E3779B97F4A7C15) ^ fnv1a64(name.as_bytes()),
                );
                (0..n)
                    .map(|_| F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * s))
                    .collect()
            }
        };
        self.map.insert(
            name.to_string(),
            Param {
                data,
                shape: shape.to_vec(),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.map.values().map(|p| p.data.len()).sum()
    }

    /// All values as one flat f64 vector, in name order.
    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.map
            .values()
            .flat_map(|p| p.data.iter().map(|v| v.as_f64()))
            .collect()
    }

    /// Overwrite all values from a flat f64 vector, in name order.
    pub fn set_from_flat_f64(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::contract(format!(
                "flat vector length {} vs parameter count {}",
                flat.len(),
                self.count()
            )));
        }
        let mut off = 0;
        for p in self.map.values_mut() {
            for v in p.data.iter_mut() {
                *v = F::from_f64(flat[off]);
                off += 1;
            }
        }
        Ok(())
    }

    /// Overwrite values from another store. Every name in `other` must exist
    /// here with a matching shape; names only present here keep their values.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for (name, p) in other.iter() {
            let mine = self.get_mut(name)?;
            if mine.shape != p.shape {
                return Err(Error::ShapeMismatch {
                    op: "load_from",
                    lhs: mine.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            mine.data = p.data.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::<f32>::new(42);
        a.register("w1", &[4, 4], Init::GlorotUniform { fan_in: 4, fan_out: 4 })
            .unwrap();
        a.register("w2", &[4, 4], Init::GlorotUniform { fan_in: 4, fan_out: 4 })
            .unwrap();
        let mut b = ParamStore::<f32>::new(42);
        b.register("w2", &[4, 4], Init::GlorotUniform { fan_in: 4, fan_out: 4 })
            .unwrap();
        b.register("w1", &[4, 4], Init::GlorotUniform { fan_in: 4, fan_out: 4 })
            .unwrap();
        assert_eq!(a.get("w1").unwrap().data, b.get("w1").unwrap().data);
        assert_eq!(a.get("w2").unwrap().data, b.get("w2").unwrap().data);
        assert_ne!(a.get("w1").unwrap().data, a.get("w2").unwrap().data);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.register("x", &[2], Init::Zeros).unwrap();
        assert!(s.register("x", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn count_sums_numels() {
        let mut s = ParamStore::<f32>::new(0);
        s.register("a", &[2, 3], Init::Zeros).unwrap();
        s.register("b", &[5], Init::Ones).unwrap();
        assert_eq!(s.count(), 11);
    }
}
