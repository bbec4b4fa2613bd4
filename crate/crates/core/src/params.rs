//! Named parameter tensors and their gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform in `±1 / sqrt(fan_in)`, the usual linear/conv default.
    FanIn(usize),
    Normal(f64),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => alloc::vec![T::zero(); n],
            Init::Ones => alloc::vec![T::one(); n],
            Init::Xavier { fan_in, fan_out } => {
                let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                uniform(n, a, rng)
            }
            Init::FanIn(fan_in) => {
                let a = 1.0 / libm::sqrt(fan_in as f64);
                uniform(n, a, rng)
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("std must be positive");
                (0..n).map(|_| T::c(d.sample(rng))).collect()
            }
        };
        self.push(name.into(), shape.to_vec(), data)
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}: shape/data mismatch");
        self.params.push(ParamTensor { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Same names and shapes, values converted to another scalar type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&x| U::c(x.f64())).collect(),
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f64` values, hex encoded.
    /// Used to prove a representation stayed frozen.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &x in &p.data {
                h.update(x.f64().to_le_bytes());
            }
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            s.push(hex_digit(b >> 4));
            s.push(hex_digit(b & 0xf));
        }
        s
    }
}

fn hex_digit(v: u8) -> char {
    char::from_digit(v as u32, 16).unwrap()
}

fn uniform<T: Real, R: Rng + ?Sized>(n: usize, a: f64, rng: &mut R) -> Vec<T> {
    let d = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..n).map(|_| T::c(d.sample(rng))).collect()
}

/// Per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { slots: alloc::vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        match &mut self.slots[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> T {
        let mut acc = 0.0f64;
        for g in self.slots.iter().flatten() {
            for &x in g {
                let x = x.f64();
                acc += x * x;
            }
        }
        T::c(libm::sqrt(acc))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", &[2, 3], Init::FanIn(3), &mut rng);
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        s.get_mut(id).data[0] += 1e-3;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn cast_roundtrip_keeps_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.add("a", &[4], Init::Normal(1.0), &mut rng);
        let d: ParamStore<f64> = s.cast();
        assert_eq!(d.get(ParamId(0)).shape, vec![4]);
        assert_eq!(d.cast::<f32>(), s);
    }
}
