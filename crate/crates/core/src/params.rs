//! Named parameter storage, initialization and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::real::Real;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±fan_in^(-1/2)`.
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| T::c(rng.random_range(-bound..bound))).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| T::c(dist.sample(rng))).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            buf.clear();
            for &v in m.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn zeros_like(&self) -> Vec<Mat<T>> {
        self.values.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
}

impl<T: Real> Adam<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; `grads` is indexed like the store.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Mat<T>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::c(self.beta1);
        let b2 = T::c(self.beta2);
        let one = T::one();
        let bc1 = T::c(1.0 - self.beta1.powi(t));
        let bc2 = T::c(1.0 - self.beta2.powi(t));
        let lr = T::c(lr);
        let eps = T::c(self.eps);
        for (k, g) in grads.iter().enumerate() {
            let p = store.values[k].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
