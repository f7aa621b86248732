use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util::Rng;

/// Named parameter tensors with a flat-vector view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::config(format!(
                "flat vector has {} entries, store holds {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| (a.rows, a.cols) == (b.rows, b.cols))
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    /// Replaces values from `other`, which must share the layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::config("parameter layout mismatch"));
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }
}

/// Orthogonal `rows×cols` matrix scaled by `gain`: columns orthonormal when
/// tall, rows orthonormal when wide.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut Rng) -> Tensor {
    if rows == 0 || cols == 0 {
        return Tensor::zeros(rows, cols);
    }
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let rmat = qr.r();
    for j in 0..c {
        if rmat[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.data[i * cols + j] = gain * v;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let n = store.num_scalars();
        Adam { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut off = 0;
        for (id, g) in grads.0.iter().enumerate() {
            let p = store.tensor_mut(id);
            for (k, (w, &gk)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let i = off + k;
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * gk;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * gk * gk;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            off += g.len();
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;
    use approx::assert_relative_eq;

    #[test]
    fn flat_view_round_trips() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        s.add("b", Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]));
        let flat = s.flat();
        let mut t = s.clone();
        t.set_flat(&vec![0.0; 7]).unwrap();
        t.set_flat(&flat).unwrap();
        assert_eq!(s, t);
        assert!(t.set_flat(&[1.0]).is_err());
        assert_eq!(s.id("b"), Some(1));
    }

    #[test]
    fn orthogonal_tall_matrix_has_scaled_identity_gram() {
        let mut rng = rng_from_seed(5);
        let gain = 2f64.sqrt();
        let w = orthogonal(20, 12, gain, &mut rng);
        let gram = w.t_matmul(&w);
        for i in 0..12 {
            for j in 0..12 {
                let expected = if i == j { 2.0 } else { 0.0 };
                assert!((gram.get(i, j) - expected).abs() < 1e-10);
            }
        }
        let wide = orthogonal(4, 12, gain, &mut rng);
        let gram = wide.matmul_t(&wide);
        for i in 0..4 {
            assert_relative_eq!(gram.get(i, i), 2.0, epsilon = 1e-10);
        }
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &s);
        adam.step(&mut s, &Gradients(vec![Tensor::scalar(0.0)]));
        assert_eq!(s.tensor(0).item(), 1.5);
    }

    #[test]
    fn adam_two_step_hand_trace() {
        let lr = 0.01;
        let mut s = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &s);
        adam.step(&mut s, &Gradients(vec![Tensor::scalar(0.5)]));
        // m1 = 0.05, v1 = 0.00025; m̂ = 0.5, v̂ = 0.25
        let x1 = 1.0 - lr * 0.5 / (0.5 + 1e-8);
        assert_relative_eq!(s.tensor(0).item(), x1, epsilon = 1e-15);
        adam.step(&mut s, &Gradients(vec![Tensor::scalar(-1.0)]));
        let m2 = 0.9 * 0.05 + 0.1 * -1.0;
        let v2 = 0.999 * 0.00025 + 0.001 * 1.0;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64 * 0.999);
        let x2 = x1 - lr * mhat / (vhat.sqrt() + 1e-8);
        assert_relative_eq!(s.tensor(0).item(), x2, epsilon = 1e-15);
    }

    #[test]
    fn grad_norm_clipping() {
        let mut g = Gradients(vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])]);
        assert_eq!(clip_grad_norm(&mut g, 0.5), 5.0);
        assert_relative_eq!(g.norm(), 0.5, epsilon = 1e-12);
        let mut small = Gradients(vec![Tensor::from_vec(1, 2, vec![0.1, 0.0])]);
        clip_grad_norm(&mut small, 0.5);
        assert_eq!(small.0[0].data, vec![0.1, 0.0]);
    }
}
