//! Parameter storage, layers and optimizers on top of [`crate::tape`].

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, Mat, Tape, Unary, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors, addressed by module path (`decoder.0.gate_l.w`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Mat>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf_shared(v.clone())).collect(),
        }
    }

    /// Replaces a parameter by name, checking its shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<(), String> {
        let id = self.id(name).ok_or_else(|| format!("unknown parameter {name}"))?;
        if self.get(id).dim() != value.dim() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.get(id).dim(),
                value.dim()
            ));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }
}

/// Parameters placed on a tape, indexable by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter in store order.
    pub fn grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Mat> {
        self.vars
            .iter()
            .zip(store.values.iter())
            .map(|(v, p)| grads.get_or_zeros(*v, p.dim()))
            .collect()
    }
}

/// Glorot-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.b"), Mat::zeros((1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        tape.add_row(y, p.var(self.b))
    }

    /// Plain-matrix evaluation without recording.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.get(self.w)) + store.get(self.b)
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Mat::zeros((1, dim)));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm(x, self.eps);
        let n = tape.mul_row(n, p.var(self.gamma));
        tape.add_row(n, p.var(self.beta))
    }
}

/// Two-layer perceptron `in -> hidden -> out` with a nonlinearity in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Unary,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: (usize, usize, usize),
        act: Unary,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dims.0, dims.1),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dims.1, dims.2),
            act,
        }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = tape.unary(self.fc1.forward(tape, p, x), self.act);
        self.fc2.forward(tape, p, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW). Zero gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// Adam with optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.values.iter().map(|p| Mat::zeros(p.dim())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = Arc::make_mut(&mut store.values[i]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
                });
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_elem((1, 2), 5.0));
        let mut opt = Adam::new(AdamConfig::adam(0.1), &store);
        for _ in 0..500 {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let shifted = tape.add_scalar(p.var(x), -1.0);
            let loss = tape.sum(tape.unary(shifted, Unary::Square));
            let g = p.grads(&store, &tape.backward(loss));
            opt.step(&mut store, &g);
        }
        for v in store.get(x).iter() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Mat::from_elem((1, 1), 1.0));
        let mut opt = Adam::new(AdamConfig::adamw(0.1, 0.5), &store);
        opt.step(&mut store, &[Mat::zeros((1, 1))]);
        assert!((store.iter().next().unwrap().1[[0, 0]] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_plain_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2);
        let x = xavier(&mut rng, 4, 3);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.leaf(x.clone());
        let y = lin.forward(&tape, &p, xv);
        assert_eq!(*tape.value(y), lin.apply(&store, &x));
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = permutation(&mut rng, 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
