use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Grads, Graph, Var};
use super::real::Real;
use super::tensor::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor<f32>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    /// Places every parameter on `g` as a gradient leaf.
    pub fn leaves<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t.cast())).collect()
    }

    /// Places every parameter on `g` as a frozen constant.
    pub fn constants<T: Real>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.constant(t.cast())).collect()
    }

    /// Collects the gradient of each leaf in parameter order; missing
    /// gradients (unused parameters) come back as zeros.
    pub fn collect_grads<T: Real>(&self, vars: &[Var], grads: &mut Grads<T>) -> Vec<Tensor<f32>> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, t), v)| match grads.take(*v) {
                Some(g) => g.cast(),
                None => Tensor::zeros(t.shape()),
            })
            .collect()
    }
}

/// Cursor over parameter vars in registration order.
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, at: 0 }
    }

    pub fn next_var(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }

    pub fn consumed(&self) -> usize {
        self.at
    }
}

/// He-normal convolution kernel `[out, in, k, k]`.
pub fn conv_kernel<R: Rng>(out: usize, inp: usize, k: usize, rng: &mut R) -> Tensor<f32> {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..out * inp * k * k).map(|_| normal.sample(rng) as f32).collect();
    Tensor::from_vec(&[out, inp, k, k], data)
}

/// Uniform `[-1/sqrt(in), 1/sqrt(in)]` dense weight `[out, in]`.
pub fn dense_weight<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Tensor<f32> {
    let bound = 1.0 / (inp as f32).sqrt();
    let data = (0..out * inp).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(&[out, inp], data)
}

/// SGD with momentum and L2 weight decay (PyTorch update convention).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor<f32>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = d + self.weight_decay * *w;
                *m = self.momentum * *m + d;
                *w -= self.lr * *m;
            }
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor<f32>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}
