use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::Real;

/// A named trainable parameter block with its gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![T::ZERO; n],
            grad: vec![T::ZERO; n],
            velocity: vec![T::ZERO; n],
        }
    }

    /// He-normal initialization: `N(0, 2 / fan_in)`.
    pub fn he_normal(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        for v in &mut p.value {
            *v = T::from_f64(normal.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    /// Heavy-ball update: `v ← μ·v + g`, `θ ← θ − lr·v`.
    pub fn sgd_step(&mut self, lr: T, momentum: T) {
        for ((p, v), &g) in self.value.iter_mut().zip(&mut self.velocity).zip(&self.grad) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        let conv = |xs: &[T]| xs.iter().map(|v| U::from_f64(v.to_f64())).collect();
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            value: conv(&self.value),
            grad: conv(&self.grad),
            velocity: conv(&self.velocity),
        }
    }
}
