//! Minimal f64 neural-net kernel: parameters, initializers, the optimizer,
//! and layers with explicit forward/backward passes.
//!
//! Everything is deterministic: seeded init, no threading, no atomics.

mod conv;
mod layers;

pub use conv::{Conv2d, GlobalAvgPool, GroupNorm, MaxPool2};
pub use layers::{Linear, Normalize, Relu, Relu4};

use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Row-major (batch, features) matrix.
pub type Mat = Array2<f64>;
/// (batch, channels, height, width) image tensor.
pub type Im = Array4<f64>;

/// A trainable tensor together with its gradient and optimizer moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
    /// Weight decay applies only to weight matrices, not biases/norm params.
    pub decay: bool,
}

impl Param {
    pub fn new(value: ArrayD<f64>, decay: bool) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// He-uniform initialization for a tensor with the given fan-in.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut a = ArrayD::zeros(shape.to_vec());
    for v in a.iter_mut() {
        *v = rng.random_range(-limit..limit);
    }
    a
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
        }
    }

    /// One update over the given parameters; gradients are consumed (zeroed).
    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.m)
                .and(&mut p.v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
                });
            p.zero_grad();
        }
    }
}

/// Plain SGD step (used by diagnostics that reason about gradient signs).
pub fn sgd_step(params: Vec<&mut Param>, lr: f64) {
    for p in params {
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .for_each(|w, &g| *w -= lr * g);
        p.zero_grad();
    }
}

/// FNV-1a checksum over parameter names and value bits; used to assert
/// that frozen modules never change.
pub fn params_checksum(params: &[(String, &Param)]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (name, p) in params {
        for b in name.as_bytes() {
            eat(*b);
        }
        for v in p.value.iter() {
            for b in v.to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}
