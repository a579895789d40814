//! Parameter storage and optimization.
//!
//! All trainable state lives in a [`ParamBank`] arena. Slots are addressed by
//! stable [`ParamId`]s so network structures can be extended in place (section
//! growth) without disturbing existing parameters, and pruned slots can be
//! discarded while every other id stays valid.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tensor::Shape;

/// Stable handle into a [`ParamBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// One parameter slot: values, gradient accumulator, and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub label: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Learnable slots are visited by the optimizer; non-learnable slots hold
    /// state such as normalization running statistics.
    pub learnable: bool,
    /// Whether weight decay applies. Off for gate weights.
    pub decay: bool,
    /// Cleared when the owning connection is deadheaded; dead slots drop their
    /// storage and are skipped everywhere.
    pub alive: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Arena of parameters with stable ids.
#[derive(Debug, Clone, Default)]
pub struct ParamBank {
    params: Vec<Param>,
}

impl ParamBank {
    pub fn new() -> Self {
        ParamBank { params: Vec::new() }
    }

    pub fn slot_count(&self) -> usize {
        self.params.len()
    }

    fn push(&mut self, p: Param) -> ParamId {
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    /// Registers a learnable parameter with the given initial values.
    pub fn add(&mut self, label: String, shape: Shape, data: Vec<f64>, decay: bool) -> ParamId {
        let n = data.len();
        debug_assert_eq!(n, shape.len());
        self.push(Param {
            label,
            shape,
            data,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            learnable: true,
            decay,
            alive: true,
        })
    }

    /// Registers a non-learnable state slot (e.g. running statistics).
    pub fn add_state(&mut self, label: String, shape: Shape, data: Vec<f64>) -> ParamId {
        let n = data.len();
        debug_assert_eq!(n, shape.len());
        self.push(Param {
            label,
            shape,
            data,
            grad: Vec::new(),
            velocity: Vec::new(),
            learnable: false,
            decay: false,
            alive: true,
        })
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    /// Discards a slot's storage and marks it dead. The id stays allocated so
    /// other ids remain stable.
    pub fn kill(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.alive = false;
        p.data = Vec::new();
        p.grad = Vec::new();
        p.velocity = Vec::new();
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Element count over live learnable slots.
    pub fn learnable_elements(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.alive && p.learnable)
            .map(|p| p.len() as u64)
            .sum()
    }

    /// Adds `grad` into the slot's gradient accumulator.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        debug_assert!(p.alive && p.learnable);
        debug_assert_eq!(p.grad.len(), grad.len());
        for (g, &d) in p.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }
}

/// One momentum-SGD step over every live learnable parameter:
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
/// Gradients are zeroed afterwards. Weight decay is skipped for slots with
/// `decay == false` (gate weights). Errors on a non-finite gradient, naming
/// the offending parameter.
pub fn sgd_step(bank: &mut ParamBank, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for p in &mut bank.params {
        if !p.alive || !p.learnable {
            continue;
        }
        let wd = if p.decay { weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let g = p.grad[i];
            if !g.is_finite() {
                return Err(CoreError::NonFinite(format!("gradient of {}", p.label)));
            }
            let v = momentum * p.velocity[i] + g + wd * p.data[i];
            p.velocity[i] = v;
            p.data[i] -= lr * v;
            p.grad[i] = 0.0;
        }
    }
    Ok(())
}

/// Cosine learning-rate schedule over the whole run:
/// `lr_max * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(epoch: u32, total_epochs: u32, lr_max: f64) -> f64 {
    debug_assert!(total_epochs > 0);
    let t = epoch as f64 / total_epochs as f64;
    lr_max * (1.0 + fmath::cos(core::f64::consts::PI * t)) / 2.0
}

/// Draws a standard normal via Box-Muller. Consumes two uniforms per pair and
/// caches nothing, so the draw sequence is a pure function of the rng stream.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // gen::<f64>() is uniform on [0, 1); shift away from zero for the log
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(2.0 * core::f64::consts::PI * u2)
}

/// He-normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let std = fmath::sqrt(2.0 / fan_in as f64);
    (0..len).map(|_| normal(rng) * std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!(fmath::abs(a - b) <= tol, "{a} vs {b}");
    }

    #[test]
    fn plain_sgd_step() {
        let mut bank = ParamBank::new();
        let id = bank.add("w".into(), Shape(vec![1]), vec![1.0], true);
        bank.get_mut(id).grad[0] = 1.0;
        sgd_step(&mut bank, 0.1, 0.0, 0.0).unwrap();
        approx(bank.get(id).data[0], 0.9, 1e-12);
        assert_eq!(bank.get(id).grad[0], 0.0);
    }

    #[test]
    fn momentum_accumulates_over_steps() {
        let mut bank = ParamBank::new();
        let id = bank.add("w".into(), Shape(vec![1]), vec![0.0], true);
        bank.get_mut(id).grad[0] = 1.0;
        sgd_step(&mut bank, 0.1, 0.9, 0.0).unwrap();
        approx(bank.get(id).data[0], -0.1, 1e-12);
        bank.get_mut(id).grad[0] = 1.0;
        sgd_step(&mut bank, 0.1, 0.9, 0.0).unwrap();
        approx(bank.get(id).data[0], -0.29, 1e-12);
    }

    #[test]
    fn weight_decay_skipped_without_decay_flag() {
        let mut bank = ParamBank::new();
        let with = bank.add("conv".into(), Shape(vec![1]), vec![1.0], true);
        let without = bank.add("gate".into(), Shape(vec![1]), vec![1.0], false);
        sgd_step(&mut bank, 1.0, 0.0, 0.1).unwrap();
        approx(bank.get(with).data[0], 0.9, 1e-12);
        approx(bank.get(without).data[0], 1.0, 1e-12);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut bank = ParamBank::new();
        let id = bank.add("w".into(), Shape(vec![2]), vec![1.0, -2.0], true);
        bank.get_mut(id).grad.copy_from_slice(&[3.0, 4.0]);
        sgd_step(&mut bank, 0.0, 0.9, 3e-4).unwrap();
        assert_eq!(bank.get(id).data, vec![1.0, -2.0]);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut bank = ParamBank::new();
        let id = bank.add("cell0/edge1".into(), Shape(vec![1]), vec![0.0], true);
        bank.get_mut(id).grad[0] = f64::NAN;
        let err = sgd_step(&mut bank, 0.1, 0.9, 0.0).unwrap_err();
        match err {
            CoreError::NonFinite(msg) => assert!(msg.contains("cell0/edge1")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        approx(cosine_lr(0, 600, 0.01), 0.01, 1e-15);
        approx(cosine_lr(300, 600, 0.01), 0.005, 1e-15);
        let tail = cosine_lr(599, 600, 0.01);
        approx(tail, 6.85e-8, 1e-9);
        assert!(tail > 0.0);
    }

    #[test]
    fn cosine_is_monotone_decreasing() {
        let mut prev = f64::INFINITY;
        for e in 0..=60 {
            let lr = cosine_lr(e, 60, 0.025);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn killed_slot_drops_storage_but_keeps_ids() {
        let mut bank = ParamBank::new();
        let a = bank.add("a".into(), Shape(vec![4]), vec![1.0; 4], true);
        let b = bank.add("b".into(), Shape(vec![2]), vec![2.0; 2], true);
        bank.kill(a);
        assert!(!bank.get(a).alive);
        assert!(bank.get(a).data.is_empty());
        assert_eq!(bank.get(b).data, vec![2.0; 2]);
        assert_eq!(bank.learnable_elements(), 2);
    }

    #[test]
    fn normal_draws_are_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(normal(&mut r1).to_bits(), normal(&mut r2).to_bits());
        }
    }
}
