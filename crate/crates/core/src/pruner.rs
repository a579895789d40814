//! Differentiable memory-aware pruners.
//!
//! A pruner scales a connection's output by `G(w) + S(w)` where `G` is a hard
//! step gate and `S` a sawtooth remainder:
//!
//! ```text
//! G(w) = 0 if w < 0 else 1
//! S(w) = (M w - floor(M w)) / M
//! P(x, w) = (G(w) + S(w)) * x
//! ```
//!
//! `S` is bounded by `1/M`, so the multiplier is within `1/M` of the hard
//! gate, while its slope is exactly 1 almost everywhere; gradients therefore
//! flow to `w` at full strength even when the gate is closed. Backward treats
//! `d(G+S)/dw = 1` everywhere, which is the almost-everywhere derivative.
//!
//! The compression loss pulls per-cell live-byte ratios toward a target:
//! `L = lambda * ||target - ratios||_2`, with each ratio built from the same
//! `G + S` terms so the loss is differentiable in every gate weight.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::fmath;
use crate::params::ParamId;
use crate::tape::{accum, accum_all, BackwardOp, Tape, ValueId};
use crate::tensor::Shape;

/// Epochs between lambda doublings inside a prune phase, and between periodic
/// deadhead sweeps.
pub const LAMBDA_DOUBLING_PERIOD: u32 = 16;

/// Hard gate: 0 for negative weights, 1 otherwise.
pub fn gate(w: f64) -> f64 {
    if w < 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Sawtooth remainder in `[0, 1/M)`.
pub fn saw(w: f64, m: f64) -> f64 {
    let mw = m * w;
    (mw - fmath::floor(mw)) / m
}

/// `G(w) + S(w)`: the pruner's multiplier.
pub fn gate_saw(w: f64, m: f64) -> f64 {
    gate(w) + saw(w, m)
}

/// One trainable pruner. The weight lives in the parameter bank so it trains
/// under the same optimizer as the model weights; `size_bytes` is the memory
/// cost attributed to the guarded connection.
#[derive(Debug, Clone)]
pub struct PrunerGate {
    pub weight: ParamId,
    pub m: f64,
    pub size_bytes: u64,
    pub alive: bool,
}

/// Snapshot of compression bookkeeping for one training step.
#[derive(Debug, Clone)]
pub struct CompressionState {
    /// Per-cell live ratio, in construction order of placed cells.
    pub per_cell_ratio: Vec<f64>,
    /// Target ratio for the current prune phase; `None` during free training.
    pub target: Option<f64>,
    pub lambda: f64,
}

impl CompressionState {
    /// `lambda * ||target - ratios||_2`; zero when no target is set.
    pub fn loss_value(&self) -> f64 {
        match self.target {
            None => 0.0,
            Some(t) => {
                let sq: f64 = self
                    .per_cell_ratio
                    .iter()
                    .map(|&c| (t - c) * (t - c))
                    .sum();
                self.lambda * fmath::sqrt(sq)
            }
        }
    }
}

/// Lambda escalation inside a prune phase: `lambda0 * 2^(epochs / 16)` while
/// the target is unmet. Resets happen by construction (each phase starts its
/// epoch counter at zero); once the target is met the phase ends and no
/// further escalation applies.
pub fn lambda_schedule(epochs_in_phase: u32, lambda0: f64, target_met: bool) -> f64 {
    if target_met {
        lambda0
    } else {
        lambda0 * fmath::pow2(epochs_in_phase / LAMBDA_DOUBLING_PERIOD)
    }
}

struct PruneBack {
    x: ValueId,
    w: ValueId,
    mult: f64,
}

impl BackwardOp for PruneBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        let xv = &vals[self.x.0];
        if grads[self.w.0].is_some() {
            let mut sum = 0.0;
            for i in 0..out_grad.len() {
                sum += xv[i] * out_grad[i];
            }
            accum(&mut grads[self.w.0], 0, sum);
        }
        if let Some(gx) = grads[self.x.0].as_mut() {
            for i in 0..out_grad.len() {
                gx[i] += self.mult * out_grad[i];
            }
        }
    }
}

struct GateSawBack {
    w: ValueId,
}

impl BackwardOp for GateSawBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        accum_all(&mut grads[self.w.0], out_grad);
    }
}

struct WeightedGateSawSumBack {
    terms: Vec<(ValueId, f64)>,
}

impl BackwardOp for WeightedGateSawSumBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        for &(w, coeff) in &self.terms {
            accum(&mut grads[w.0], 0, coeff * out_grad[0]);
        }
    }
}

impl Tape {
    /// Applies a pruner to a tensor: `(G(w) + S(w)) * x` with the gate weight
    /// leased as a one-element node.
    pub fn prune(&mut self, x: ValueId, w: ValueId, m: f64) -> ValueId {
        debug_assert_eq!(self.shape(w).len(), 1);
        let wv = self.value(w)[0];
        let mult = gate_saw(wv, m);
        let out: Vec<f64> = self.value(x).iter().map(|&v| mult * v).collect();
        let wants = self.wants_grad(x) || self.wants_grad(w);
        self.push(
            self.shape(x).clone(),
            out,
            Some(Box::new(PruneBack { x, w, mult })),
            wants,
        )
    }

    /// Weighted sum of pruner multipliers as a scalar node:
    /// `sum_j coeff_j * (G + S)(w_j)`. This is the differentiable numerator of
    /// a cell's compression ratio (coefficients are byte sizes over the cell
    /// total).
    pub fn weighted_gate_saw_sum(&mut self, terms: &[(ValueId, f64)], m: f64) -> ValueId {
        let mut total = 0.0;
        for &(w, coeff) in terms {
            total += coeff * gate_saw(self.value(w)[0], m);
        }
        let wants = terms.iter().any(|&(w, _)| self.wants_grad(w));
        self.push(
            Shape::scalar(),
            vec![total],
            Some(Box::new(WeightedGateSawSumBack {
                terms: terms.to_vec(),
            })),
            wants,
        )
    }

    /// `G(w) + S(w)` as a scalar node with unit pass-through gradient.
    pub fn gate_saw_value(&mut self, w: ValueId, m: f64) -> ValueId {
        let v = gate_saw(self.value(w)[0], m);
        let wants = self.wants_grad(w);
        self.push(
            Shape::scalar(),
            vec![v],
            Some(Box::new(GateSawBack { w })),
            wants,
        )
    }

    /// Builds `lambda * ||target - c||_2` from per-cell differentiable ratio
    /// nodes. Returns a scalar node.
    pub fn compression_loss(
        &mut self,
        ratios: &[ValueId],
        target: f64,
        lambda: f64,
    ) -> Result<ValueId> {
        let mut squares = Vec::with_capacity(ratios.len());
        for &c in ratios {
            let diff = self.affine(c, -1.0, target);
            squares.push(self.square(diff));
        }
        let sum = self.add_n(&squares)?;
        let norm = self.sqrt(sum)?;
        Ok(self.affine(norm, lambda, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBank;
    use crate::tensor::{Shape, Tensor};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!(fmath::abs(a - b) <= tol, "{a} vs {b}");
    }

    #[test]
    fn gate_is_a_step() {
        assert_eq!(gate(-0.25), 0.0);
        assert_eq!(gate(0.0), 1.0);
        assert_eq!(gate(0.25), 1.0);
    }

    #[test]
    fn saw_known_values() {
        approx(saw(0.2503, 1000.0), 0.0003, 1e-9);
        assert_eq!(saw(0.5, 1000.0), 0.0);
        let v = saw(-0.2503, 1000.0);
        approx(v, 0.0007, 1e-9);
    }

    #[test]
    fn saw_stays_in_band() {
        let m = 1e5;
        for i in 0..2000 {
            let w = -1.0 + i as f64 * 0.001;
            let s = saw(w, m);
            assert!((0.0..1.0 / m).contains(&s), "saw({w}) = {s}");
        }
    }

    #[test]
    fn prune_scales_by_gate_plus_saw() {
        let mut bank = ParamBank::new();
        let w = bank.add("gate".into(), Shape(vec![1]), vec![0.5], false);
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::from_vec(Shape(vec![3]), vec![1.0, 2.0, 3.0]).unwrap());
        let wid = tape.lease(&bank, w);
        let y = tape.prune(x, wid, 1000.0);
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn closed_gate_zeroes_output() {
        let mut bank = ParamBank::new();
        let w = bank.add("gate".into(), Shape(vec![1]), vec![-0.5], false);
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::from_vec(Shape(vec![2]), vec![4.0, 5.0]).unwrap());
        let wid = tape.lease(&bank, w);
        let y = tape.prune(x, wid, 1000.0);
        assert_eq!(tape.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn gate_weight_gradient_is_sum_of_products() {
        let mut bank = ParamBank::new();
        let w = bank.add("gate".into(), Shape(vec![1]), vec![0.37], false);
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(Shape(vec![3]), vec![1.0, 2.0, 3.0]).unwrap());
        let wid = tape.lease(&bank, w);
        let y = tape.prune(x, wid, 1e5);
        // with loss = sum(y), dL/dw = sum(x) regardless of the gate state
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        tape.write_grads(&mut bank);
        approx(bank.get(w).grad[0], 6.0, 1e-12);
    }

    #[test]
    fn closed_gate_still_passes_gradient_to_weight() {
        let mut bank = ParamBank::new();
        let w = bank.add("gate".into(), Shape(vec![1]), vec![-0.4], false);
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::from_vec(Shape(vec![2]), vec![2.0, 5.0]).unwrap());
        let wid = tape.lease(&bank, w);
        let y = tape.prune(x, wid, 1e5);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        tape.write_grads(&mut bank);
        approx(bank.get(w).grad[0], 7.0, 1e-12);
    }

    #[test]
    fn compression_loss_single_cell() {
        let state = CompressionState {
            per_cell_ratio: vec![0.75],
            target: Some(0.5),
            lambda: 0.01,
        };
        approx(state.loss_value(), 0.0025, 1e-12);
    }

    #[test]
    fn compression_loss_two_cells() {
        let state = CompressionState {
            per_cell_ratio: vec![0.75, 0.75],
            target: Some(0.5),
            lambda: 0.01,
        };
        approx(state.loss_value(), 0.0025 * fmath::sqrt(2.0), 1e-12);
    }

    #[test]
    fn no_target_means_zero_loss() {
        let state = CompressionState {
            per_cell_ratio: vec![0.9, 0.1],
            target: None,
            lambda: 0.5,
        };
        assert_eq!(state.loss_value(), 0.0);
    }

    #[test]
    fn lambda_doubles_every_sixteen_epochs() {
        approx(lambda_schedule(0, 0.01, false), 0.01, 1e-15);
        approx(lambda_schedule(15, 0.01, false), 0.01, 1e-15);
        approx(lambda_schedule(16, 0.01, false), 0.02, 1e-15);
        approx(lambda_schedule(31, 0.01, false), 0.02, 1e-15);
        approx(lambda_schedule(32, 0.01, false), 0.04, 1e-15);
        approx(lambda_schedule(40, 0.01, true), 0.01, 1e-15);
    }

    #[test]
    fn tape_compression_loss_matches_state_value() {
        let mut bank = ParamBank::new();
        let w1 = bank.add("g1".into(), Shape(vec![1]), vec![0.5], false);
        let w2 = bank.add("g2".into(), Shape(vec![1]), vec![-0.5], false);
        let m = 1e5;
        let mut tape = Tape::new();
        let id1 = tape.lease(&bank, w1);
        let id2 = tape.lease(&bank, w2);
        // one cell, two equal-size connections: ratio = (gs(w1) + gs(w2)) / 2
        let ratio = tape.weighted_gate_saw_sum(&[(id1, 0.5), (id2, 0.5)], m);
        let loss = tape.compression_loss(&[ratio], 0.25, 0.01).unwrap();
        let state = CompressionState {
            per_cell_ratio: vec![tape.value(ratio)[0]],
            target: Some(0.25),
            lambda: 0.01,
        };
        approx(tape.value(loss)[0], state.loss_value(), 1e-15);
        // gradient reaches both gate weights
        tape.backward(loss).unwrap();
        tape.write_grads(&mut bank);
        assert!(bank.get(w1).grad[0] != 0.0);
        assert!(bank.get(w2).grad[0] != 0.0);
    }
}
