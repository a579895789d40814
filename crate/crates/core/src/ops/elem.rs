//! Elementwise and structural ops: relu, n-ary addition, affine maps,
//! square/sqrt, and per-sample drop-path.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tape::{accum_all, BackwardOp, Tape, ValueId};

struct ReluBack {
    x: ValueId,
}

impl BackwardOp for ReluBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            let xv = &vals[self.x.0];
            for i in 0..out_grad.len() {
                if xv[i] > 0.0 {
                    gx[i] += out_grad[i];
                }
            }
        }
    }
}

struct AddNBack {
    inputs: Vec<ValueId>,
}

impl BackwardOp for AddNBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        for id in &self.inputs {
            accum_all(&mut grads[id.0], out_grad);
        }
    }
}

struct AffineBack {
    x: ValueId,
    a: f64,
}

impl BackwardOp for AffineBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            for i in 0..out_grad.len() {
                gx[i] += self.a * out_grad[i];
            }
        }
    }
}

struct SquareBack {
    x: ValueId,
}

impl BackwardOp for SquareBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            let xv = &vals[self.x.0];
            for i in 0..out_grad.len() {
                gx[i] += 2.0 * xv[i] * out_grad[i];
            }
        }
    }
}

struct SqrtBack {
    x: ValueId,
    y: Vec<f64>,
}

impl BackwardOp for SqrtBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            for i in 0..out_grad.len() {
                // subgradient 0 at the origin keeps an exactly-met target finite
                if self.y[i] > 0.0 {
                    gx[i] += out_grad[i] / (2.0 * self.y[i]);
                }
            }
        }
    }
}

struct SumAllBack {
    x: ValueId,
}

impl BackwardOp for SumAllBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            for g in gx.iter_mut() {
                *g += out_grad[0];
            }
        }
    }
}

struct DropPathBack {
    x: ValueId,
    scale: Vec<f64>,
    sample_len: usize,
}

impl BackwardOp for DropPathBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            for (n, &s) in self.scale.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let base = n * self.sample_len;
                for i in 0..self.sample_len {
                    gx[base + i] += s * out_grad[base + i];
                }
            }
        }
    }
}

impl Tape {
    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let out: Vec<f64> = xv.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let wants = self.wants_grad(x);
        self.push(self.shape(x).clone(), out, Some(Box::new(ReluBack { x })), wants)
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(CoreError::Invalid("add_n needs at least one input".into()));
        }
        let shape = self.shape(inputs[0]).clone();
        for &id in &inputs[1..] {
            if self.shape(id) != &shape {
                return Err(CoreError::ShapeMismatch(format!(
                    "add_n over {} and {}",
                    shape.describe(),
                    self.shape(id).describe()
                )));
            }
        }
        let mut out = self.value(inputs[0]).to_vec();
        for &id in &inputs[1..] {
            let v = self.value(id);
            for i in 0..out.len() {
                out[i] += v[i];
            }
        }
        let wants = inputs.iter().any(|&id| self.wants_grad(id));
        Ok(self.push(
            shape,
            out,
            Some(Box::new(AddNBack {
                inputs: inputs.to_vec(),
            })),
            wants,
        ))
    }

    /// `a * x + b` elementwise with scalar coefficients.
    pub fn affine(&mut self, x: ValueId, a: f64, b: f64) -> ValueId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| a * v + b).collect();
        let wants = self.wants_grad(x);
        self.push(self.shape(x).clone(), out, Some(Box::new(AffineBack { x, a })), wants)
    }

    pub fn square(&mut self, x: ValueId) -> ValueId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * v).collect();
        let wants = self.wants_grad(x);
        self.push(self.shape(x).clone(), out, Some(Box::new(SquareBack { x })), wants)
    }

    /// Elementwise square root of non-negative input.
    pub fn sqrt(&mut self, x: ValueId) -> Result<ValueId> {
        let mut out = Vec::with_capacity(self.value(x).len());
        for &v in self.value(x) {
            if v < 0.0 {
                return Err(CoreError::NonFinite("sqrt of negative value".into()));
            }
            out.push(fmath::sqrt(v));
        }
        let wants = self.wants_grad(x);
        let back = SqrtBack { x, y: out.clone() };
        Ok(self.push(self.shape(x).clone(), out, Some(Box::new(back)), wants))
    }

    /// Sum of every element as a scalar node.
    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let total: f64 = self.value(x).iter().sum();
        let wants = self.wants_grad(x);
        self.push(
            crate::tensor::Shape::scalar(),
            vec![total],
            Some(Box::new(SumAllBack { x })),
            wants,
        )
    }

    /// Per-sample stochastic path drop: each sample in the batch is zeroed
    /// with probability `p`; survivors are scaled by `1 / (1 - p)` so the
    /// expectation is preserved. `p == 0` is the identity.
    pub fn drop_path(&mut self, x: ValueId, p: f64, rng: &mut ChaCha8Rng) -> ValueId {
        if p <= 0.0 {
            return x;
        }
        let shape = self.shape(x).clone();
        let n = shape.n();
        let sample_len = shape.len() / n;
        let keep_scale = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() >= p { keep_scale } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (s_idx, &s) in scale.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let base = s_idx * sample_len;
            for i in 0..sample_len {
                out[base + i] = s * xv[base + i];
            }
        }
        let wants = self.wants_grad(x);
        self.push(
            shape,
            out,
            Some(Box::new(DropPathBack {
                x,
                scale,
                sample_len,
            })),
            wants,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};
    use rand::SeedableRng;

    #[test]
    fn relu_forward() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::from_vec(Shape(vec![4]), vec![-1.0, 0.0, 0.5, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn add_n_rejects_shape_mismatch() {
        let mut tape = Tape::no_grad();
        let a = tape.input(&Tensor::zeros(Shape(vec![2])));
        let b = tape.input(&Tensor::zeros(Shape(vec![3])));
        assert!(tape.add_n(&[a, b]).is_err());
    }

    #[test]
    fn drop_path_zero_probability_is_identity() {
        let mut tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.input(&Tensor::filled(Shape::nchw(2, 1, 2, 2), 1.5));
        let y = tape.drop_path(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn drop_path_full_probability_zeroes_everything() {
        let mut tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.input(&Tensor::filled(Shape::nchw(8, 1, 2, 2), 3.0));
        let y = tape.drop_path(x, 1.0, &mut rng);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn drop_path_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = 0.3;
        let draws = 100_000usize;
        let mut sum = 0.0;
        for _ in 0..draws {
            let mut tape = Tape::no_grad();
            let x = tape.input(&Tensor::filled(Shape::nchw(1, 1, 1, 1), 1.0));
            let y = tape.drop_path(x, p, &mut rng);
            sum += tape.value(y)[0];
        }
        let mean = sum / draws as f64;
        // per-draw variance: E[X^2] - 1 = 1/(1-p) - 1
        let se = fmath::sqrt((1.0 / (1.0 - p) - 1.0) / draws as f64);
        assert!(fmath::abs(mean - 1.0) < 3.0 * se, "mean {mean}, se {se}");
    }
}
