//! Fully-connected layer, softmax cross-entropy, and accuracy.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::tape::{BackwardOp, Tape, ValueId};
use crate::tensor::Shape;

struct LinearBack {
    x: ValueId,
    w: ValueId,
    b: ValueId,
    n: usize,
    c: usize,
    k: usize,
}

impl BackwardOp for LinearBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        let xv = &vals[self.x.0];
        let wv = &vals[self.w.0];
        let mut gx = grads[self.x.0].take();
        let mut gw = grads[self.w.0].take();
        let mut gb = grads[self.b.0].take();
        for n in 0..self.n {
            for k in 0..self.k {
                let go = out_grad[n * self.k + k];
                if go == 0.0 {
                    continue;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[k] += go;
                }
                for c in 0..self.c {
                    if let Some(gw) = gw.as_mut() {
                        gw[k * self.c + c] += go * xv[n * self.c + c];
                    }
                    if let Some(gx) = gx.as_mut() {
                        gx[n * self.c + c] += go * wv[k * self.c + c];
                    }
                }
            }
        }
        grads[self.x.0] = gx;
        grads[self.w.0] = gw;
        grads[self.b.0] = gb;
    }
}

struct CrossEntropyBack {
    logits: ValueId,
    probs: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
}

impl BackwardOp for CrossEntropyBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gl) = grads[self.logits.0].as_mut() {
            let n = self.labels.len();
            let scale = out_grad[0] / n as f64;
            for (s, &label) in self.labels.iter().enumerate() {
                for k in 0..self.k {
                    let indicator = if k == label { 1.0 } else { 0.0 };
                    gl[s * self.k + k] += scale * (self.probs[s * self.k + k] - indicator);
                }
            }
        }
    }
}

impl Tape {
    /// `y = x W^T + b` with `x: (N, C)`, `W: (K, C)`, `b: (K)`.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId, ctx: &str) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.rank() != 2 || ws.rank() != 2 || bs.rank() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "{ctx}: linear needs (N,C) x (K,C) + (K), got {}, {}, {}",
                xs.describe(),
                ws.describe(),
                bs.describe()
            )));
        }
        let (n, c) = (xs.0[0], xs.0[1]);
        let (k, wc) = (ws.0[0], ws.0[1]);
        if wc != c || bs.0[0] != k {
            return Err(CoreError::ShapeMismatch(format!(
                "{ctx}: linear weight {} / bias {} incompatible with input {}",
                ws.describe(),
                bs.describe(),
                xs.describe()
            )));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; n * k];
        for s in 0..n {
            for kk in 0..k {
                let mut acc = bv[kk];
                for cc in 0..c {
                    acc += xv[s * c + cc] * wv[kk * c + cc];
                }
                out[s * k + kk] = acc;
            }
        }
        let wants = self.wants_grad(x) || self.wants_grad(w) || self.wants_grad(b);
        Ok(self.push(
            Shape(vec![n, k]),
            out,
            Some(Box::new(LinearBack { x, w, b, n, c, k })),
            wants,
        ))
    }

    /// Mean softmax cross-entropy of `(N, K)` logits against class labels.
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let ls = self.shape(logits);
        if ls.rank() != 2 {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy needs (N,K) logits, got {}",
                ls.describe()
            )));
        }
        let (n, k) = (ls.0[0], ls.0[1]);
        if labels.len() != n {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy got {} labels for {} samples",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(CoreError::Invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for s in 0..n {
            let row = &lv[s * k..(s + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for kk in 0..k {
                let e = fmath::exp(row[kk] - max);
                probs[s * k + kk] = e;
                denom += e;
            }
            for kk in 0..k {
                probs[s * k + kk] /= denom;
            }
            // lse - logit[label], in stabilized form
            total += fmath::ln(denom) + max - row[labels[s]];
        }
        let mean = total / n as f64;
        let wants = self.wants_grad(logits);
        Ok(self.push(
            Shape::scalar(),
            vec![mean],
            Some(Box::new(CrossEntropyBack {
                logits,
                probs,
                labels: labels.to_vec(),
                k,
            })),
            wants,
        ))
    }
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &[f64], n: usize, k: usize, labels: &[usize]) -> f64 {
    debug_assert_eq!(logits.len(), n * k);
    debug_assert_eq!(labels.len(), n);
    if n == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    for s in 0..n {
        let row = &logits[s * k..(s + 1) * k];
        let mut best = 0usize;
        for kk in 1..k {
            if row[kk] > row[best] {
                best = kk;
            }
        }
        if best == labels[s] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cross_entropy_known_value() {
        let mut tape = Tape::no_grad();
        let logits = tape.input(
            &Tensor::from_vec(Shape(vec![1, 3]), vec![1.0, 2.0, 3.0]).unwrap(),
        );
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        assert!((tape.value(loss)[0] - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::no_grad();
        let logits = tape.input(&Tensor::zeros(Shape(vec![2, 3])));
        assert!(tape.cross_entropy(logits, &[0, 3]).is_err());
    }

    #[test]
    fn linear_computes_affine_map() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::from_vec(Shape(vec![1, 2]), vec![1.0, 2.0]).unwrap());
        let w = tape.input(
            &Tensor::from_vec(Shape(vec![2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let b = tape.input(&Tensor::from_vec(Shape(vec![2]), vec![10.0, 20.0]).unwrap());
        let y = tape.linear(x, w, b, "tower").unwrap();
        assert_eq!(tape.value(y), &[11.0, 22.0]);
    }

    #[test]
    fn accuracy_breaks_ties_toward_lowest_index() {
        let logits = vec![0.5, 0.5, 0.1];
        assert_eq!(accuracy(&logits, 1, 3, &[0]), 1.0);
        assert_eq!(accuracy(&logits, 1, 3, &[1]), 0.0);
    }

    #[test]
    fn uniform_logits_predict_class_zero() {
        // a constant predictor on a balanced set scores 1/K
        let n = 9;
        let k = 3;
        let logits = vec![0.0; n * k];
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let acc = accuracy(&logits, n, k, &labels);
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
    }
}
