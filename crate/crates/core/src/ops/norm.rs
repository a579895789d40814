//! Channel normalization: per-channel standardization with learned scale and
//! shift, plus running statistics for evaluation.
//!
//! Training passes normalize by the current batch statistics (biased variance
//! throughout) and report them so the caller can fold them into the running
//! buffers; evaluation passes normalize by the stored running statistics.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::params::{ParamBank, ParamId};
use crate::tape::{BackwardOp, Tape, ValueId};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Batch statistics produced by a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Folds the batch statistics into running buffers:
    /// `r <- (1 - momentum) * r + momentum * batch`.
    pub fn update_running(&self, bank: &mut ParamBank, mean_id: ParamId, var_id: ParamId) {
        let rm = bank.get_mut(mean_id);
        for (r, &m) in rm.data.iter_mut().zip(&self.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * m;
        }
        let rv = bank.get_mut(var_id);
        for (r, &v) in rv.data.iter_mut().zip(&self.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
    }
}

struct NormTrainBack {
    x: ValueId,
    gamma: ValueId,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    spatial: usize,
}

impl BackwardOp for NormTrainBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        let gamma = &vals[self.gamma.0];
        let m = (self.n * self.spatial) as f64;
        let mut gx = grads[self.x.0].take();
        let mut gg = grads[self.gamma.0].take();
        for ch in 0..self.c {
            // per-channel reductions over (N, H, W)
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..self.n {
                let base = (n * self.c + ch) * self.spatial;
                for i in 0..self.spatial {
                    let go = out_grad[base + i];
                    sum_g += go;
                    sum_gx += go * self.xhat[base + i];
                }
            }
            if let Some(gg) = gg.as_mut() {
                gg[ch] += sum_gx;
            }
            if let Some(gx) = gx.as_mut() {
                let ginv = gamma[ch] * self.inv_std[ch];
                for n in 0..self.n {
                    let base = (n * self.c + ch) * self.spatial;
                    for i in 0..self.spatial {
                        let go = out_grad[base + i];
                        gx[base + i] +=
                            ginv * (go - (sum_g + self.xhat[base + i] * sum_gx) / m);
                    }
                }
            }
        }
        grads[self.x.0] = gx;
        grads[self.gamma.0] = gg;
    }
}

struct ShiftBack {
    beta: ValueId,
    n: usize,
    c: usize,
    spatial: usize,
}

impl BackwardOp for ShiftBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gb) = grads[self.beta.0].as_mut() {
            for ch in 0..self.c {
                let mut sum = 0.0;
                for n in 0..self.n {
                    let base = (n * self.c + ch) * self.spatial;
                    for i in 0..self.spatial {
                        sum += out_grad[base + i];
                    }
                }
                gb[ch] += sum;
            }
        }
    }
}

struct NormEvalBack {
    x: ValueId,
    gamma: ValueId,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    n: usize,
    c: usize,
    spatial: usize,
}

impl BackwardOp for NormEvalBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        let gamma = &vals[self.gamma.0];
        let mut gx = grads[self.x.0].take();
        let mut gg = grads[self.gamma.0].take();
        for ch in 0..self.c {
            let mut sum_gx = 0.0;
            for n in 0..self.n {
                let base = (n * self.c + ch) * self.spatial;
                for i in 0..self.spatial {
                    let go = out_grad[base + i];
                    sum_gx += go * self.xhat[base + i];
                    if let Some(gx) = gx.as_mut() {
                        gx[base + i] += go * gamma[ch] * self.inv_std[ch];
                    }
                }
            }
            if let Some(gg) = gg.as_mut() {
                gg[ch] += sum_gx;
            }
        }
        grads[self.x.0] = gx;
        grads[self.gamma.0] = gg;
    }
}

fn check_norm_shapes(tape: &Tape, x: ValueId, gamma: ValueId, beta: ValueId, ctx: &str) -> Result<(usize, usize, usize)> {
    let xs = tape.shape(x);
    if xs.rank() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "{ctx}: channel norm needs a rank-4 input, got {}",
            xs.describe()
        )));
    }
    let c = xs.c();
    for (name, id) in [("scale", gamma), ("shift", beta)] {
        let s = tape.shape(id);
        if s.len() != c {
            return Err(CoreError::ShapeMismatch(format!(
                "{ctx}: channel norm {name} has {} elements for {} channels",
                s.len(),
                c
            )));
        }
    }
    Ok((xs.n(), c, xs.h() * xs.w()))
}

impl Tape {
    /// Training-mode channel normalization by batch statistics. Returns the
    /// normalized output and the statistics for the running-buffer update.
    pub fn channel_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        ctx: &str,
    ) -> Result<(ValueId, BatchStats)> {
        let (n, c, spatial) = check_norm_shapes(self, x, gamma, beta, ctx)?;
        let m = (n * spatial) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for bn in 0..n {
                let base = (bn * c + ch) * spatial;
                for i in 0..spatial {
                    sum += xv[base + i];
                }
            }
            mean[ch] = sum / m;
            let mut sq = 0.0;
            for bn in 0..n {
                let base = (bn * c + ch) * spatial;
                for i in 0..spatial {
                    let d = xv[base + i] - mean[ch];
                    sq += d * d;
                }
            }
            var[ch] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / fmath::sqrt(v + NORM_EPS)).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * spatial;
                for i in 0..spatial {
                    let h = (xv[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out[base + i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let wants = self.wants_grad(x) || self.wants_grad(gamma) || self.wants_grad(beta);
        let shape = self.shape(x).clone();
        // two stacked backward steps let the scale/normalize part and the
        // shift part each see the same output gradient
        let scaled = self.push(
            shape.clone(),
            out,
            Some(Box::new(NormTrainBack {
                x,
                gamma,
                xhat,
                inv_std,
                n,
                c,
                spatial,
            })),
            wants,
        );
        let out2 = self.value(scaled).to_vec();
        let y = self.push(
            shape,
            out2,
            Some(Box::new(CombinedShift {
                scaled,
                shift: ShiftBack {
                    beta,
                    n,
                    c,
                    spatial,
                },
            })),
            wants,
        );
        Ok((y, BatchStats { mean, var }))
    }

    /// Evaluation-mode channel normalization by running statistics.
    pub fn channel_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        run_mean: ValueId,
        run_var: ValueId,
        ctx: &str,
    ) -> Result<ValueId> {
        let (n, c, spatial) = check_norm_shapes(self, x, gamma, beta, ctx)?;
        let xv = self.value(x);
        let mean = self.value(run_mean);
        let var = self.value(run_var);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / fmath::sqrt(v + NORM_EPS)).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * spatial;
                for i in 0..spatial {
                    let h = (xv[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out[base + i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let wants = self.wants_grad(x) || self.wants_grad(gamma) || self.wants_grad(beta);
        let shape = self.shape(x).clone();
        let scaled = self.push(
            shape.clone(),
            out,
            Some(Box::new(NormEvalBack {
                x,
                gamma,
                xhat,
                inv_std,
                n,
                c,
                spatial,
            })),
            wants,
        );
        let out2 = self.value(scaled).to_vec();
        Ok(self.push(
            shape,
            out2,
            Some(Box::new(CombinedShift {
                scaled,
                shift: ShiftBack {
                    beta,
                    n,
                    c,
                    spatial,
                },
            })),
            wants,
        ))
    }
}

/// Passes the gradient through to the scaled node and accumulates the shift
/// parameter's gradient.
struct CombinedShift {
    scaled: ValueId,
    shift: ShiftBack,
}

impl BackwardOp for CombinedShift {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        crate::tape::accum_all(&mut grads[self.scaled.0], out_grad);
        self.shift.backward(out_grad, vals, grads);
    }
}
